"""Counter-based random streams keyed by (seed, coordinates).

Every draw is a pure function of the root seed, the stream path and the
(tree, node, slot) counter, so the same tree sees the same randomness no
matter how trees are batched, chunked or spread over threads.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB

_U_GOLDEN = np.uint64(_GOLDEN)
_U_M1 = np.uint64(_M1)
_U_M2 = np.uint64(_M2)
_S30, _S27, _S31, _S11 = (np.uint64(s) for s in (30, 27, 31, 11))
_TWO_M53 = 2.0**-53


def _mix_int(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * _M1) & _MASK
    z = ((z ^ (z >> 27)) * _M2) & _MASK
    return z ^ (z >> 31)


def _mix_arr(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _S30)) * _U_M1
    z = (z ^ (z >> _S27)) * _U_M2
    return z ^ (z >> _S31)


def _fold_int(h: int, c: int) -> int:
    return _mix_int(((h + _GOLDEN) & _MASK) ^ (c & _MASK))


def _fold_arr(h, c) -> np.ndarray:
    """Fold counters ``c`` into ``h`` (a python int or a uint64 array)."""
    c = np.asarray(c)
    if c.dtype != np.uint64:
        c = c.astype(np.uint64)
    if isinstance(h, int):
        # adding in python keeps numpy scalar arithmetic from warning on wraparound
        h = np.uint64((h + _GOLDEN) & _MASK)
    else:
        h = h + _U_GOLDEN
    return _mix_arr(h ^ c)


@dataclass(frozen=True)
class RngStream:
    """A named position in the random-number tree.

    ``RngStream(seed).child(step)`` is the stream for boosting step ``step``;
    draws inside it are addressed by ``(tree, node, slot)``.
    """

    seed: int
    path: tuple[int, ...] = ()

    def child(self, *coords: int) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(int(c) for c in coords))

    @property
    def key(self) -> int:
        h = _mix_int(self.seed & _MASK)
        for c in self.path:
            h = _fold_int(h, c)
        return h

    def bits(self, tree, node, slot) -> np.ndarray:
        """Raw 64-bit words for broadcastable integer arrays of counters."""
        coords = [np.asarray(c) for c in (tree, node, slot)]
        ndim = max(c.ndim for c in coords)
        h = self.key
        # leading single counters fold as python ints (same bits, less overhead)
        while coords and coords[0].size == 1:
            h = _fold_int(h, int(coords.pop(0).reshape(-1)[0]))
        if not coords:
            return np.full((1,) * ndim, h, dtype=np.uint64)
        for c in coords:
            h = _fold_arr(h, c)
        if h.ndim < ndim:
            h = h.reshape((1,) * (ndim - h.ndim) + h.shape)
        return h

    def uniform(self, tree, node, slot) -> np.ndarray:
        """Uniforms on the open interval (0, 1)."""
        return ((self.bits(tree, node, slot) >> _S11).astype(np.float64) + 0.5) * _TWO_M53

    def uniforms(self, size: int) -> np.ndarray:
        """``size`` uniforms from the (tree=0, node=0) cell of this stream."""
        return self.uniform(0, 0, np.arange(size))

    def integers(self, high: int, tree, node, slot) -> np.ndarray:
        """Integers uniform on ``[0, high)``."""
        u = self.uniform(tree, node, slot)
        return np.minimum((u * high).astype(np.int64), high - 1)
