"""Softmax regression trees and softmax gradient trees of fixed depth.

Trees are stored in heap order: the internal node at level ``l`` with
level-local index ``v`` has heap index ``2**l - 1 + v`` and binary word
``format(v, f"0{l}b")``. A point goes to child 0 when ``x[j] < tau`` and to
child 1 otherwise, so leaf regions are half-open except on the top faces.

Growth is vectorized over a batch of trees. Each tree draws its candidates
from the stream cells ``(tree, node, slot)``: slot ``2k`` picks the
coordinate of candidate ``k``, slot ``2k + 1`` its relative position and
slot ``2K`` the uniform used for the softmax draw. A tree's draws therefore
do not depend on which batch it was grown in.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Config, Dataset, get_loss
from .rng import RngStream

_MAX_BATCH_ELEMS = 4_000_000


# --------------------------------------------------------------------------- #
# Regions and split scores
# --------------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class Region:
    """Axis-aligned box, half-open except where ``hi == 1``."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64).reshape(-1)
        hi = np.asarray(self.hi, dtype=np.float64).reshape(-1)
        if lo.shape != hi.shape or np.any(lo < 0) or np.any(hi > 1) or np.any(lo >= hi):
            raise ValueError("region needs 0 <= lo < hi <= 1 coordinatewise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def unit(cls, p: int) -> "Region":
        return cls(np.zeros(p), np.ones(p))

    @property
    def p(self) -> int:
        return self.lo.shape[0]

    def contains(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        upper = (X < self.hi) | ((self.hi == 1.0) & (X <= 1.0))
        return np.all((X >= self.lo) & upper, axis=1)

    def threshold(self, j: int, u: float) -> float:
        return float(self.lo[j] + u * (self.hi[j] - self.lo[j]))

    def split(self, j: int, tau: float) -> tuple["Region", "Region"]:
        hi0 = self.hi.copy()
        hi0[j] = tau
        lo1 = self.lo.copy()
        lo1[j] = tau
        return Region(self.lo, hi0), Region(lo1, self.hi)


def region_mse(region: Region, dataset: Dataset, values) -> float:
    """(1/n) sum over the region of (v_i - mean)^2, normalized by the global n."""
    values = np.asarray(values, dtype=np.float64)
    inside = region.contains(dataset.X)
    if inside.sum() <= 1:
        return 0.0
    v = values[inside]
    return float(np.sum((v - v.mean()) ** 2) / dataset.n)


def split_score(j: int, u: float, region: Region, dataset: Dataset, values) -> float:
    """Globally normalized mse decrease of splitting ``region`` at (j, u)."""
    values = np.asarray(values, dtype=np.float64)
    inside = region.contains(dataset.X)
    tau = region.threshold(j, u)
    right = dataset.X[:, j] >= tau
    n_all = int(inside.sum())
    if n_all == 0:
        return 0.0
    mean = values[inside].mean()
    score = 0.0
    for part in (inside & ~right, inside & right):
        k = int(part.sum())
        if k:
            score += k / dataset.n * (values[part].mean() - mean) ** 2
    return float(score)


# --------------------------------------------------------------------------- #
# Softmax selection
# --------------------------------------------------------------------------- #


def softmax_probabilities(scores, beta: float) -> np.ndarray:
    z = np.asarray(scores, dtype=np.float64)
    if math.isinf(beta):
        out = np.zeros_like(z)
        np.put_along_axis(out, np.argmax(z, axis=-1)[..., None], 1.0, axis=-1)
        return out
    w = np.exp(beta * (z - z.max(axis=-1, keepdims=True)))
    return w / w.sum(axis=-1, keepdims=True)


def _select(scores: np.ndarray, beta: float, gamma: np.ndarray) -> np.ndarray:
    """Inverse-CDF softmax draw along the last axis using uniforms ``gamma``."""
    if math.isinf(beta):
        return scores.argmax(axis=-1)
    if beta == 0.0:
        w = np.ones_like(scores)
    else:
        w = np.exp(beta * (scores - scores.max(axis=-1, keepdims=True)))
    c = w.cumsum(axis=-1)
    hit = c > (gamma * c[..., -1])[..., None]
    # gamma < 1 guarantees a hit at the last index at the latest
    return hit.argmax(axis=-1)


def softmax_select(scores, beta: float, rng: RngStream) -> int:
    """Draw an index with probability proportional to exp(beta * score).

    ``beta = inf`` returns the first maximizer.
    """
    z = np.asarray(scores, dtype=np.float64).reshape(-1)
    if z.size < 1:
        raise ValueError("need at least one score")
    gamma = rng.uniform(0, 0, 0)
    return int(_select(z[None, :], float(beta), np.atleast_1d(gamma))[0])


# --------------------------------------------------------------------------- #
# Tree containers
# --------------------------------------------------------------------------- #


def _word(level: int, v: int) -> str:
    return format(v, f"0{level}b") if level else ""


def _heap_index(word: str) -> int:
    level = len(word)
    return (1 << level) - 1 + (int(word, 2) if word else 0)


def _leaf_regions(feature: np.ndarray, threshold: np.ndarray, depth: int, p: int):
    """Leaf boxes for a batch: ``lo, hi`` of shape (T, 2**depth, p)."""
    T = feature.shape[0]
    lo = np.zeros((T, 1, p))
    hi = np.ones((T, 1, p))
    for level in range(depth):
        sl = slice((1 << level) - 1, (1 << (level + 1)) - 1)
        j = feature[:, sl][:, :, None]
        tau = threshold[:, sl][:, :, None]
        lo2 = np.repeat(lo, 2, axis=1)
        hi2 = np.repeat(hi, 2, axis=1)
        np.put_along_axis(hi2[:, 0::2, :], j, tau, axis=2)
        np.put_along_axis(lo2[:, 1::2, :], j, tau, axis=2)
        lo, hi = lo2, hi2
    return lo, hi


def _route(feature: np.ndarray, threshold: np.ndarray, depth: int, X: np.ndarray) -> np.ndarray:
    """Leaf index of every point in every tree, shape (T, m)."""
    T, m = feature.shape[0], X.shape[0]
    node = np.zeros((T, m), dtype=np.int64)
    cols = np.arange(m)[None, :]
    for level in range(depth):
        h = node + ((1 << level) - 1)
        f = np.take_along_axis(feature, h, axis=1)
        t = np.take_along_axis(threshold, h, axis=1)
        node = 2 * node + (X[cols, f] >= t)
    return node


def _check_points(X, p: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    X = X.reshape(1, -1) if X.ndim <= 1 else X
    if X.shape[1] != p:
        raise ValueError(f"expected points with {p} coordinates, got {X.shape[1]}")
    if np.any(X < 0) or np.any(X > 1) or not np.all(np.isfinite(X)):
        raise ValueError("points must lie in [0, 1]^p")
    return X


@dataclass(frozen=True, eq=False)
class FittedTree:
    """A depth-d splitting structure with absolute thresholds.

    ``feature`` and ``threshold`` have length ``2**depth - 1`` (heap order),
    ``value`` has length ``2**depth`` or is None for a bare partition.
    Coordinates are 0-based here and 1-based in JSON.
    """

    depth: int
    p: int
    feature: np.ndarray
    threshold: np.ndarray
    value: np.ndarray | None = None

    def __post_init__(self):
        feature = np.asarray(self.feature, dtype=np.int64).reshape(-1)
        threshold = np.asarray(self.threshold, dtype=np.float64).reshape(-1)
        n_int = (1 << self.depth) - 1
        if feature.shape[0] != n_int or threshold.shape[0] != n_int:
            raise ValueError(f"depth {self.depth} needs {n_int} internal nodes")
        if np.any(feature < 0) or np.any(feature >= self.p):
            raise ValueError("split coordinate out of range")
        object.__setattr__(self, "feature", feature)
        object.__setattr__(self, "threshold", threshold)
        if self.value is not None:
            value = np.asarray(self.value, dtype=np.float64).reshape(-1)
            if value.shape[0] != 1 << self.depth:
                raise ValueError(f"depth {self.depth} needs {1 << self.depth} leaf values")
            object.__setattr__(self, "value", value)
        lo, hi = self.regions_arrays()
        if np.any(lo >= hi):
            raise ValueError("every threshold must lie strictly inside its node's region")

    @property
    def n_leaves(self) -> int:
        return 1 << self.depth

    def regions_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = _leaf_regions(self.feature[None], self.threshold[None], self.depth, self.p)
        return lo[0], hi[0]

    def leaf_regions(self) -> list[Region]:
        lo, hi = self.regions_arrays()
        return [Region(a, b) for a, b in zip(lo, hi)]

    def leaf_index(self, X) -> np.ndarray:
        X = _check_points(X, self.p)
        return _route(self.feature[None], self.threshold[None], self.depth, X)[0]

    def predict(self, X) -> np.ndarray:
        if self.value is None:
            raise ValueError("tree has no leaf values")
        return self.value[self.leaf_index(X)]

    def with_values(self, value) -> "FittedTree":
        return FittedTree(self.depth, self.p, self.feature, self.threshold, value)

    def as_batch(self) -> "TreeBatch":
        value = self.value if self.value is not None else np.zeros(self.n_leaves)
        return TreeBatch(self.depth, self.p, self.feature[None], self.threshold[None], value[None])

    def to_dict(self) -> dict:
        nodes = []
        for level in range(self.depth):
            for v in range(1 << level):
                h = (1 << level) - 1 + v
                nodes.append({"word": _word(level, v), "j": int(self.feature[h]) + 1,
                              "tau": float(self.threshold[h])})
        leaves = []
        if self.value is not None:
            leaves = [{"word": _word(self.depth, v), "value": float(c)} for v, c in enumerate(self.value)]
        return {"depth": self.depth, "p": self.p, "nodes": nodes, "leaves": leaves}

    @classmethod
    def from_dict(cls, d: dict, p: int | None = None) -> "FittedTree":
        depth = int(d["depth"])
        n_int = (1 << depth) - 1
        feature = np.zeros(n_int, dtype=np.int64)
        threshold = np.zeros(n_int)
        seen = set()
        for node in d["nodes"]:
            h = _heap_index(node["word"])
            feature[h] = int(node["j"]) - 1
            threshold[h] = float(node["tau"])
            seen.add(h)
        if len(seen) != n_int:
            raise ValueError("tree JSON is missing internal nodes")
        value = None
        if d.get("leaves"):
            value = np.zeros(1 << depth)
            for leaf in d["leaves"]:
                value[int(leaf["word"], 2) if leaf["word"] else 0] = float(leaf["value"])
        p = int(d.get("p", p if p is not None else feature.max() + 1))
        return cls(depth, p, feature, threshold, value)


@dataclass(frozen=True, eq=False)
class TreeBatch:
    """T trees of equal depth stored as arrays of shape (T, ...)."""

    depth: int
    p: int
    feature: np.ndarray
    threshold: np.ndarray
    value: np.ndarray

    def __len__(self) -> int:
        return self.feature.shape[0]

    def tree(self, i: int) -> FittedTree:
        return FittedTree(self.depth, self.p, self.feature[i], self.threshold[i], self.value[i])

    def __iter__(self):
        return (self.tree(i) for i in range(len(self)))

    def predict(self, X) -> np.ndarray:
        """Per-tree predictions, shape (T, m)."""
        X = _check_points(X, self.p)
        return np.take_along_axis(self.value, _route(self.feature, self.threshold, self.depth, X), axis=1)

    def mean_predict(self, X) -> np.ndarray:
        if len(self) == 1:
            return self.predict(X)[0]
        return self.predict(X).mean(axis=0)

    def regions_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return _leaf_regions(self.feature, self.threshold, self.depth, self.p)

    @classmethod
    def concat(cls, batches: list["TreeBatch"]) -> "TreeBatch":
        b0 = batches[0]
        return cls(b0.depth, b0.p,
                   np.concatenate([b.feature for b in batches]),
                   np.concatenate([b.threshold for b in batches]),
                   np.concatenate([b.value for b in batches]))


# --------------------------------------------------------------------------- #
# Growth
# --------------------------------------------------------------------------- #


def draw_candidates(rng: RngStream, tree_ids, node_ids, K: int, p: int):
    """Candidate coordinates, relative positions and selection uniforms.

    Returns ``(j, u, gamma)`` of shapes (T, N, K), (T, N, K) and (T, N) for
    tree ids of shape (T,) and heap node ids of shape (N,).
    """
    t = np.asarray(tree_ids, dtype=np.int64)[:, None, None]
    v = np.asarray(node_ids, dtype=np.int64)[None, :, None]
    w = rng.uniform(t, v, np.arange(2 * K + 1, dtype=np.int64)[None, None, :])
    j = np.minimum((w[:, :, 0:2 * K:2] * p).astype(np.int64), p - 1)
    return j, w[:, :, 1:2 * K:2], w[:, :, 2 * K]


def _scores(X, values, node, N, j, tau, rows):
    """Split scores of every candidate, shape (T, N, K)."""
    T, n = node.shape
    K = j.shape[2]
    jp = j[rows, node]
    tp = tau[rows, node]
    right = X[np.arange(n)[None, :, None], jp] >= tp
    cell = rows * N + node
    flat = (cell[:, :, None] * K + np.arange(K)).ravel()
    size = T * N * K
    s1 = np.bincount(flat, weights=(right * values[:, None]).ravel(), minlength=size)
    c1 = np.bincount(flat, weights=right.ravel(), minlength=size)
    cflat = cell.ravel()
    s = np.bincount(cflat, weights=values if T == 1 else np.tile(values, T), minlength=T * N)
    c = np.bincount(cflat, minlength=T * N).astype(np.float64)
    s1, c1 = s1.reshape(T, N, K), c1.reshape(T, N, K)
    s, c = s.reshape(T, N, 1), c.reshape(T, N, 1)
    s0, c0 = s - s1, c - c1
    with np.errstate(invalid="ignore", divide="ignore"):
        m = np.where(c > 0, s / c, 0.0)
        m0 = np.where(c0 > 0, s0 / c0, m)
        m1 = np.where(c1 > 0, s1 / c1, m)
    return (c0 / n) * (m0 - m) ** 2 + (c1 / n) * (m1 - m) ** 2


def _root_table(X, values, order=None):
    """Per-coordinate sorted abscissae and prefix sums of ``values``."""
    if order is None:
        order = np.argsort(X, axis=0, kind="stable")
    xs = X[order, np.arange(X.shape[1])].T
    cs = np.zeros((X.shape[1], X.shape[0] + 1))
    np.cumsum(values[order].T, axis=1, out=cs[:, 1:])
    return xs, cs


def _root_scores(table, n, j, tau):
    """Split scores at the root, where every tree holds all n samples."""
    xs, cs = table
    if j.size * n <= 4096:
        # direct counts are cheaper than per-coordinate searches when small
        c0 = np.count_nonzero(xs[j] < tau[..., None], axis=-1)
    else:
        c0 = np.empty(j.shape, dtype=np.int64)
        for q in range(xs.shape[0]):
            sel = j == q
            c0[sel] = np.searchsorted(xs[q], tau[sel], side="left")
    s0 = cs[j, c0]
    s = cs[0, -1]
    c1, s1 = n - c0, s - s0
    m = s / n
    with np.errstate(invalid="ignore", divide="ignore"):
        m0 = np.where(c0 > 0, s0 / c0, m)
        m1 = np.where(c1 > 0, s1 / c1, m)
    return (c0 / n) * (m0 - m) ** 2 + (c1 / n) * (m1 - m) ** 2


def _grow_chunk(X, values, g, h, depth, K, beta, rng, tree_ids, table=None):
    T, n, p = tree_ids.shape[0], X.shape[0], X.shape[1]
    n_int = (1 << depth) - 1
    j_all, u_all, gamma_all = draw_candidates(rng, tree_ids, np.arange(n_int), K, p)
    feature = np.empty((T, n_int), dtype=np.int64)
    threshold = np.empty((T, n_int))
    node = np.zeros((T, n), dtype=np.int64)
    lo = hi = None
    rows = np.arange(T)[:, None]
    cols = np.arange(n)[None, :]
    for level in range(depth):
        N = 1 << level
        sl = slice(N - 1, 2 * N - 1)
        j, u, gamma = j_all[:, sl], u_all[:, sl], gamma_all[:, sl]
        cN = np.arange(N)[None, :]
        if level == 0:
            tau = u  # the root region is the unit cube
        else:
            r3, c3 = rows[:, :, None], cN[:, :, None]
            a = lo[r3, c3, j]
            b = hi[r3, c3, j]
            tau = a + u * (b - a)
        if K == 1:
            pick = np.zeros((T, N), dtype=np.int64)
        elif beta == 0.0:
            pick = _select(np.zeros((T, N, K)), 0.0, gamma)
        elif level == 0:
            table = _root_table(X, values) if table is None else table
            pick = _select(_root_scores(table, n, j, tau), beta, gamma)
        else:
            pick = _select(_scores(X, values, node, N, j, tau, rows), beta, gamma)
        js = j[rows, cN, pick]
        ts = tau[rows, cN, pick]
        feature[:, sl] = js
        threshold[:, sl] = ts
        node = 2 * node + (X[cols, js[rows, node]] >= ts[rows, node])
        if level + 1 < depth:
            if lo is None:
                lo, hi = np.zeros((T, 1, p)), np.ones((T, 1, p))
            lo2 = np.repeat(lo, 2, axis=1)
            hi2 = np.repeat(hi, 2, axis=1)
            hi2[rows, 2 * cN, js] = ts
            lo2[rows, 2 * cN + 1, js] = ts
            lo, hi = lo2, hi2
    L = 1 << depth
    cell = (rows * L + node).ravel()
    gw, hw = (g, h) if T == 1 else (np.tile(g, T), np.tile(h, T))
    G = np.bincount(cell, weights=gw, minlength=T * L).reshape(T, L)
    H = np.bincount(cell, weights=hw, minlength=T * L).reshape(T, L)
    value = np.zeros((T, L))
    np.divide(-G, H, out=value, where=H > 0)
    value += 0.0  # no negative zeros
    return feature, threshold, value, node


def grow_trees(X, values, g, h, config: Config, rng: RngStream, tree_ids,
               chunk: int | None = None, executor=None, order=None) -> tuple[TreeBatch, np.ndarray]:
    """Grow a batch of softmax trees and set Newton leaf values -sum(g)/sum(h).

    The partition is grown on ``values``; ``g`` and ``h`` are the per-sample
    first and second loss derivatives used for the leaf values. Returns the
    batch and the leaf index of every sample in every tree, shape (T, n).

    Trees are processed in fixed-size chunks (so results never depend on
    ``executor``); chunks may run concurrently on ``executor``. ``order`` is
    an optional precomputed ``Dataset.sort_order``.
    """
    X = np.asarray(X, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    tree_ids = np.atleast_1d(np.asarray(tree_ids, dtype=np.int64))
    n = X.shape[0]
    if chunk is None:
        chunk = max(1, _MAX_BATCH_ELEMS // (n * config.K * (1 << (config.depth - 1))))
    parts = [tree_ids[i:i + chunk] for i in range(0, tree_ids.shape[0], chunk)]

    table = _root_table(X, values, order) if config.K > 1 and config.beta != 0.0 else None

    def work(ids):
        return _grow_chunk(X, values, g, h, config.depth, config.K, config.beta, rng, ids, table)

    if executor is None or len(parts) == 1:
        results = [work(ids) for ids in parts]
    else:
        results = list(executor.map(work, parts))
    if len(results) == 1:
        feature, threshold, value, node = results[0]
    else:
        feature, threshold, value, node = (np.concatenate(r) for r in zip(*results))
    return TreeBatch(config.depth, X.shape[1], feature, threshold, value), node


def grow_partition(dataset: Dataset, values, config: Config, rng: RngStream, tree: int = 0) -> FittedTree:
    """Softmax splitting structure grown on ``values`` (no leaf values)."""
    values = np.asarray(values, dtype=np.float64)
    batch, _ = grow_trees(dataset.X, values, -values, np.ones_like(values), config, rng, [tree])
    return FittedTree(batch.depth, batch.p, batch.feature[0], batch.threshold[0])


def fit_leaf_values(structure: FittedTree, dataset: Dataset, g, h) -> FittedTree:
    """Leaf values -sum(g)/sum(h) on a fixed structure; empty leaves get 0."""
    leaf = structure.leaf_index(dataset.X)
    L = structure.n_leaves
    G = np.bincount(leaf, weights=np.asarray(g, dtype=np.float64), minlength=L)
    H = np.bincount(leaf, weights=np.asarray(h, dtype=np.float64), minlength=L)
    value = np.zeros(L)
    np.divide(-G, H, out=value, where=H > 0)
    return structure.with_values(value + 0.0)


def fit_means(structure: FittedTree, dataset: Dataset, values) -> FittedTree:
    """Leaf means of ``values`` on a fixed structure; empty leaves get 0."""
    values = np.asarray(values, dtype=np.float64)
    return fit_leaf_values(structure, dataset, -values, np.ones_like(values))


def fit_regression_tree(dataset: Dataset, values, config: Config, rng: RngStream, tree: int = 0) -> FittedTree:
    """Softmax regression tree: grown on ``values`` with leaf means."""
    values = np.asarray(values, dtype=np.float64)
    batch, _ = grow_trees(dataset.X, values, -values, np.ones_like(values), config, rng, [tree])
    return batch.tree(0)


def gradient_stats(y, F_values, loss) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Residuals -d1, first and second derivatives at the current fit."""
    loss = get_loss(loss)
    g = np.asarray(loss.d1(y, F_values), dtype=np.float64)
    h = np.asarray(loss.d2(y, F_values), dtype=np.float64)
    return -g, g, np.ascontiguousarray(h)


def fit_gradient_tree(dataset: Dataset, F_values, loss, config: Config, rng: RngStream, tree: int = 0) -> FittedTree:
    """Softmax gradient tree at the fit ``F_values``.

    The partition is grown on the residuals; leaves carry the one-step
    Newton value -sum d1 / sum d2 over their samples.
    """
    r, g, h = gradient_stats(dataset.y, F_values, loss)
    batch, _ = grow_trees(dataset.X, r, g, h, config, rng, [tree])
    return batch.tree(0)


def scheme_thresholds(depth: int, p: int, feature, u) -> np.ndarray:
    """Absolute thresholds of a splitting scheme given relative positions."""
    feature = np.asarray(feature, dtype=np.int64)
    u = np.asarray(u, dtype=np.float64)
    threshold = np.zeros_like(u)
    lo = np.zeros((1, p))
    hi = np.ones((1, p))
    for level in range(depth):
        N = 1 << level
        sl = slice(N - 1, 2 * N - 1)
        j = feature[sl]
        a, b = lo[np.arange(N), j], hi[np.arange(N), j]
        threshold[sl] = a + u[sl] * (b - a)
        lo2, hi2 = np.repeat(lo, 2, axis=0), np.repeat(hi, 2, axis=0)
        hi2[2 * np.arange(N), j] = threshold[sl]
        lo2[2 * np.arange(N) + 1, j] = threshold[sl]
        lo, hi = lo2, hi2
    return threshold
