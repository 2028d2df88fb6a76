"""Tree functions as finite signed atomic measures.

A tree function satisfies T(x) = mu([0, x]) for a signed measure mu with
finitely many atoms in [0, 1)^p. A leaf indicator of the box [a, b> with
value c contributes c * (-1)^|eps| at every vertex a + eps * (b - a) that
stays off the top faces.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tree import FittedTree, TreeBatch, _check_points

DEFAULT_CELL_BUDGET = 10_000_000


class UnsupportedNorm(ValueError):
    """The exact norm computation does not apply to this object."""


class RefinementBudgetExceeded(UnsupportedNorm):
    """The overlay partition has more cells than the configured budget."""


# --------------------------------------------------------------------------- #
# Ensembles
# --------------------------------------------------------------------------- #


@dataclass(eq=False)
class Ensemble:
    """offset + sum_k coef_k * mean(block_k).

    Each block is a :class:`TreeBatch`; a block of B trees with coefficient c
    stands for the B terms (c / B, tree). Boosting chains use one-tree
    blocks, Euler iterates use one B-tree block per time step.
    """

    p: int
    offset: float = 0.0
    blocks: list[tuple[float, TreeBatch]] = field(default_factory=list)

    def append(self, coef: float, batch: TreeBatch | FittedTree) -> None:
        if isinstance(batch, FittedTree):
            batch = batch.as_batch()
        self.blocks.append((float(coef), batch))

    def prefix(self, k: int) -> "Ensemble":
        return Ensemble(self.p, self.offset, self.blocks[:k])

    @property
    def n_trees(self) -> int:
        return sum(len(b) for _, b in self.blocks)

    @property
    def terms(self):
        for coef, batch in self.blocks:
            w = coef / len(batch)
            for tree in batch:
                yield w, tree

    def predict(self, X) -> np.ndarray:
        X = _check_points(X, self.p)
        out = np.full(X.shape[0], self.offset)
        for coef, batch in self.blocks:
            out = out + coef * batch.mean_predict(X)
        return out

    def __neg__(self) -> "Ensemble":
        return Ensemble(self.p, -self.offset, [(-c, b) for c, b in self.blocks])

    def __sub__(self, other: "Ensemble") -> "Ensemble":
        return Ensemble(self.p, self.offset - other.offset,
                        list(self.blocks) + [(-c, b) for c, b in other.blocks])

    def __add__(self, other: "Ensemble") -> "Ensemble":
        return Ensemble(self.p, self.offset + other.offset, list(self.blocks) + list(other.blocks))

    def to_dict(self) -> dict:
        blocks = []
        for coef, batch in self.blocks:
            blocks.append({"coef": coef, "trees": [t.to_dict() for t in batch]})
        return {"p": self.p, "offset": self.offset, "blocks": blocks}

    @classmethod
    def from_dict(cls, d: dict) -> "Ensemble":
        p = int(d["p"])
        ens = cls(p, float(d["offset"]))
        for blk in d["blocks"]:
            trees = [FittedTree.from_dict(t, p) for t in blk["trees"]]
            ens.append(float(blk["coef"]), TreeBatch.concat([t.as_batch() for t in trees]))
        return ens

    @classmethod
    def constant(cls, p: int, c: float) -> "Ensemble":
        return cls(p, float(c))


# --------------------------------------------------------------------------- #
# Atomic measures
# --------------------------------------------------------------------------- #


def _merge(points: np.ndarray, masses: np.ndarray):
    """Sort atoms lexicographically, sum coincident ones, drop exact zeros."""
    if points.shape[0] == 0:
        return points.reshape(0, points.shape[1]), masses[:0]
    order = np.lexsort(points.T[::-1])
    pts, m = points[order], masses[order]
    new = np.ones(pts.shape[0], dtype=bool)
    new[1:] = np.any(pts[1:] != pts[:-1], axis=1)
    starts = np.flatnonzero(new)
    sums = np.add.reduceat(m, starts)
    # re-add heavily cancelling groups exactly, so that e.g. F - F has no atoms
    scale = np.add.reduceat(np.abs(m), starts)
    shaky = np.flatnonzero(np.abs(sums) <= 64 * np.finfo(np.float64).eps * scale)
    if shaky.size:
        ends = np.append(starts[1:], m.shape[0])
        for g in shaky:
            sums[g] = math.fsum(m[starts[g]:ends[g]])
    keep = sums != 0
    return pts[starts][keep], sums[keep]


@dataclass(frozen=True, eq=False)
class SignedAtomMeasure:
    """Finitely many signed point masses in [0, 1)^p, kept merged and sorted."""

    points: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        m = np.asarray(self.masses, dtype=np.float64).reshape(-1)
        if pts.ndim != 2 or pts.shape[0] != m.shape[0]:
            raise ValueError("points must be (N, p) with one mass per point")
        if np.any(pts < 0) or np.any(pts >= 1):
            raise ValueError("atoms must lie in [0, 1)^p")
        pts, m = _merge(pts, m)
        pts.flags.writeable = False
        m.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "masses", m)

    @classmethod
    def zero(cls, p: int) -> "SignedAtomMeasure":
        return cls(np.zeros((0, p)), np.zeros(0))

    @classmethod
    def from_dict(cls, atoms: dict, p: int | None = None) -> "SignedAtomMeasure":
        if not atoms:
            return cls.zero(p or 1)
        pts = np.array([np.atleast_1d(k) for k in atoms], dtype=np.float64)
        return cls(pts, np.array(list(atoms.values()), dtype=np.float64))

    @property
    def p(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.masses.shape[0]

    def as_dict(self) -> dict:
        return {tuple(float(c) for c in pt): float(m) for pt, m in zip(self.points, self.masses)}

    def __add__(self, other: "SignedAtomMeasure") -> "SignedAtomMeasure":
        return SignedAtomMeasure(np.vstack([self.points, other.points]),
                                 np.concatenate([self.masses, other.masses]))

    def __neg__(self) -> "SignedAtomMeasure":
        return SignedAtomMeasure(self.points, -self.masses)

    def __sub__(self, other: "SignedAtomMeasure") -> "SignedAtomMeasure":
        return self + (-other)

    def evaluate(self, X, chunk: int = 4096) -> np.ndarray:
        """T(x) = sum of the masses of atoms a <= x componentwise."""
        X = _check_points(X, self.p)
        out = np.empty(X.shape[0])
        for s in range(0, X.shape[0], chunk):
            below = np.all(self.points[None, :, :] <= X[s:s + chunk, None, :], axis=2)
            out[s:s + chunk] = below @ self.masses
        return out

    def to_csv(self, path, comment: str | None = None) -> None:
        with Path(path).open("w", newline="") as fh:
            if comment is not None:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"x{j + 1}" for j in range(self.p)] + ["mass"])
            for pt, m in zip(self.points, self.masses):
                w.writerow([repr(float(c)) for c in pt] + [repr(float(m))])


def _vertex_atoms(batch: TreeBatch, weights: np.ndarray):
    """Unmerged atoms of sum_t weights[t] * tree_t, plus their tree index."""
    lo, hi = batch.regions_arrays()
    T, L, p = lo.shape
    eps = np.array(list(itertools.product((0, 1), repeat=p)), dtype=bool)
    sign = np.where(eps.sum(axis=1) % 2 == 0, 1.0, -1.0)
    pts = np.where(eps[None, None], hi[:, :, None, :], lo[:, :, None, :])
    ok = ~np.any(eps[None, None] & (hi[:, :, None, :] >= 1.0), axis=3)
    mass = (batch.value * weights[:, None])[:, :, None] * sign[None, None, :]
    tree = np.broadcast_to(np.arange(T)[:, None, None], ok.shape)
    return pts[ok], mass[ok], tree[ok]


def raw_atoms(obj) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unmerged atoms ``(points, masses, block)`` of a tree or ensemble.

    ``block`` tags each atom with the ensemble block it came from (the
    offset atom gets -1), so prefixes of an ensemble can be selected by mask.
    """
    if isinstance(obj, FittedTree):
        obj = Ensemble(obj.p, 0.0, [(1.0, obj.as_batch())])
    if not isinstance(obj, Ensemble):
        raise TypeError(f"cannot build atoms for {type(obj).__name__}")
    pts = [np.zeros((1, obj.p))]
    masses = [np.array([obj.offset])]
    tags = [np.array([-1])]
    for k, (coef, batch) in enumerate(obj.blocks):
        w = np.full(len(batch), coef / len(batch))
        pt, m, _ = _vertex_atoms(batch, w)
        pts.append(pt)
        masses.append(m)
        tags.append(np.full(m.shape[0], k))
    return np.vstack(pts), np.concatenate(masses), np.concatenate(tags)


def to_measure(obj) -> SignedAtomMeasure:
    """The representing measure of a tree, an ensemble or a constant."""
    if isinstance(obj, SignedAtomMeasure):
        return obj
    if isinstance(obj, (int, float)):
        return SignedAtomMeasure(np.zeros((1, 1)), np.array([float(obj)]))
    pts, m, _ = raw_atoms(obj)
    return SignedAtomMeasure(pts, m)


def tv_norm(obj) -> float:
    return math.fsum(np.abs(to_measure(obj).masses))


def jordan_split(obj) -> tuple[SignedAtomMeasure, SignedAtomMeasure]:
    mu = to_measure(obj)
    pos = mu.masses > 0
    return (SignedAtomMeasure(mu.points[pos], mu.masses[pos]),
            SignedAtomMeasure(mu.points[~pos], -mu.masses[~pos]))


def face_decompose(obj) -> dict[tuple[int, ...], SignedAtomMeasure]:
    """Split the measure by the set J of strictly positive atom coordinates.

    Keys are sorted tuples of 0-based coordinates; every subset is present.
    """
    mu = to_measure(obj)
    support = mu.points > 0
    out = {}
    for r in range(mu.p + 1):
        for J in itertools.combinations(range(mu.p), r):
            mask = np.zeros(mu.p, dtype=bool)
            mask[list(J)] = True
            sel = np.all(support == mask, axis=1)
            out[J] = SignedAtomMeasure(mu.points[sel], mu.masses[sel])
    return out


# --------------------------------------------------------------------------- #
# Norms
# --------------------------------------------------------------------------- #


def _cell_values(points: np.ndarray, masses: np.ndarray, budget: int):
    """Values on the overlay grid spanned by the atoms, plus cell side lengths."""
    p = points.shape[1]
    bps, idx = [], []
    for j in range(p):
        bp = np.unique(np.concatenate([[0.0], points[:, j]]))
        bps.append(bp)
        idx.append(np.searchsorted(bp, points[:, j]))
    size = math.prod(len(b) for b in bps)
    if size > budget:
        raise RefinementBudgetExceeded(f"overlay partition has {size} cells (budget {budget})")
    grid = np.zeros(tuple(len(b) for b in bps))
    np.add.at(grid, tuple(idx), masses)
    for j in range(p):
        grid = np.cumsum(grid, axis=j)
    lengths = [np.diff(np.append(b, 1.0)) for b in bps]
    return grid, lengths


def _nu_squared(mu: SignedAtomMeasure, budget: int) -> float:
    """Exact integral of T^2 against nu = 3^-p sum_{J, eps} Leb_{J, eps}."""
    p = mu.p
    total = []
    for r in range(p + 1):
        for J in itertools.combinations(range(p), r):
            rest = [j for j in range(p) if j not in J]
            for eps in itertools.product((0, 1), repeat=len(rest)):
                sel = np.ones(len(mu), dtype=bool)
                for j, e in zip(rest, eps):
                    if e == 0:
                        sel &= mu.points[:, j] == 0.0
                pts, m = mu.points[sel][:, list(J)], mu.masses[sel]
                if not J:
                    total.append(float(np.sum(m)) ** 2)
                    continue
                if m.size == 0:
                    continue
                grid, lengths = _cell_values(pts, m, budget)
                vol = lengths[0]
                for ln in lengths[1:]:
                    vol = np.multiply.outer(vol, ln)
                total.append(float(np.sum(grid ** 2 * vol)))
    return math.fsum(total) / 3 ** p


def _points_of(weighting) -> np.ndarray | None:
    if weighting is None or (isinstance(weighting, str) and weighting == "nu"):
        return None
    X = getattr(weighting, "X", weighting)
    return np.asarray(X, dtype=np.float64)


def _evaluate(obj, X) -> np.ndarray:
    if isinstance(obj, (FittedTree, Ensemble)):
        return obj.predict(X)
    return to_measure(obj).evaluate(X)


def l2_norm(obj, weighting="nu", budget: int = DEFAULT_CELL_BUDGET) -> float:
    """Exact L2 norm under nu, or under nu_x when ``weighting`` is a dataset.

    nu_x = nu / 2 + (1 / 2n) sum_i delta_{x_i}. Only p <= 3 is supported.
    """
    mu = to_measure(obj)
    if mu.p > 3:
        raise UnsupportedNorm(f"exact L2 norm needs p <= 3 (got p={mu.p}); use l2_norm_quadrature")
    sq = _nu_squared(mu, budget)
    X = _points_of(weighting)
    if X is not None:
        vals = _evaluate(obj, X)
        sq = 0.5 * sq + 0.5 * float(np.mean(vals ** 2))
    return math.sqrt(max(sq, 0.0))


def l2_norm_quadrature(obj, weighting="nu", n_points: int = 200_000, seed: int = 0) -> float:
    """Monte-Carlo estimate of the nu (or nu_x) L2 norm for any p."""
    mu = to_measure(obj)
    p = mu.p
    gen = np.random.default_rng(seed)
    # a point of nu: each coordinate is 0, 1 or uniform with probability 1/3
    kind = gen.integers(0, 3, size=(n_points, p))
    X = np.where(kind == 0, 0.0, np.where(kind == 1, 1.0, gen.uniform(size=(n_points, p))))
    sq = float(np.mean(_evaluate(obj, X) ** 2))
    pts = _points_of(weighting)
    if pts is not None:
        sq = 0.5 * sq + 0.5 * float(np.mean(_evaluate(obj, pts) ** 2))
    return math.sqrt(sq)


def sup_norm(obj, budget: int = DEFAULT_CELL_BUDGET) -> float:
    """Exact sup over [0, 1]^p from the common refinement of all partitions."""
    if isinstance(obj, FittedTree):
        return float(np.max(np.abs(obj.value)))
    mu = to_measure(obj)
    if len(mu) == 0:
        return 0.0
    grid, _ = _cell_values(mu.points, mu.masses, budget)
    return float(np.max(np.abs(grid)))


def sup_norm_grid(obj, points_per_axis: int = 1001) -> float:
    """Lower bound on the sup norm from a regular grid including both ends."""
    p = to_measure(obj).p if not isinstance(obj, (FittedTree, Ensemble)) else obj.p
    axis = np.linspace(0.0, 1.0, points_per_axis)
    X = np.stack(np.meshgrid(*([axis] * p), indexing="ij"), axis=-1).reshape(-1, p)
    return float(np.max(np.abs(_evaluate(obj, X))))


# --------------------------------------------------------------------------- #
# One-dimensional step functions (fast inner products for long trajectories)
# --------------------------------------------------------------------------- #


class StepFunction1D:
    """T(x) = sum_{a <= x} mass(a) on [0, 1] from sorted, possibly repeated atoms."""

    def __init__(self, pos: np.ndarray, mass: np.ndarray, presorted: bool = False):
        pos = np.asarray(pos, dtype=np.float64).reshape(-1)
        mass = np.asarray(mass, dtype=np.float64).reshape(-1)
        if not presorted:
            order = np.argsort(pos, kind="stable")
            pos, mass = pos[order], mass[order]
        self.pos = pos
        self.cum_mass = np.cumsum(mass)
        self.cum_moment = np.cumsum(mass * pos)

    def _prefix(self, arr, q):
        i = np.searchsorted(self.pos, q, side="right")
        return np.where(i > 0, arr[np.maximum(i - 1, 0)], 0.0)

    def __call__(self, q) -> np.ndarray:
        return self._prefix(self.cum_mass, np.asarray(q, dtype=np.float64))

    def antiderivative(self, q) -> np.ndarray:
        """int_0^q T(s) ds."""
        q = np.asarray(q, dtype=np.float64)
        return q * self._prefix(self.cum_mass, q) - self._prefix(self.cum_moment, q)

    def cells(self) -> tuple[np.ndarray, np.ndarray]:
        """Cell lengths and values of the partition induced by the atoms."""
        edges = np.concatenate([self.pos, [1.0]])
        lengths = np.concatenate([[self.pos[0]] if self.pos.size else [1.0], np.diff(edges)])
        values = np.concatenate([[0.0], self.cum_mass])
        return lengths, values

    def lebesgue_sq(self) -> float:
        lengths, values = self.cells()
        return float(np.sum(values ** 2 * lengths))

    def lebesgue_inner(self, other: "StepFunction1D") -> float:
        """int_0^1 self * other, integrating ``other`` exactly over self's cells."""
        lengths, values = self.cells()
        edges = np.concatenate([[0.0], self.pos, [1.0]])
        A = other.antiderivative(edges)
        return float(np.sum(values * np.diff(A)))


def nu_distance_sq_1d(F: StepFunction1D, G: StepFunction1D, G_sq: float | None = None) -> float:
    """||F - G||^2 under nu for p = 1, via inner products (F small, G large).

    ``G_sq`` may pass a precomputed ``G.lebesgue_sq()``.
    """
    ends = np.array([0.0, 1.0])
    dF, dG = F(ends), G(ends)
    G_sq = G.lebesgue_sq() if G_sq is None else G_sq
    leb = F.lebesgue_sq() - 2.0 * F.lebesgue_inner(G) + G_sq
    return (float(np.sum((dF - dG) ** 2)) + max(leb, 0.0)) / 3.0
