"""The infinitesimal boosting operator and the Euler scheme for its ODE.

The operator maps a fit F to the expected softmax gradient tree at F. It is
estimated by averaging B independent trees; for p = 1, d = 1 and uniform
selection it also has a closed form used as an oracle.

Euler step k draws its B trees from ``RngStream(seed).child(k)`` at tree
indices 0..B-1, the same cells a boosting chain uses at step k. With B = 1
and h = lambda the Euler iterates therefore coincide with the chain.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boosting import boost_init, run_chain
from .core import Config, Dataset, get_loss, training_error
from .measure import (
    Ensemble,
    RefinementBudgetExceeded,
    StepFunction1D,
    l2_norm,
    nu_distance_sq_1d,
    raw_atoms,
    sup_norm,
    sup_norm_grid,
)
from .rng import RngStream
from .tree import gradient_stats, grow_trees


class UnsupportedOperator(ValueError):
    """The closed-form operator only covers p = 1, d = 1, beta = 0."""


# --------------------------------------------------------------------------- #
# Operator estimates
# --------------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class OperatorEstimate:
    """Mean of B gradient trees.

    ``mean_tree`` is an ensemble with a single B-tree block of coefficient 1.
    ``standard_error`` is the Monte-Carlo standard error at each sample point
    (zero when B = 1, where it cannot be estimated).
    """

    mean_tree: Ensemble
    B: int
    standard_error: np.ndarray
    values_at_samples: np.ndarray

    def __call__(self, X) -> np.ndarray:
        return self.mean_tree.predict(X)


def _estimate(F_values, dataset: Dataset, config: Config, B: int, rng: RngStream, executor=None):
    r, g, h = gradient_stats(dataset.y, F_values, config.loss_fn)
    batch, leaf = grow_trees(dataset.X, r, g, h, config, rng, np.arange(B), executor=executor,
                              order=dataset.sort_order)
    per_tree = np.take_along_axis(batch.value, leaf, axis=1)
    if B == 1:
        mean = per_tree[0]
        se = np.zeros_like(mean)
    else:
        mean = per_tree.mean(axis=0)
        se = per_tree.std(axis=0, ddof=1) / math.sqrt(B)
    return batch, mean, se


def estimate_operator(F_values, dataset: Dataset, config: Config, B: int,
                      rng: RngStream | None = None, executor=None) -> OperatorEstimate:
    """Average B independent softmax gradient trees grown at ``F_values``.

    ``rng`` is the stream of one time step; tree b uses tree index b in it.
    """
    if int(B) < 1:
        raise ValueError("B must be >= 1")
    F_values = np.asarray(F_values, dtype=np.float64).reshape(-1)
    if F_values.shape[0] != dataset.n:
        raise ValueError(f"expected {dataset.n} fitted values, got {F_values.shape[0]}")
    config.loss_fn.check(dataset.y)
    rng = RngStream(config.seed).child(0) if rng is None else rng
    batch, mean, se = _estimate(F_values, dataset, config, int(B), rng, executor)
    return OperatorEstimate(Ensemble(dataset.p, 0.0, [(1.0, batch)]), int(B), se, mean)


def exact_operator_1d(F_values, dataset: Dataset, loss, config: Config | None = None) -> np.ndarray:
    """Closed-form operator at the sample points for uniform stumps on [0, 1].

    The threshold is uniform on (0, 1). Between consecutive distinct sample
    abscissae the two leaves hold fixed sets of points, so the expectation
    is a finite sum of gap length times the Newton leaf value.
    """
    if dataset.p != 1:
        raise UnsupportedOperator(f"closed form needs p = 1, got p = {dataset.p}")
    if config is not None and (config.depth != 1 or config.beta != 0.0):
        raise UnsupportedOperator("closed form needs depth 1 and beta 0")
    loss = get_loss(loss)
    loss.check(dataset.y)
    F_values = np.asarray(F_values, dtype=np.float64).reshape(-1)
    _, g, h = gradient_stats(dataset.y, F_values, loss)
    x = dataset.X[:, 0]
    z, group = np.unique(x, return_inverse=True)
    m = z.shape[0]
    Gz = np.bincount(group, weights=g, minlength=m)
    Hz = np.bincount(group, weights=h, minlength=m)
    # split k (k = 1..m-1) puts groups < k left and the rest right
    GL, HL = np.cumsum(Gz)[:-1], np.cumsum(Hz)[:-1]
    GR, HR = Gz.sum() - GL, Hz.sum() - HL
    gap = np.diff(z)
    whole = -Gz.sum() / Hz.sum()
    # thresholds below z[0] or above z[-1] keep every point in one leaf
    out = np.full(m, whole * (z[0] + (1.0 - z[-1])))
    left_val = np.where(HL > 0, -GL / np.where(HL > 0, HL, 1.0), 0.0)
    right_val = np.where(HR > 0, -GR / np.where(HR > 0, HR, 1.0), 0.0)
    w_left = gap * left_val
    w_right = gap * right_val
    # group q is left for splits k > q and right for splits k <= q
    left_contrib = np.concatenate([np.cumsum(w_left[::-1])[::-1], [0.0]])
    right_contrib = np.concatenate([[0.0], np.cumsum(w_right)])
    out += left_contrib + right_contrib
    return out[group]


# --------------------------------------------------------------------------- #
# Euler integration
# --------------------------------------------------------------------------- #


@dataclass(eq=False)
class OdeTrajectory:
    """Euler iterates F_k at times k * h; ``ensemble.prefix(k)`` is F_k."""

    h: float
    B: int
    ensemble: Ensemble
    times: list[float] = field(default_factory=list)
    fitted: list[np.ndarray] = field(default_factory=list)
    train_error: list[float] = field(default_factory=list)
    mean_residual: list[float] = field(default_factory=list)
    max_residual: list[float] = field(default_factory=list)
    max_standard_error: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.times)

    def iterate(self, k: int) -> Ensemble:
        return self.ensemble.prefix(k)

    @property
    def final(self) -> Ensemble:
        return self.ensemble

    def to_csv(self, path, comment: str | None = None) -> None:
        with Path(path).open("w", newline="") as fh:
            if comment is not None:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "t", "train_error", "mean_residual", "max_residual", "max_standard_error"])
            for k in range(len(self)):
                w.writerow([k, repr(self.times[k]), repr(self.train_error[k]), repr(self.mean_residual[k]),
                            repr(self.max_residual[k]), repr(self.max_standard_error[k])])


def euler_integrate(dataset: Dataset, config: Config, t_end: float, h: float, B: int,
                    rng: RngStream | None = None, init: float | None = None,
                    executor=None) -> OdeTrajectory:
    """Explicit Euler for F' = T(F) with a B-tree Monte-Carlo drift.

    Runs round(t_end / h) steps from the constant start (``init`` overrides
    the loss minimizer). ``max_standard_error[k]`` is the largest standard
    error of the drift used to leave time k, and is 0 at the last time.
    """
    if not h > 0:
        raise ValueError("h must be > 0")
    if not t_end >= 0:
        raise ValueError("t_end must be >= 0")
    if int(B) < 1:
        raise ValueError("B must be >= 1")
    loss = config.loss_fn
    loss.check(dataset.y)
    rng = RngStream(config.seed) if rng is None else rng
    if init is None:
        state = boost_init(dataset, config)
        ens, F = state.ensemble, state.fitted_values
    else:
        ens, F = Ensemble.constant(dataset.p, float(init)), np.full(dataset.n, float(init))
    ens = Ensemble(ens.p, ens.offset, list(ens.blocks))
    M = int(round(t_end / h))
    traj = OdeTrajectory(float(h), int(B), ens)

    def observe(k: int, F: np.ndarray) -> None:
        d1 = loss.d1(dataset.y, F)
        traj.times.append(k * h)
        traj.fitted.append(F)
        traj.train_error.append(training_error(loss, dataset.y, F))
        traj.mean_residual.append(float(np.mean(-d1)))
        traj.max_residual.append(float(np.max(np.abs(d1))))

    observe(0, F)
    for k in range(M):
        batch, mean, se = _estimate(F, dataset, config, int(B), rng.child(k), executor)
        F = F + h * mean
        if not np.all(np.isfinite(F)):
            raise FloatingPointError(f"Euler step {k + 1}: non-finite fitted values")
        ens.blocks.append((float(h), batch))
        traj.max_standard_error.append(float(np.max(se)))
        observe(k + 1, F)
    traj.max_standard_error.append(0.0)
    return traj


# --------------------------------------------------------------------------- #
# Diagnostics
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class LongTimeReport:
    times: list[float]
    train_error: list[float]
    max_residual: list[float]
    increases: list[int]

    @property
    def monotone(self) -> bool:
        return not self.increases

    def relative_final(self) -> tuple[float, float]:
        """Final max residual and training error relative to their start."""
        def rel(a):
            return a[-1] / a[0] if a[0] > 0 else 0.0
        return rel(self.max_residual), rel(self.train_error)


def long_time_diagnostics(traj: OdeTrajectory) -> LongTimeReport:
    """Training error and max |d1| per time, flagging increases of the loss.

    An increase from time k to k + 1 is flagged when it exceeds
    5 * h * (largest drift standard error at step k).
    """
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    L = traj.train_error
    flags = []
    for k in range(len(L) - 1):
        tol = 5.0 * traj.h * traj.max_standard_error[k]
        if L[k + 1] - L[k] > tol:
            flags.append(k + 1)
    return LongTimeReport(list(traj.times), list(L), list(traj.max_residual), flags)


@dataclass(frozen=True)
class LipschitzReport:
    sup_differences: list[float]
    input_differences: list[float]
    standard_errors: list[float]
    constant: float


def lipschitz_diagnostic(dataset: Dataset, config: Config, pairs: int = 20, B: int = 100_000,
                         seed: int = 0, executor=None) -> LipschitzReport:
    """Empirical Lipschitz constant of the mean regression tree in its input.

    For random residual pairs with sup norm at most 1, compares the B-tree
    means on the sample points (plus a 1001-point grid when p = 1) and fits
    C = max (diff - 5 SE) / |r - r'|. Reported, not asserted.
    """
    gen = np.random.default_rng(seed)
    X = dataset.X
    if dataset.p == 1:
        X = np.vstack([X, np.linspace(0.0, 1.0, 1001)[:, None]])
    root = RngStream(seed).child(0x4C49)
    ones = np.ones(dataset.n)
    diffs, dr, ses, ratios = [], [], [], []
    for k in range(pairs):
        r1 = gen.uniform(-1, 1, dataset.n)
        r2 = np.clip(r1 + gen.uniform(-0.5, 0.5, dataset.n), -1, 1)
        preds = []
        for r in (r1, r2):
            batch, _ = grow_trees(dataset.X, r, -r, ones, config, root.child(k), np.arange(B),
                                  executor=executor)
            preds.append(batch.predict(X))
        m1, m2 = preds[0].mean(axis=0), preds[1].mean(axis=0)
        se = np.sqrt(preds[0].var(axis=0, ddof=1) / B + preds[1].var(axis=0, ddof=1) / B)
        i = int(np.argmax(np.abs(m1 - m2)))
        d = float(abs(m1[i] - m2[i]))
        delta = float(np.max(np.abs(r1 - r2)))
        diffs.append(d)
        dr.append(delta)
        ses.append(float(se[i]))
        ratios.append(max(0.0, d - 5.0 * se[i]) / delta if delta > 0 else 0.0)
    return LipschitzReport(diffs, dr, ses, float(max(ratios)) if ratios else 0.0)


# --------------------------------------------------------------------------- #
# Learning-rate sweeps
# --------------------------------------------------------------------------- #


@dataclass(eq=False)
class SweepReport:
    lambdas: list[float]
    per_lambda_errors: list[list[float]]
    per_lambda_median_error: list[float]
    per_lambda_median_sup_error: list[float | None]
    slope: float | None
    intercept: float | None
    t_end: float
    replications: int
    h_ref: float
    B_ref: int
    grid: float

    @property
    def decreasing(self) -> bool:
        """Median error shrinks with lambda (lambdas are listed descending)."""
        m = self.per_lambda_median_error
        return all(b < a for a, b in zip(m, m[1:]))

    def to_dict(self) -> dict:
        d = {
            "lambdas": self.lambdas,
            "per_lambda_median_error": self.per_lambda_median_error,
            "per_lambda_errors": self.per_lambda_errors,
            "per_lambda_median_sup_error": self.per_lambda_median_sup_error,
            "t_end": self.t_end,
            "replications": self.replications,
            "h_ref": self.h_ref,
            "B_ref": self.B_ref,
            "grid": self.grid,
        }
        if self.slope is not None:
            d["slope"] = self.slope
            d["intercept"] = self.intercept
        return d


def fit_log_slope(x, y) -> tuple[float, float]:
    """Least-squares line through (log x, log y): returns (slope, intercept)."""
    slope, intercept = np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)
    return float(slope), float(intercept)


class _Timeline1D:
    """Prefix step functions of a p = 1 ensemble, one per block count."""

    def __init__(self, ens: Ensemble):
        pts, m, tag = raw_atoms(ens)
        order = np.argsort(pts[:, 0], kind="stable")
        self.pos = pts[order, 0]
        self.mass = m[order]
        self.tag = tag[order]

    def at(self, k: int) -> StepFunction1D:
        keep = self.tag < k
        return StepFunction1D(self.pos[keep], self.mass[keep], presorted=True)


def _sup_distance(a: Ensemble, b: Ensemble) -> float | None:
    try:
        return sup_norm(a - b)
    except RefinementBudgetExceeded:
        return sup_norm_grid(a - b)


def lambda_sweep(dataset: Dataset, config: Config, lambdas, t_end: float, replications: int,
                 h_ref: float | None = None, B_ref: int = 200, grid: float = 0.1,
                 with_sup: bool = True, executor=None) -> SweepReport:
    """Distance between boosting chains and a fine Euler reference.

    For every lambda and replication, E = max over snapshot times t (every
    ``grid`` up to ``t_end``) of the L2_x distance between the chain after
    [t / lambda] steps and the reference at t. The sup-norm distance is
    computed at ``t_end`` only. Replication r at the i-th lambda uses stream
    ``RngStream(seed).child(1, i, r)``; the reference uses ``child(0)``.
    """
    lambdas = [float(v) for v in lambdas]
    if not lambdas or any(v <= 0 for v in lambdas):
        raise ValueError("lambdas must be positive")
    if any(b >= a for a, b in zip(lambdas, lambdas[1:])):
        raise ValueError("lambdas must be strictly descending")
    if int(replications) < 1:
        raise ValueError("replications must be >= 1")
    h_ref = min(lambdas) / 10.0 if h_ref is None else float(h_ref)
    root = RngStream(config.seed)
    ref = euler_integrate(dataset, config, t_end, h_ref, B_ref, rng=root.child(0), executor=executor)
    n_snap = int(math.floor(t_end / grid + 1e-9)) + 1
    snaps = [s * grid for s in range(n_snap)]
    ref_idx = [min(int(math.floor(t / h_ref + 1e-9)), len(ref) - 1) for t in snaps]

    jobs = [(i, r) for i in range(len(lambdas)) for r in range(int(replications))]

    def chain(job):
        i, r = job
        lam = lambdas[i]
        cfg = config.replace(lam=lam, steps=int(math.floor(t_end / lam + 1e-9)))
        st, rec = run_chain(dataset, cfg, keep_fitted=True, rng=root.child(1, i, r))
        return st.ensemble, rec.fitted

    chains = list(executor.map(chain, jobs)) if executor is not None else [chain(j) for j in jobs]

    sq = np.zeros((len(jobs), n_snap))
    sample_sq = np.array([[np.mean((fit[min(int(math.floor(t / lambdas[i] + 1e-9)), len(fit) - 1)]
                                    - ref.fitted[k]) ** 2)
                           for t, k in zip(snaps, ref_idx)]
                          for (i, _), (_, fit) in zip(jobs, chains)])
    if dataset.p == 1:
        ref_line = _Timeline1D(ref.ensemble)
        lines = [_Timeline1D(ens) for ens, _ in chains]
        for s, (t, k) in enumerate(zip(snaps, ref_idx)):
            G = ref_line.at(k)
            G_sq = G.lebesgue_sq()
            for q, (i, _) in enumerate(jobs):
                m = int(math.floor(t / lambdas[i] + 1e-9))
                sq[q, s] = nu_distance_sq_1d(lines[q].at(m), G, G_sq)
    else:
        for s, (t, k) in enumerate(zip(snaps, ref_idx)):
            G = ref.ensemble.prefix(k)
            for q, ((i, _), (ens, _)) in enumerate(zip(jobs, chains)):
                m = int(math.floor(t / lambdas[i] + 1e-9))
                sq[q, s] = l2_norm(ens.prefix(m) - G) ** 2
    err = np.sqrt(np.max(0.5 * sq + 0.5 * sample_sq, axis=1))

    R = int(replications)
    per = [[float(v) for v in err[i * R:(i + 1) * R]] for i in range(len(lambdas))]
    med = [float(np.median(e)) for e in per]
    sup_med: list[float | None] = [None] * len(lambdas)
    if with_sup:
        final = ref.ensemble
        sups = [_sup_distance(ens, final) for ens, _ in chains]
        sup_med = [float(np.median(sups[i * R:(i + 1) * R])) for i in range(len(lambdas))]
    slope = intercept = None
    if len(lambdas) > 1:
        slope, intercept = fit_log_slope(lambdas, med)
    return SweepReport(lambdas, per, med, sup_med, slope, intercept, float(t_end), R,
                       h_ref, int(B_ref), float(grid))
