"""Gradient boosting with softmax gradient trees as a Markov chain.

Step m draws its tree from ``RngStream(seed).child(m)`` at tree index 0.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Config, Dataset, get_loss, init_constant, training_error
from .measure import Ensemble
from .rng import RngStream
from .tree import gradient_stats, grow_trees


class BoostingDiverged(FloatingPointError):
    """Fitted values stopped being finite."""


@dataclass(frozen=True, eq=False)
class BoostState:
    ensemble: Ensemble
    fitted_values: np.ndarray
    step: int = 0


@dataclass(eq=False)
class TrajectoryRecord:
    """One row per executed step (row 0 describes the starting state)."""

    lam: float
    step: list[int] = field(default_factory=list)
    train_error: list[float] = field(default_factory=list)
    mean_residual: list[float] = field(default_factory=list)
    tree_sup_norm: list[float] = field(default_factory=list)
    snapshots: dict[float, Ensemble] = field(default_factory=dict)
    fitted: list[np.ndarray] | None = None

    def add(self, step: int, train_error: float, mean_residual: float, sup: float) -> None:
        self.step.append(step)
        self.train_error.append(train_error)
        self.mean_residual.append(mean_residual)
        self.tree_sup_norm.append(sup)

    @property
    def t(self) -> list[float]:
        return [self.lam * m for m in self.step]

    def __len__(self) -> int:
        return len(self.step)

    def rows(self):
        for m, t, e, r, s in zip(self.step, self.t, self.train_error, self.mean_residual, self.tree_sup_norm):
            yield m, t, e, r, s

    def to_csv(self, path, comment: str | None = None) -> None:
        with Path(path).open("w", newline="") as fh:
            if comment is not None:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "t", "train_error", "mean_residual", "tree_sup_norm"])
            for m, t, e, r, s in self.rows():
                w.writerow([m, repr(t), repr(e), repr(r), repr(s)])


def _diagnostics(dataset: Dataset, loss, F) -> tuple[float, float]:
    return training_error(loss, dataset.y, F), float(-loss.d1(dataset.y, F).sum() / dataset.n)


def boost_init(dataset: Dataset, config: Config) -> BoostState:
    """Constant start at the empirical loss minimizer."""
    z, _ = init_constant(dataset, config.loss_fn, config.z_max)
    return BoostState(Ensemble.constant(dataset.p, z), np.full(dataset.n, z), 0)


def boost_step(state: BoostState, dataset: Dataset, config: Config, rng: RngStream | None = None,
               lam: float | None = None, check_bound: bool = True) -> tuple[BoostState, float]:
    """Add one shrunken softmax gradient tree.

    Returns the new state and the sup norm of the added (shrunken) tree.
    ``lam`` overrides ``config.lam`` (0 is allowed here).
    """
    loss = config.loss_fn
    lam = config.lam if lam is None else float(lam)
    rng = RngStream(config.seed) if rng is None else rng
    F = state.fitted_values
    r, g, h = gradient_stats(dataset.y, F, loss)
    batch, leaf = grow_trees(dataset.X, r, g, h, config, rng.child(state.step), [0],
                              order=dataset.sort_order)
    value = batch.value[0]
    sup = lam * float(np.abs(value).max())
    if check_bound:
        bound = lam * float(np.abs(g / h).max())
        if sup > bound * (1 + 1e-12) + 1e-300:
            raise AssertionError(f"added tree sup {sup} exceeds lambda * max|d1/d2| = {bound}")
    F_new = F + lam * value[leaf[0]]
    if not np.isfinite(F_new).all():
        bad = int(np.argmax(~np.isfinite(F_new)))
        raise BoostingDiverged(f"step {state.step + 1}: fitted value at sample {bad} is {F_new[bad]}")
    ens = state.ensemble
    new_ens = Ensemble(ens.p, ens.offset, ens.blocks + [(lam, batch)])
    return BoostState(new_ens, F_new, state.step + 1), sup


def run_chain(dataset: Dataset, config: Config, state: BoostState | None = None,
              snapshot_times=(), keep_fitted: bool = False, debug: bool = False,
              rng: RngStream | None = None) -> tuple[BoostState, TrajectoryRecord]:
    """Run ``config.steps`` boosting steps, from ``state`` or from the constant start.

    ``snapshot_times`` are rescaled times t = lambda * m; the ensemble after
    [t / lambda] steps is kept for each of them.
    """
    loss = get_loss(config.loss)
    loss.check(dataset.y)
    rng = RngStream(config.seed) if rng is None else rng
    if state is None:
        state = boost_init(dataset, config)
    lam = config.lam
    snap_steps = {}
    for t in snapshot_times:
        snap_steps.setdefault(int(math.floor(t / lam + 1e-9)), []).append(float(t))

    rec = TrajectoryRecord(lam, fitted=[] if keep_fitted else None)

    def observe(st: BoostState, sup: float) -> None:
        err, rbar = _diagnostics(dataset, loss, st.fitted_values)
        rec.add(st.step, err, rbar, sup)
        if keep_fitted:
            rec.fitted.append(st.fitted_values)
        for t in snap_steps.get(st.step, ()):
            rec.snapshots[t] = st.ensemble
        if debug:
            drift = np.max(np.abs(st.ensemble.predict(dataset.X) - st.fitted_values))
            if drift > 1e-9:
                raise AssertionError(f"step {st.step}: incremental fit drifted by {drift}")

    observe(state, 0.0)
    for _ in range(config.steps):
        state, sup = boost_step(state, dataset, config, rng)
        observe(state, sup)
    return state, rec
