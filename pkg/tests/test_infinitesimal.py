import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from igboost.boosting import run_chain
from igboost.core import Config, Dataset, generate_sine_dataset, get_loss
from igboost.infinitesimal import (
    UnsupportedOperator,
    estimate_operator,
    euler_integrate,
    exact_operator_1d,
    fit_log_slope,
    lambda_sweep,
    lipschitz_diagnostic,
    long_time_diagnostics,
)
from igboost.rng import RngStream


def _quadrature_operator(ds, F, loss, m=200_001):
    """Midpoint-rule oracle: average the stump's Newton value over a threshold grid."""
    L = get_loss(loss)
    g, h = L.d1(ds.y, F), L.d2(ds.y, F)
    x = ds.X[:, 0]
    taus = (np.arange(m) + 0.5) / m
    right = x[None, :] >= taus[:, None]
    G1, H1 = right @ g, right @ h
    G0, H0 = g.sum() - G1, h.sum() - H1
    v1 = np.where(H1 > 0, -G1 / np.where(H1 > 0, H1, 1), 0.0)
    v0 = np.where(H0 > 0, -G0 / np.where(H0 > 0, H0, 1), 0.0)
    return np.mean(np.where(right, v1[:, None], v0[:, None]), axis=0)


# --------------------------------------------------------------------------- #
# Exact operator


def test_exact_operator_two_points():
    ds = Dataset([[0.2], [0.8]], [1.0, -1.0])
    assert exact_operator_1d([0.0, 0.0], ds, "squared") == pytest.approx([0.6, -0.6], abs=1e-15)


def test_exact_operator_trivial_cases():
    one = Dataset([[0.3]], [2.0])
    assert exact_operator_1d([0.5], one, "squared") == pytest.approx([1.5])
    ds = Dataset(np.random.default_rng(0).uniform(size=(9, 1)), np.full(9, 3.0))
    assert exact_operator_1d(np.full(9, 1.0), ds, "squared") == pytest.approx(np.full(9, 2.0), abs=1e-14)


@pytest.mark.parametrize("loss", ["squared", "bce", "exponential"])
@given(seed=st.integers(0, 2**32 - 1))
def test_exact_operator_matches_quadrature(loss, seed):
    gen = np.random.default_rng(seed)
    n = int(gen.integers(1, 10))
    x = np.round(gen.uniform(size=n), 2)  # allow repeated abscissae
    if loss == "squared":
        y = gen.normal(size=n)
    elif loss == "bce":
        y = gen.integers(0, 2, n).astype(float)
    else:
        y = np.where(gen.integers(0, 2, n) == 1, 1.0, -1.0)
    ds = Dataset(x[:, None], y)
    F = gen.normal(size=n)
    assert np.allclose(exact_operator_1d(F, ds, loss), _quadrature_operator(ds, F, loss), atol=1e-4)


def test_exact_operator_rejects_other_settings():
    with pytest.raises(UnsupportedOperator):
        exact_operator_1d([0.0], Dataset([[0.1, 0.2]], [1.0]), "squared")
    with pytest.raises(UnsupportedOperator):
        exact_operator_1d([0.0], Dataset([[0.1]], [1.0]), "squared", Config(depth=2, beta=0.0))


# --------------------------------------------------------------------------- #
# Monte-Carlo estimate


def test_zero_residuals_give_zero_operator():
    ds = generate_sine_dataset(20, 0.1, 1)
    est = estimate_operator(ds.y, ds, Config(depth=3, K=5, beta=2.0), 200)
    assert np.all(est.values_at_samples == 0.0)
    assert np.all(est(np.random.default_rng(0).uniform(size=(100, 1))) == 0.0)


@given(beta=st.sampled_from([0.0, 1.0, math.inf]), depth=st.integers(1, 3), K=st.integers(1, 6))
def test_single_point_operator_is_residual(beta, depth, K):
    ds = Dataset([[0.42, 0.1]], [1.5])
    est = estimate_operator([0.25], ds, Config(beta=beta, depth=depth, K=K), 17)
    assert est.values_at_samples[0] == pytest.approx(1.25, abs=1e-15)


def test_estimate_mean_equals_mean_tree():
    ds = generate_sine_dataset(30, 0.1, 2)
    est = estimate_operator(np.zeros(30), ds, Config(depth=2), 40, rng=RngStream(3).child(5))
    assert np.allclose(est(ds.X), est.values_at_samples, atol=1e-14)
    assert est.mean_tree.n_trees == 40 and est.B == 40


def test_monte_carlo_matches_exact_on_two_points():
    ds = Dataset([[0.2], [0.8]], [1.0, -1.0])
    est = estimate_operator([0.0, 0.0], ds, Config(beta=0.0, K=5, depth=1), 100_000)
    exact = exact_operator_1d([0.0, 0.0], ds, "squared")
    assert np.all(np.abs(est.values_at_samples - exact) <= 4 * est.standard_error)


@pytest.mark.parametrize("loss", ["bce", "exponential"])
def test_monte_carlo_matches_exact_for_classification(loss):
    gen = np.random.default_rng(4)
    for rep in range(3):
        n = int(gen.integers(2, 12))
        y = gen.integers(0, 2, n).astype(float)
        y = y if loss == "bce" else 2 * y - 1
        ds = Dataset(gen.uniform(size=(n, 1)), y)
        F = gen.normal(size=n)
        est = estimate_operator(F, ds, Config(beta=0.0, K=3, loss=loss), 50_000, rng=RngStream(rep))
        exact = exact_operator_1d(F, ds, loss)
        assert np.all(np.abs(est.values_at_samples - exact) <= 4 * est.standard_error + 1e-12)


# --------------------------------------------------------------------------- #
# Euler


def _relaxation_error(h, t_end=5.0, y=1.0, F0=0.0):
    ds = Dataset([[0.5]], [y])
    traj = euler_integrate(ds, Config(), t_end, h, 1, init=F0)
    t = np.array(traj.times)
    return np.max(np.abs(np.array([f[0] for f in traj.fitted]) - (y + (F0 - y) * np.exp(-t))))


def test_single_point_relaxation_is_first_order():
    errs = [_relaxation_error(h) for h in (0.1, 0.05, 0.025, 0.0125)]
    for h, e in zip((0.1, 0.05, 0.025, 0.0125), errs):
        assert e <= 2 * h
    ratios = [a / b for a, b in zip(errs, errs[1:])]
    assert all(1.5 <= r <= 2.5 for r in ratios)


def test_euler_single_tree_reproduces_chain():
    ds = generate_sine_dataset(40, 0.1, 5)
    cfg = Config(beta=1.0, K=6, depth=2, lam=0.05, steps=80, seed=12)
    state, rec = run_chain(ds, cfg, keep_fitted=True)
    traj = euler_integrate(ds, cfg, 4.0, 0.05, 1)
    assert len(traj) == len(rec)
    assert all(np.array_equal(a, b) for a, b in zip(traj.fitted, rec.fitted))
    assert traj.train_error == rec.train_error
    X = np.random.default_rng(0).uniform(size=(100, 1))
    assert np.array_equal(traj.final.predict(X), state.ensemble.predict(X))


@pytest.mark.parametrize("B", [1, 7])
def test_square_mean_residual_identity(B):
    ds = generate_sine_dataset(30, 0.1, 6)
    traj = euler_integrate(ds, Config(depth=2, K=4), 1.0, 0.1, B, init=0.3)
    r0 = traj.mean_residual[0]
    for k, r in enumerate(traj.mean_residual):
        assert abs(r - r0 * (1 - 0.1) ** k) <= 1e-10
    std = euler_integrate(ds, Config(depth=2, K=4), 1.0, 0.1, B)
    assert max(abs(r) for r in std.mean_residual) <= 1e-10


def test_zero_horizon_is_initial_constant():
    ds = generate_sine_dataset(10, 0.1, 0)
    traj = euler_integrate(ds, Config(), 0.0, 0.1, 5)
    assert len(traj) == 1 and traj.final.n_trees == 0
    assert traj.final.offset == pytest.approx(ds.y.mean())


def test_trajectory_iterates_match_fitted_values():
    ds = generate_sine_dataset(20, 0.1, 3)
    traj = euler_integrate(ds, Config(depth=2), 1.0, 0.25, 6)
    for k in range(len(traj)):
        assert np.allclose(traj.iterate(k).predict(ds.X), traj.fitted[k], atol=1e-12)


# --------------------------------------------------------------------------- #
# Long-time behaviour


def test_critical_start_diagnostics_vanish():
    ds = generate_sine_dataset(15, 0.1, 2).with_responses(np.full(15, 0.37))
    rep = long_time_diagnostics(euler_integrate(ds, Config(depth=2), 2.0, 0.1, 5, init=0.37))
    assert set(rep.train_error) == {0.0} and set(rep.max_residual) == {0.0}
    assert rep.monotone


def test_square_loss_training_error_monotone():
    ds = generate_sine_dataset(60, 0.1, 4)
    rep = long_time_diagnostics(euler_integrate(ds, Config(), 10.0, 0.05, 20))
    assert rep.monotone
    res, err = rep.relative_final()
    assert res < 1 and err < 1


def test_separable_cross_entropy_diverges_monotonically():
    ds = Dataset([[0.1], [0.25], [0.7], [0.9]], [0.0, 0.0, 1.0, 1.0])
    traj = euler_integrate(ds, Config(loss="bce", beta=0.0, depth=1), 30.0, 0.1, 50)
    F = np.array(traj.fitted)
    mag = np.abs(F)
    assert np.all(np.diff(mag, axis=0) > 0)
    assert np.all(np.sign(F[-1]) == [-1, -1, 1, 1])
    assert long_time_diagnostics(traj).monotone


def test_lipschitz_diagnostic_reports_constant():
    ds = generate_sine_dataset(10, 0.1, 0)
    rep = lipschitz_diagnostic(ds, Config(beta=1.0, K=5), pairs=4, B=2000)
    assert len(rep.sup_differences) == 4 and np.isfinite(rep.constant) and rep.constant >= 0


# --------------------------------------------------------------------------- #
# Sweeps


def test_fit_log_slope():
    x = np.array([0.2, 0.1, 0.05])
    slope, intercept = fit_log_slope(x, 3 * np.sqrt(x))
    assert slope == pytest.approx(0.5) and intercept == pytest.approx(math.log(3))


def test_sweep_single_lambda_and_replication():
    ds = generate_sine_dataset(20, 0.1, 1)
    rep = lambda_sweep(ds, Config(K=5), [0.1], t_end=0.5, replications=1, B_ref=10)
    assert rep.slope is None and "slope" not in rep.to_dict()
    assert rep.per_lambda_median_error == [rep.per_lambda_errors[0][0]]


def test_sweep_errors_match_direct_computation():
    from igboost.measure import l2_norm

    ds = generate_sine_dataset(15, 0.1, 2)
    cfg = Config(K=5, seed=3)
    rep = lambda_sweep(ds, cfg, [0.2, 0.1], t_end=0.4, replications=2, B_ref=8, grid=0.2)
    ref = euler_integrate(ds, cfg, 0.4, 0.01, 8, rng=RngStream(3).child(0))
    state, _ = run_chain(ds, cfg.replace(lam=0.1, steps=4), rng=RngStream(3).child(1, 1, 1))
    direct = max(l2_norm(state.ensemble.prefix(m) - ref.iterate(k), ds) for m, k in [(0, 0), (2, 20), (4, 40)])
    assert rep.per_lambda_errors[1][1] == pytest.approx(direct, rel=1e-9)


def test_sweep_validates_inputs():
    ds = generate_sine_dataset(10, 0.1, 1)
    with pytest.raises(ValueError):
        lambda_sweep(ds, Config(), [0.1, 0.2], 1.0, 1)
    with pytest.raises(ValueError):
        lambda_sweep(ds, Config(), [0.1], 1.0, 0)
