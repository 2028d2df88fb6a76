import numpy as np
from hypothesis import given, strategies as st

from igboost.rng import RngStream


def test_same_coordinates_same_draws():
    a = RngStream(42).child(3, 1)
    b = RngStream(42).child(3).child(1)
    assert np.array_equal(a.uniform(np.arange(5), 2, 7), b.uniform(np.arange(5), 2, 7))


def test_different_coordinates_differ():
    base = RngStream(42)
    draws = {float(base.child(m).uniform(0, 0, 0)) for m in range(200)}
    assert len(draws) == 200
    assert base.uniform(0, 0, 0) != RngStream(43).uniform(0, 0, 0)


@given(st.integers(0, 2**63 - 1), st.integers(0, 10**6), st.integers(0, 10**6))
def test_broadcast_matches_scalar(seed, tree, node):
    rng = RngStream(seed)
    slots = np.arange(6)
    vec = rng.uniform(tree, node, slots)
    for s in slots:
        assert rng.uniform(tree, node, s) == vec[s]
    assert np.all((vec > 0) & (vec < 1))


def test_uniformity():
    u = RngStream(7).uniform(np.arange(200_000), 0, 0)
    counts = np.bincount((u * 20).astype(int), minlength=20)
    expected = u.size / 20
    chi2 = np.sum((counts - expected) ** 2 / expected)
    # 19 degrees of freedom; 43.8 is the 0.999 quantile
    assert chi2 < 43.8
    assert abs(u.mean() - 0.5) < 4 * np.sqrt(1 / 12 / u.size)


def test_integers_range():
    k = RngStream(1).integers(3, np.arange(30_000), 0, 0)
    assert set(np.unique(k)) == {0, 1, 2}
