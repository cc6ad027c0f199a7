import math

import numpy as np
import pytest
from scipy import stats

from mvsde.config import DriftConfig
from mvsde.density import estimate_density, make_edges
from mvsde.diffusion import DriftField, diag_sin, identity, simulate_paths
from mvsde.girsanov import (compute_weights, exponent_increments, moment_bound, moment_check,
                            reweighted_expectation, unit_mean_check)
from mvsde.scenario import drift_from

from oracles import box_probability

T = 0.25
N = 40_000


@pytest.fixture(scope="module")
def bm():
    return simulate_paths(identity(2), None, [0.0, 0.0], T, 25, N, 21)


def test_zero_drift_gives_unit_weights(bm):
    w = compute_weights(bm, None, identity(2))
    assert np.all(w.weights == 1.0)
    w = compute_weights(bm, DriftField.zero(2, T), identity(2))
    assert np.all(w.weights == 1.0)
    rec = moment_check(w, 3.0, [T])[0]
    assert rec["estimate"] == 1.0 and rec["bound"] == 1.0 and rec["pass"]


def test_weights_positive_start_at_one_and_recomputable(bm):
    b = DriftField.constant([1.0, -0.5], T)
    w = compute_weights(bm, b, identity(2))
    assert np.all(w.weights > 0)
    assert np.all(w.weights[:, 0] == 1.0)
    inc = exponent_increments(bm, b, identity(2))
    np.testing.assert_allclose(w.exponent[:, -1], inc.sum(1), rtol=1e-12, atol=1e-12)
    # left-point increments for a constant drift are explicit
    v = np.array([1.0, -0.5])
    manual = bm.dM @ v - 0.5 * (v @ v) * bm.dt
    np.testing.assert_allclose(inc, manual, rtol=1e-12, atol=1e-14)


def test_constant_drift_examples(bm):
    v = np.array([1.0, 0.0])
    w = compute_weights(bm, DriftField.constant(v, T), identity(2))
    assert unit_mean_check(w, [0.1, T])[0]["pass"]
    mean, se = reweighted_expectation(w, lambda x: x, T)
    assert np.all(np.abs(mean - v * T) <= 4 * se)
    one, se1 = reweighted_expectation(w, lambda x: np.ones(len(x)), T)
    assert abs(one - 1) <= 4 * se1
    lo, hi = np.array([0.1, -0.2]), np.array([0.6, 0.3])
    f = lambda x: np.all((x >= lo) & (x <= hi), axis=-1).astype(float)  # noqa: E731
    est, se = reweighted_expectation(w, f, T)
    assert abs(est - box_probability(v * T, T, lo, hi)) <= 4 * se


@pytest.mark.parametrize("v", [1.0, 2.0])
def test_second_moment_closed_form(bm, v):
    w = compute_weights(bm, DriftField.constant([v, 0.0], T), identity(2))
    rec = moment_check(w, 2.0, [T])[0]
    assert rec["bound"] == pytest.approx(math.exp(v * v * T))
    assert abs(rec["estimate"] - math.exp(v * v * T)) <= 4 * rec["stderr"]
    assert rec["pass"]


def test_moment_bound_formula():
    assert moment_bound(2.0, 4.0, 1.5, 0.3) == pytest.approx(math.exp(0.5 * 2 * 4 * 3 * 2.25 * 0.3))


def test_rejects_drifted_ensemble_and_short_drift(bm):
    drifted = simulate_paths(identity(2), DriftField.constant([1.0, 0.0], T), [0, 0], T, 5, 4, 0)
    with pytest.raises(ValueError):
        compute_weights(drifted, None, identity(2))
    with pytest.raises(ValueError):
        compute_weights(bm, DriftField.constant([1.0, 0.0], 0.1), identity(2))
    with pytest.raises(ValueError):
        compute_weights(bm, None, diag_sin(0.5))
    with pytest.raises(ValueError):
        moment_check(compute_weights(bm, None, identity(2)), 1.0, [T])


def _drifts():
    return [DriftField.constant([1.0, 0.5], T),
            drift_from(DriftConfig(kind="rotating", amplitude=2.0, scale=0.5), 2, T),
            drift_from(DriftConfig(kind="swirl", amplitude=1.5), 2, T)]


@pytest.mark.parametrize("spec", [identity(2), diag_sin(0.5)], ids=lambda s: s.name)
@pytest.mark.parametrize("k", range(3))
def test_measure_equivalence(spec, k):
    """Reweighted zero-drift marginals match direct simulation (chi-square at 0.1%)."""
    b = _drifts()[k]
    n = 40_000
    zero = simulate_paths(spec, None, [0.0, 0.0], T, 25, n, 31)
    direct = simulate_paths(spec, b, [0.0, 0.0], T, 25, n, 32)
    edges = make_edges([0.0, 0.0], 1.5, 8)
    rew = estimate_density(zero, T, edges, _terminal_weights(zero, b, spec))
    dir_ = estimate_density(direct, T, edges)
    keep = dir_.mass * n >= 25
    diff = (rew.density - dir_.density)[keep]
    z2 = diff**2 / (rew.stderr**2 + dir_.stderr**2)[keep]
    assert stats.chi2.sf(z2.sum(), keep.sum()) > 1e-3


def _terminal_weights(ens, b, spec):
    return compute_weights(ens, b, spec).weights[:, -1]


@pytest.mark.parametrize("spec", [identity(2), diag_sin(0.5)], ids=lambda s: s.name)
def test_unit_mean_and_moment_bounds_hold_for_test_drifts(spec):
    ens = simulate_paths(spec, None, [0.0, 0.0], T, 25, N, 41)
    for b in _drifts():
        w = compute_weights(ens, b, spec)
        assert all(r["pass"] for r in unit_mean_check(w, [0.1, T]))
        for p in (2.0, 4.0):
            assert all(r["pass"] for r in moment_check(w, p, [0.1, T]))
