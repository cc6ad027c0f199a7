import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from mvsde.density import (callable_bin_average, correction_coefficient, estimate_density,
                           fit_aronson_from_estimates, gaussian_bin_average, make_edges,
                           perturbed_upper_bound, verify_aronson, verify_prop21, verify_theorem31,
                           verify_density_bound_pointwise)
from mvsde.diffusion import (DriftField, diag_sin, gaussian_density, identity, scaled_identity,
                             simulate_paths)

from oracles import representation_riemann

X0 = np.zeros(2)


def _heat(spec, t, x=X0):
    return lambda y: gaussian_density(spec, x, t, y)


def test_heat_kernel_at_start():
    t, n = 0.5, 100_000
    ens = simulate_paths(identity(2), None, X0, t, 5, n, 1)
    est = estimate_density(ens, t, make_edges(X0, 0.05, 1))
    assert est.density.ravel()[0] == pytest.approx(1 / (2 * math.pi * t),
                                                   abs=4 * est.stderr.ravel()[0])
    assert 1 / (2 * math.pi * t) == pytest.approx(0.318, abs=5e-4)


@given(st.floats(0.2, 3.0), st.integers(1, 12), st.floats(-1, 1))
def test_mass_identity(half, bins, shift):
    ens = simulate_paths(identity(2), None, X0, 0.3, 3, 500, 2)
    est = estimate_density(ens, 0.3, make_edges([shift, 0.0], half, bins))
    assert est.total_mass + est.out_mass == 1.0
    assert np.all(est.density >= 0) and est.total_mass <= 1.0
    assert est.mass.sum() == pytest.approx(est.total_mass, rel=1e-12)


def test_peak_near_shifted_mean():
    v, t = np.array([1.5, -1.0]), 0.4
    ens = simulate_paths(identity(2), DriftField.constant(v, t), X0, t, 8, 100_000, 3)
    est = estimate_density(ens, t, make_edges(v * t, 1.2, 12))
    peak = est.centers()[np.unravel_index(np.argmax(est.density), est.density.shape)]
    assert np.all(np.abs(peak - v * t) <= 0.2 + 1e-12)  # one bin width


def test_multi_start_rejected():
    ens = simulate_paths(identity(2), None, [[0, 0], [1, 1]], 0.1, 2, 5, 0)
    with pytest.raises(ValueError):
        estimate_density(ens, 0.1, make_edges(X0, 1.0, 4))


def test_weighted_estimate_reports_defect():
    ens = simulate_paths(identity(2), None, X0, 0.1, 2, 1000, 0)
    w = np.full(1000, 0.5)
    est = estimate_density(ens, 0.1, make_edges(X0, 5.0, 4), weights=w)
    assert est.weighted and est.total_mass == pytest.approx(0.5)
    assert est.out_mass == pytest.approx(0.0, abs=1e-12)


def test_bin_average_oracles():
    lo, hi, c = np.array([[0.1, -0.3]]), np.array([[0.4, 0.2]]), np.array([0.05, 0.0])
    exact = np.prod([(stats.norm.cdf(h, ci, math.sqrt(0.35)) - stats.norm.cdf(l, ci,
                      math.sqrt(0.35))) for l, h, ci in zip(lo[0], hi[0], c)])
    exact *= 2 * math.pi * 0.35 / np.prod(hi - lo)
    assert gaussian_bin_average(0.7, lo, hi, c)[0] == pytest.approx(exact, rel=1e-12)
    quad = callable_bin_average(lambda y: np.exp(-((y - c) ** 2).sum(-1) / 0.7), lo, hi, 8)
    assert quad[0] == pytest.approx(exact, rel=1e-8)


def test_aronson_exact_gaussian_upper():
    spec, t = scaled_identity(2, math.sqrt(2)), 0.3
    ens = simulate_paths(spec, None, X0, t, 3, 50_000, 4)
    est = estimate_density(ens, t, make_edges(X0, 2.5, 10))
    rep = verify_aronson(est, 4.0, 1e-12, X0)
    assert rep["upper_violations"] == [] and rep["lower_violations"] == [] and rep["pass"]


def test_aronson_fitted_on_multiplicative_noise():
    spec = diag_sin(0.5)
    times = (0.25, 0.5)
    fit_runs = simulate_paths(spec, None, X0, 0.5, 20, 100_000, 5)
    check_runs = simulate_paths(spec, None, X0, 0.5, 20, 100_000, 6)
    edges = make_edges(X0, 3.0, 12)
    kappa, kappa_prime = fit_aronson_from_estimates(
        [estimate_density(fit_runs, t, edges) for t in times], X0)
    assert kappa > kappa_prime > 0
    for t in times:
        rep = verify_aronson(estimate_density(check_runs, t, edges), kappa, kappa_prime, X0)
        assert rep["pass"], rep


def test_density_bound_zero_drift_is_equality():
    spec, t = identity(2), 0.2
    ax = np.linspace(-1, 1, 41)
    y = np.stack(np.meshgrid(ax, ax, indexing="ij"), -1)
    from mvsde.constants import build_bundle
    bundle = build_bundle(2, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, R=1.0)
    rep = verify_density_bound_pointwise(_heat(spec, t), _heat(spec, t), bundle, 0.0, t, X0, y)
    assert rep["pass"] and rep["min_slack"] == 0.0


def test_density_bound_constant_drift_grid(desk):
    spec, bundle = identity(2), desk.bundle
    v = np.array([0.6, -0.8]) * bundle.L
    for t in (bundle.T_L / 2, bundle.T_L):
        h = 6 * math.sqrt(t)
        ax = np.linspace(-h, h, 41)
        y = np.stack(np.meshgrid(ax, ax, indexing="ij"), -1)
        rep = verify_density_bound_pointwise(_heat(spec, t, v * t), _heat(spec, t), bundle,
                                         bundle.L, t, X0, y)
        assert rep["pass"] and rep["points"] == 41 * 41 and rep["correction_nonnegative"]


@given(st.floats(0.0, 10.0), st.floats(1e-3, 1.0))
def test_perturbed_upper_bound_never_below_p(b_norm, t):
    from mvsde.constants import build_bundle
    bundle = build_bundle(2, 2.0, 1.5, 1.2, 1.0, 1.0, 1.0, 1.0)
    y = np.random.default_rng(0).normal(size=(50, 2))
    p = gaussian_density(identity(2), X0, t, y)
    rhs, corr = perturbed_upper_bound(p, bundle, b_norm, t, X0, y)
    assert np.all(corr >= 0) and np.all(rhs >= p)


def test_density_bound_small_drift_reduces_to_reference(desk):
    t = desk.bundle.T_L
    y = np.random.default_rng(1).normal(size=(50, 2)) * math.sqrt(t)
    p = gaussian_density(identity(2), X0, t, y)
    gaps = [np.max(perturbed_upper_bound(p, desk.bundle, b, t, X0, y)[0] - p) for b in
            (1e-2, 1e-4, 1e-6)]
    assert gaps[0] > gaps[1] > gaps[2] >= 0
    assert gaps[2] == pytest.approx(gaps[1] * 1e-2, rel=1e-3)
    assert correction_coefficient(desk.bundle, 0.0, t) == 0.0


def test_density_bound_histogram(desk):
    bundle, spec = desk.bundle, identity(2)
    t = bundle.T_L
    s = math.sqrt(t)
    b = DriftField.from_function(
        lambda _, x: bundle.L * np.stack([np.cos(x[..., 0] / s), np.sin(x[..., 0] / s)], -1),
        [0.0], [-10 * s, -10 * s], [10 * s, 10 * s], [41, 41], t)
    ens = simulate_paths(spec, b, X0, t, 10, 50_000, 7)
    est = estimate_density(ens, t, make_edges(X0, 5 * s, 16))
    rep = verify_theorem31(est, _heat(spec, t), bundle, b.sup_norm, t, X0)
    assert rep["pass"] and rep["bins"] == 256
    ref = estimate_density(simulate_paths(spec, None, X0, t, 10, 50_000, 8), t, est.edges)
    assert verify_theorem31(est, ref, bundle, b.sup_norm, t, X0)["pass"]


def test_representation_zero_drift_both_sides_equal_p():
    spec, t = identity(2), 0.25
    y = [[0.0, 0.0], [0.3, -0.2]]
    rep = verify_prop21(X0, y, t, DriftField.zero(2, t), spec, 200, 5, 9)
    for r in rep["targets"]:
        assert r["lhs"] == r["rhs"] == r["p"]


def test_representation_matches_left_riemann_oracle(desk):
    spec, t, steps = identity(2), 0.25, 25
    v = np.array([1.0, 0.5])
    y = np.array([[0.0, 0.0], [0.25, 0.125], [0.5, 0.0], [-0.3, 0.4], [0.2, -0.5]])
    rep = verify_prop21(X0, y, t, DriftField.constant(v, t), spec, 40_000, steps, 10,
                        bundle=desk.bundle)
    oracle = representation_riemann(X0, v, t, y, steps)
    exact = stats.multivariate_normal(v * t, t * np.eye(2)).pdf(y)
    for r, o, e in zip(rep["targets"], oracle, exact):
        assert abs(r["rhs"] - o) <= 4 * r["rhs_stderr"]
        assert r["lhs"] == pytest.approx(e, rel=1e-12)
        assert r["last_cell_within_bound"]


def test_representation_varying_drift_self_consistency():
    spec, t = identity(2), 0.25
    b = DriftField.from_function(
        lambda _, x: np.stack([np.sin(2 * x[..., 1]), np.cos(2 * x[..., 0])], -1),
        [0.0], [-3, -3], [3, 3], [31, 31], t)
    y = [[0.0, 0.0], [0.3, 0.2], [-0.2, 0.3], [0.4, -0.1], [0.0, 0.5]]
    rep = verify_prop21(X0, y, t, b, spec, 100_000, 25, 11, bin_width=0.2)
    assert rep["lhs_mode"] == "histogram" and rep["pass"], rep["targets"]


def test_representation_rejects_unsupported_inputs():
    with pytest.raises(ValueError):
        verify_prop21(X0, [[0, 0]], 0.2, DriftField.zero(2, 0.2), diag_sin(0.5), 10, 2, 0)
    varying = DriftField.from_function(lambda _, x: x, [0.0], [-1, -1], [1, 1], [3, 3], 1.0)
    with pytest.raises(ValueError):
        verify_prop21(X0, [[0, 0]], 0.2, varying, identity(2), 10, 2, 0)


def test_chapman_kolmogorov():
    spec, s, t, n = diag_sin(0.5), 0.2, 0.5, 60_000
    direct = simulate_paths(spec, None, X0, t, 10, n, 12)
    first = simulate_paths(spec, None, X0, s, 4, n, 13)
    second = simulate_paths(spec, None, first.positions[:, -1], t - s, 6, 1, 14)
    edges = make_edges(X0, 2.0, 6)
    d = estimate_density(direct, t, edges)
    counts, _ = np.histogramdd(second.positions[:, -1], bins=edges)
    m = counts / n
    keep = (d.mass * n >= 20) & (counts >= 20)
    var = d.mass * (1 - d.mass) / n + m * (1 - m) / n
    chi2 = (((d.mass - m) ** 2)[keep] / var[keep]).sum()
    assert stats.chi2.sf(chi2, keep.sum()) > 1e-3


def test_rows_layout():
    ens = simulate_paths(identity(2), None, X0, 0.1, 2, 100, 0)
    est = estimate_density(ens, 0.1, make_edges(X0, 1.0, 2))
    rows = est.rows(bound=np.ones((2, 2)))
    assert len(rows) == 4 and len(rows[0]) == 6  # t, y1, y2, p_hat, stderr, bound
