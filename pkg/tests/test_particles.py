import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mvsde.diffusion import DriftField, NumericalAbort, diag_sin, identity, scaled_identity
from mvsde.kernels import biot_savart, eval_kernel, kernel_apply, power_law, zero_kernel
from mvsde.meanfield import box_vorticity, bump_vorticity
from mvsde.particles import (VortexEnsemble, chaos_error, empirical_velocity,
                             init_from_vorticity, pairwise_drift, run, step,
                             two_vortex_orbit)

from oracles import bump_velocity, two_vortex_ode

W = bump_vorticity()


def _ens(pos, wts, seed=0, eps=0.0):
    pos = np.asarray(pos, dtype=float)
    return VortexEnsemble(pos, np.asarray(wts, dtype=float), np.arange(len(pos)), seed=seed,
                          eps=eps)


def test_init_zero_vorticity():
    zero = box_vorticity([-1, -1], [1, 1], [0.0, 0.0])
    ens = init_from_vorticity(zero, 50, 1)
    assert np.all(ens.intensities == 0.0)


def test_init_narrow_bump_single_vortex():
    narrow = bump_vorticity(center=(0.3, -0.2), radius=1e-3)
    ens = init_from_vorticity(narrow, 1, 2)
    assert ens.N == 1 and np.linalg.norm(ens.positions[0] - [0.3, -0.2]) <= 1.5e-3


def test_init_importance_identity():
    ens = init_from_vorticity(W, 10_000, 3)
    mean = ens.intensities.mean()
    se = ens.intensities.std(ddof=1) / 100
    assert abs(mean - W.integral[0]) <= 4 * se


def test_single_vortex_is_pure_diffusion():
    ens = _ens([[0.1, 0.2]], [5.0], seed=4)
    drift, hits = pairwise_drift(ens, biot_savart())
    assert np.all(drift == 0) and hits == 0
    out = step(ens, 0.01, identity(2), biot_savart())
    from mvsde import rng
    dB = rng.normals(4, rng.TAG_VORTEX, np.arange(1), 0, 0, n=2) * 0.1
    np.testing.assert_allclose(out.positions, ens.positions + dB, rtol=0, atol=1e-15)


def test_two_vortex_orbit_matches_ode():
    x1, x2, N = np.array([0.0, 0.0]), np.array([0.2, 0.1]), 2
    _, _, omega = two_vortex_orbit(x1, x2, 1.0, 0.5, N, 0.0)
    quarter = 0.5 * math.pi / omega
    a, b, _ = two_vortex_orbit(x1, x2, 1.0, 0.5, N, quarter)
    ra, rb = two_vortex_ode(x1, x2, 1.0, 0.5, N, quarter)
    np.testing.assert_allclose(a, ra, atol=1e-9)
    np.testing.assert_allclose(b, rb, atol=1e-9)


def test_two_vortex_step_co_rotation():
    x1, x2, N = np.array([-0.1, 0.0]), np.array([0.1, 0.0]), 2
    _, _, omega = two_vortex_orbit(x1, x2, 1.0, 1.0, N, 0.0)
    quarter = 0.5 * math.pi / omega
    steps = 2000
    ens = run(_ens([x1, x2], [1.0, 1.0]), quarter / steps, steps, None, biot_savart())
    a, b, _ = two_vortex_orbit(x1, x2, 1.0, 1.0, N, quarter)
    D = 0.2
    assert np.linalg.norm(ens.positions[0] - a) <= 0.01 * D
    assert np.linalg.norm(ens.positions[1] - b) <= 0.01 * D
    # distance preserved
    assert np.linalg.norm(ens.positions[0] - ens.positions[1]) == pytest.approx(D, rel=0.01)


def test_total_intensity_conserved():
    ens = init_from_vorticity(W, 300, 5)
    out = run(ens, 1e-3, 5, diag_sin(0.5), biot_savart(eps=1e-9))
    np.testing.assert_array_equal(out.intensities, ens.intensities)
    assert out.total_intensity() == ens.total_intensity()
    assert out.step_count == 5 and out.time == pytest.approx(5e-3)


def test_empirical_velocity_examples():
    k = biot_savart()
    ens = _ens([[0.0, 0.0]], [2.0])
    x = np.array([[0.3, -0.4]])
    np.testing.assert_allclose(empirical_velocity(ens, x, k), 2.0 * kernel_apply(k, x, [1, 0]))
    pair = _ens([[-0.5, 0.0], [0.5, 0.0]], [1.0, -1.0])
    mid = empirical_velocity(pair, [0.0, 0.0], k)
    one = 0.5 * kernel_apply(k, [0.5, 0.0], [1, 0])
    np.testing.assert_allclose(mid, 2 * one, rtol=1e-14)


def test_empirical_velocity_matches_generic_kernel():
    g = np.random.default_rng(0)
    pos = g.normal(size=(200, 2))
    wts = g.normal(size=200)
    x = g.normal(size=(30, 2))
    for k in (biot_savart(), power_law(2, 1.5, 0.7)):
        ens = _ens(pos, wts)
        mats = eval_kernel(k, x[:, None, :] - pos[None])
        ref = (mats @ np.array([1.0, 0.0]) * wts[None, :, None]).sum(1) / 200
        if k.name == "power-law":
            ref = (mats[..., 0, 0] * wts).sum(1)[:, None] * np.array([1.0, 0.0]) / 200
        np.testing.assert_allclose(empirical_velocity(ens, x, k), ref, rtol=1e-12, atol=1e-14)


def test_empirical_velocity_matches_quadrature():
    ens = init_from_vorticity(W, 10_000, 6)
    probes = np.array([[0.1, 0.0], [0.25, 0.25], [-0.4, 0.1], [0.0, 0.6], [0.8, -0.3]])
    k = biot_savart()
    vel = empirical_velocity(ens, probes, k)
    # per-vortex contributions give the sampling error of the mean
    for p, v in zip(probes, vel):
        contrib = kernel_apply(k, p - ens.positions, np.stack([ens.intensities,
                                                               0 * ens.intensities], -1))
        se = contrib.std(0, ddof=1) / 100
        assert np.all(np.abs(v - bump_velocity(p)) <= 4 * se + 1e-12)


@given(st.permutations(list(range(12))))
def test_exchangeability(perm):
    ens = init_from_vorticity(W, 12, 7)
    x = np.array([[0.05, 0.1], [0.7, 0.7]])
    k = biot_savart()
    a = empirical_velocity(ens, x, k)
    b = empirical_velocity(ens.permuted(perm), x, k)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)
    # noise follows the ids, so a stepped permuted ensemble is the permuted step
    s1 = step(ens, 1e-3, diag_sin(0.5), k)
    s2 = step(ens.permuted(perm), 1e-3, diag_sin(0.5), k)
    np.testing.assert_allclose(s2.positions, s1.positions[list(perm)], rtol=1e-12, atol=1e-15)


def test_additive_noise_step_is_classical_update():
    ens = init_from_vorticity(W, 40, 8)
    spec = scaled_identity(2, 0.3)
    k = biot_savart()
    dt = 1e-3
    out = step(ens, dt, spec, k)
    from mvsde import rng
    dB = rng.normals(ens.seed, rng.TAG_VORTEX, ens.ids, 0, 0, n=2) * math.sqrt(dt)
    drift = np.zeros((40, 2))
    for i in range(40):
        for j in range(40):
            if i != j:
                drift[i] += ens.intensities[j] * kernel_apply(
                    k, ens.positions[i] - ens.positions[j], [1.0, 0.0])
    expected = ens.positions + drift / 40 * dt + 0.3 * dB
    np.testing.assert_allclose(out.positions, expected, rtol=1e-12, atol=1e-14)


def test_eps_halving_is_negligible():
    probes = np.array([[0.1, 0.1], [0.3, -0.2], [-0.2, 0.0]])
    vals = {}
    for eps in (1e-6, 5e-7):
        reps = []
        for r in range(4):
            ens = init_from_vorticity(W, 500, 9, r, eps)
            ens = run(ens, 1e-3, 10, identity(2), biot_savart(eps))
            reps.append(empirical_velocity(ens, probes, biot_savart(eps)))
        vals[eps] = np.array(reps)
    se = vals[1e-6].std(0, ddof=1) / 2
    assert np.all(np.abs(vals[1e-6] - vals[5e-7]).mean(0) < se)


def test_zero_kernel_chaos_error_is_zero():
    ref = DriftField.zero(2, 1.0)
    rep = chaos_error([10, 100], ref, 0.0, [[0.0, 0.0], [0.2, 0.1]], W, zero_kernel(2), None,
                      2, 10)
    assert all(r["max_error"] == 0.0 for r in rep["rows"])


def test_constant_kernel_chaos_rate():
    k = power_law(2, 1.0, 0.0)
    ref = DriftField.constant(W.integral, 1.0)
    rep = chaos_error([100, 1000, 10_000], ref, 0.0, [[0.0, 0.0]], W, k, None, 20, 11)
    assert rep["slope"] == pytest.approx(-0.5, abs=0.15)


def test_chaos_reference_mismatch_rejected():
    ref = DriftField.zero(2, 1.0).with_values(np.zeros((1, 1, 1, 2)),
                                              meta={"kernel": {"name": "power-law"}})
    with pytest.raises(ValueError):
        chaos_error([10], ref, 0.0, [[0.0, 0.0]], W, biot_savart(), None, 1, 0)


def test_numerical_abort_on_blowup():
    ens = _ens([[0.0, 0.0], [1e-300, 0.0]], [1.0, 1.0])
    with pytest.raises(NumericalAbort, match="pair distance"):
        step(ens, 1.0, None, power_law(2, 1e300, 1.9))


def test_invalid_inputs():
    with pytest.raises(ValueError):
        init_from_vorticity(W, 0, 0)
    with pytest.raises(ValueError):
        step(_ens([[0.0, 0.0]], [1.0]), 0.0, None, biot_savart())


@pytest.mark.filterwarnings("error")
@pytest.mark.parametrize("k", [biot_savart(0.0), biot_savart(1e-8), power_law(2, 1.0, 1.2, 1e-8)],
                         ids=["biot-savart-eps0", "biot-savart", "power-law"])
def test_coincident_vortices_use_the_clamp(k):
    from mvsde.kernels import kernel_apply_regularized
    eps = k.eps
    pos = np.array([[0.0, 0.0], [0.0, 0.0], [3e-9, 4e-9], [1.0, 0.0]])
    wts = np.array([1.0, 2.0, -1.0, 0.5])
    drift, hits = pairwise_drift(_ens(pos, wts), k)
    ref = np.zeros((4, 2))
    for i in range(4):
        for j in range(4):
            if i != j:
                v, _ = kernel_apply_regularized(k, pos[i] - pos[j], [wts[j], 0.0])
                ref[i] += v / 4
    np.testing.assert_allclose(drift, ref, rtol=1e-12)
    assert hits == (2 if eps == 0 else 6)
