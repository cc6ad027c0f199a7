import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mvsde.kernels import (SingularPointError, biot_savart, envelope, eval_kernel,
                           kernel_apply, kernel_apply_regularized, kernel_norm_regularized,
                           make_kernel, operator_norm, power_law, regularize, split_cutoff,
                           zero_kernel)

coord = st.floats(-50, 50, allow_nan=False)
point2 = st.tuples(coord, coord).filter(lambda p: math.hypot(*p) > 1e-6)


def test_identity_power_law_is_identity():
    k = power_law(2, 1.0, 0.0)
    np.testing.assert_array_equal(eval_kernel(k, [0.3, -7.0]), np.eye(2))


@pytest.mark.parametrize("x,expected", [([1.0, 0.0], [0.0, 1 / (2 * math.pi)]),
                                        ([0.0, 2.0], [-1 / (4 * math.pi), 0.0])])
def test_biot_savart_action_on_first_component(x, expected):
    k = biot_savart()
    W = 2.5
    np.testing.assert_allclose(eval_kernel(k, x) @ [W, 0.0], np.array(expected) * W,
                               rtol=1e-15, atol=1e-18)
    np.testing.assert_allclose(kernel_apply(k, x, [W, 0.0]), np.array(expected) * W,
                               rtol=1e-15, atol=1e-18)
    # second column is zero by construction
    np.testing.assert_array_equal(eval_kernel(k, x)[:, 1], 0.0)


def test_split_cutoff_examples():
    k = biot_savart()
    ball, out = split_cutoff(k, 1.0, [2.0, 0.0])
    assert not ball.any() and out.any()
    ball, out = split_cutoff(k, 1.0, [0.5, 0.0])
    assert ball.any() and not out.any()
    ball, out = split_cutoff(k, 1.0, [0.6, 0.8])  # on the sphere: closed ball
    assert ball.any() and not out.any()


@pytest.mark.parametrize("spec,x,expected", [
    (biot_savart(), [0.6, 0.8], 1 / (2 * math.pi)),
    (power_law(2, 3.0, 0.0), [4.0, -1.0], 3.0),
    (power_law(2, 1.0, 1.0), [0.06, 0.08], 10.0),
])
def test_envelope_examples(spec, x, expected):
    assert envelope(spec, x) == pytest.approx(expected, rel=1e-14)


def test_singular_points_rejected():
    with pytest.raises(SingularPointError):
        eval_kernel(biot_savart(), [0.0, 0.0])
    with pytest.raises(SingularPointError):
        eval_kernel(biot_savart(eps=0.1), [0.05, 0.0])
    with pytest.raises(SingularPointError):
        envelope(power_law(2, 1.0, 1.0), [0.0, 0.0])


def test_parameter_validation():
    with pytest.raises(ValueError):
        power_law(2, 1.0, 2.0)  # gamma must be < d
    with pytest.raises(ValueError):
        power_law(2, -1.0, 1.0)
    with pytest.raises(ValueError):
        make_kernel("nope", 2)
    with pytest.raises(ValueError):
        split_cutoff(biot_savart(), 0.0, [1.0, 0.0])


@given(point2, st.floats(1e-3, 100))
def test_split_cutoff_sums_to_kernel(x, R):
    k = biot_savart()
    ball, out = split_cutoff(k, R, x)
    np.testing.assert_array_equal(ball + out, eval_kernel(k, x))
    assert (not ball.any()) or (not out.any())


@pytest.mark.parametrize("spec", [biot_savart(), power_law(2, 2.0, 1.5), power_law(3, 0.7, 2.2),
                                  power_law(2, 1.0, 0.0), zero_kernel(2)],
                         ids=lambda s: f"{s.name}-{s.d}")
def test_envelope_dominates_operator_norm(spec):
    g = np.random.default_rng(0)
    x = g.normal(size=(10_000, spec.d)) * np.exp(g.uniform(-8, 4, size=(10_000, 1)))
    norms = operator_norm(eval_kernel(spec, x))
    assert np.all(norms <= envelope(spec, x) * (1 + 1e-12))


def test_biot_savart_envelope_is_sharp():
    x = np.array([[3.0, -4.0], [1e-3, 2e-3]])
    np.testing.assert_allclose(operator_norm(eval_kernel(biot_savart(), x)),
                               envelope(biot_savart(), x), rtol=1e-13)


def test_biot_savart_divergence_free():
    g = np.random.default_rng(1)
    x = g.uniform(-3, 3, size=(500, 2))
    x = x[np.hypot(*x.T) > 0.2]
    h = 1e-5
    k = biot_savart()

    def u(p):
        return kernel_apply(k, p, [1.0, 0.0])

    e1, e2 = np.array([h, 0.0]), np.array([0.0, h])
    div = (u(x + e1)[:, 0] - u(x - e1)[:, 0] + u(x + e2)[:, 1] - u(x - e2)[:, 1]) / (2 * h)
    scale = envelope(k, x) / np.hypot(*x.T)
    assert np.all(np.abs(div) <= 1e-6 * scale)


@given(point2)
def test_power_law_norm_formula(x):
    spec = power_law(2, 1.3, 0.8)
    assert operator_norm(eval_kernel(spec, x)) == pytest.approx(
        1.3 * math.hypot(*x) ** -0.8, rel=1e-12)


def test_regularize_clamps_to_eps():
    spec = biot_savart(eps=0.1)
    x = np.array([[0.03, 0.04], [0.0, 0.0], [1.0, 1.0]])
    xc, hit = regularize(spec, x)
    np.testing.assert_array_equal(hit, [True, True, False])
    np.testing.assert_allclose(xc[0], [0.06, 0.08])
    np.testing.assert_allclose(xc[1], [0.1, 0.0])
    np.testing.assert_array_equal(xc[2], x[2])


def test_regularized_application_and_norm():
    spec = biot_savart(eps=0.1)
    x = np.array([[0.03, 0.04], [2.0, 0.0]])
    vals, hit = kernel_apply_regularized(spec, x, [1.0, 0.0])
    assert hit.tolist() == [True, False]
    np.testing.assert_allclose(vals[0], kernel_apply(biot_savart(), [0.06, 0.08], [1.0, 0.0]))
    np.testing.assert_allclose(kernel_norm_regularized(spec, x),
                               [1 / (2 * math.pi * 0.1), 1 / (4 * math.pi)])


@given(point2, st.floats(1e-2, 10))
def test_regularized_parts_add_up(x, R):
    spec = biot_savart(eps=1e-3)
    full, _ = kernel_apply_regularized(spec, x, [1.0, 0.0])
    ball, _ = kernel_apply_regularized(spec, x, [1.0, 0.0], R, "ball")
    out, _ = kernel_apply_regularized(spec, x, [1.0, 0.0], R, "outside")
    np.testing.assert_array_equal(ball + out, full)
