"""Singular interaction kernels and their power-law envelopes.

A kernel maps a nonzero displacement ``x`` to a ``d x d`` matrix ``K(x)`` with
``|K(x)| <= alpha / |x|**gamma`` in the operator norm.  Two built-ins:

``"biot-savart"``
    d = 2 only.  First column is ``(-x2, x1) / (2 pi |x|^2)``, second column is
    zero, so ``K(x) @ (W, 0)`` is the velocity induced by scalar vorticity ``W``
    carried in the first component.  ``alpha = 1 / (2 pi)``, ``gamma = 1``.
``"power-law"``
    ``alpha |x|^-gamma`` times the identity.  With ``gamma = 0`` it is constant.
``"zero"``
    Identically zero (the kernel-free case).

All functions are vectorised over leading axes of ``x``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BUILTINS = ("biot-savart", "power-law", "zero")

# below this norm a displacement is treated as a collision even when eps == 0
SAFE_NORM = 1e-300
_SMALL_R = 1e-150  # below this r * r loses precision or underflows


class SingularPointError(ValueError):
    """Kernel evaluated at (or within the regularisation radius of) the origin."""


@dataclass(frozen=True)
class KernelSpec:
    name: str
    d: int
    alpha: float
    gamma: float
    eps: float = 0.0

    def __post_init__(self):
        if self.name not in BUILTINS:
            raise ValueError(f"unknown kernel {self.name!r}; choose from {BUILTINS}")
        if self.d < 1:
            raise ValueError("dimension must be positive")
        if not 0.0 <= self.gamma < self.d:
            raise ValueError(f"gamma must lie in [0, d), got {self.gamma}")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")
        if self.name == "biot-savart":
            if self.d != 2:
                raise ValueError("the Biot-Savart kernel is two-dimensional")
            if not (np.isclose(self.alpha, 1 / (2 * np.pi)) and self.gamma == 1.0):
                raise ValueError("Biot-Savart envelope is fixed at alpha=1/(2 pi), gamma=1")

    def with_eps(self, eps: float) -> "KernelSpec":
        return KernelSpec(self.name, self.d, self.alpha, self.gamma, eps)

    def to_dict(self) -> dict:
        return {"name": self.name, "d": self.d, "alpha": self.alpha,
                "gamma": self.gamma, "eps": self.eps}


def biot_savart(eps: float = 0.0) -> KernelSpec:
    return KernelSpec("biot-savart", 2, 1 / (2 * np.pi), 1.0, eps)


def power_law(d: int, alpha: float, gamma: float, eps: float = 0.0) -> KernelSpec:
    return KernelSpec("power-law", d, alpha, gamma, eps)


def zero_kernel(d: int) -> KernelSpec:
    return KernelSpec("zero", d, 0.0, 0.0)


def make_kernel(name: str, d: int = 2, alpha: float | None = None,
                gamma: float | None = None, eps: float = 0.0) -> KernelSpec:
    """Build a kernel from config values; Biot-Savart ignores alpha/gamma."""
    if name == "biot-savart":
        return biot_savart(eps)
    if name == "zero":
        return zero_kernel(d)
    if alpha is None or gamma is None:
        raise ValueError("power-law kernel needs alpha and gamma")
    return power_law(d, alpha, gamma, eps)


def _norms(x):
    return np.sqrt(np.einsum("...i,...i->...", x, x))


def _check(spec: KernelSpec, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != spec.d:
        raise ValueError(f"expected trailing dimension {spec.d}, got {x.shape}")
    r = _norms(x)
    bad = r < max(spec.eps, SAFE_NORM)
    if np.any(bad):
        raise SingularPointError(
            f"{int(bad.sum())} point(s) within {max(spec.eps, SAFE_NORM):g} of the "
            "singularity; regularise or resample")
    return x, r


def _rotated(x, r, scale):
    """``scale * (-x2, x1) / (2 pi r^2)``, normalising first when ``r^2`` would underflow."""
    if np.any(r < _SMALL_R):
        f = scale / (2 * np.pi * r)
        return -(x[..., 1] / r) * f, (x[..., 0] / r) * f
    f = scale / (2 * np.pi * r * r)
    return -x[..., 1] * f, x[..., 0] * f


def _matrix(spec: KernelSpec, x, r):
    d = spec.d
    out = np.zeros(x.shape[:-1] + (d, d))
    if spec.name == "biot-savart":
        out[..., 0, 0], out[..., 1, 0] = _rotated(x, r, 1.0)
    elif spec.name == "power-law":
        out[...] = (spec.alpha * r ** (-spec.gamma))[..., None, None] * np.eye(d)
    return out


def _apply(spec: KernelSpec, x, r, v):
    if spec.name == "biot-savart":
        return np.stack(_rotated(x, r, v[..., 0]), axis=-1)
    if spec.name == "power-law":
        return (spec.alpha * r ** (-spec.gamma))[..., None] * v
    return np.zeros(np.broadcast_shapes(x.shape, np.shape(v)))


def eval_kernel(spec: KernelSpec, x):
    """``K(x)`` as an array of shape ``x.shape + (d,)``."""
    x, r = _check(spec, x)
    return _matrix(spec, x, r)


def kernel_apply(spec: KernelSpec, x, v):
    """``K(x) @ v`` without forming the matrices."""
    x, r = _check(spec, x)
    return _apply(spec, x, r, np.asarray(v, dtype=float))


def envelope(spec: KernelSpec, x):
    """``alpha / |x|**gamma``."""
    x = np.asarray(x, dtype=float)
    r = _norms(x)
    if np.any(r < SAFE_NORM):
        raise SingularPointError("envelope is undefined at the origin")
    return spec.alpha * r ** (-spec.gamma)


def split_cutoff(spec: KernelSpec, R: float, x):
    """Return ``(K 1_{|x| <= R}, K 1_{|x| > R})``; the ball is closed."""
    if R <= 0:
        raise ValueError("cutoff radius must be positive")
    x, r = _check(spec, x)
    k = _matrix(spec, x, r)
    inside = (r <= R)[..., None, None]
    return np.where(inside, k, 0.0), np.where(inside, 0.0, k)


def regularize(spec: KernelSpec, x):
    """Clamp displacements shorter than ``spec.eps`` to length ``eps``.

    Returns the clamped displacements and a boolean mask of clamped entries.
    Exact zeros are pushed along the first axis.
    """
    x = np.asarray(x, dtype=float)
    r = _norms(x)
    floor = max(spec.eps, SAFE_NORM)
    hit = r < floor
    if not np.any(hit):
        return x, hit
    x = x.copy()
    rh = r[hit]
    direction = np.zeros((rh.size, spec.d))
    direction[:, 0] = 1.0
    nz = rh > 0
    direction[nz] = x[hit][nz] / rh[nz, None]
    x[hit] = direction * floor
    return x, hit


def kernel_apply_regularized(spec: KernelSpec, x, v, R: float | None = None,
                             part: str = "full"):
    """``K(x) @ v`` with the eps-clamp applied; returns ``(values, hits)``.

    ``part`` selects ``"full"``, ``"ball"`` (``|x| <= R``) or ``"outside"``.
    The cutoff test uses the unclamped distance.
    """
    x = np.asarray(x, dtype=float)
    r_raw = _norms(x)
    xc, hit = regularize(spec, x)
    # clamped vectors have norm eps; recomputing it could underflow
    r = np.where(hit, max(spec.eps, SAFE_NORM), r_raw)
    vals = _apply(spec, xc, r, np.asarray(v, dtype=float))
    if part != "full":
        if R is None or R <= 0:
            raise ValueError("cutoff radius must be positive")
        keep = r_raw <= R if part == "ball" else r_raw > R
        vals = np.where(keep[..., None], vals, 0.0)
    return vals, hit


def operator_norm(k):
    """Spectral norm of a stack of matrices."""
    return np.linalg.norm(k, ord=2, axis=(-2, -1))


def kernel_norm_regularized(spec: KernelSpec, x):
    """Operator norm of the eps-clamped kernel, closed form for the built-ins."""
    x = np.asarray(x, dtype=float)
    r = np.maximum(_norms(x), max(spec.eps, SAFE_NORM))
    if spec.name == "biot-savart":
        return 1.0 / (2 * np.pi * r)
    if spec.name == "power-law":
        return spec.alpha * r ** (-spec.gamma)
    return np.zeros_like(r)
