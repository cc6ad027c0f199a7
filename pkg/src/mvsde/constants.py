"""Explicit constants of the well-posedness argument and density envelopes.

Notation follows the usual one for this problem: ``A`` is the Stroock
gradient-bound constant, ``kappa``/``kappa_prime`` the Aronson constants, ``q``
the Hoelder exponent in ``(1, d/(d-1))`` and ``C`` the constant of the
transition-density estimate built from them.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

EXPONENT_NOTE = ("C0 uses exp(xi / (2 (q - 1))); proof lines write exp(xi (p - 1) / 2) "
                 "with p the Hoelder conjugate of q. They agree only if p - 1 = 1/(q - 1).")


def sphere_area(d: int) -> float:
    """Surface area of the unit ``(d-1)``-sphere, ``2 pi^(d/2) / Gamma(d/2)``."""
    return 2 * math.pi ** (d / 2) / math.gamma(d / 2)


def q_upper(d: int) -> float:
    return math.inf if d == 1 else d / (d - 1)


def default_q(d: int) -> float:
    """Midpoint of ``(1, d/(d-1))``; ``2`` when ``d = 1`` (unbounded interval)."""
    return 2.0 if d == 1 else 0.5 * (1 + d / (d - 1))


def _check_q(d, q):
    if not 1 < q < q_upper(d):
        raise ValueError(f"q must lie in (1, {q_upper(d)}), got {q}")


def compute_C(d: int, xi: float, A: float, kappa: float, q: float) -> float:
    _check_q(d, q)
    if min(xi, A, kappa) <= 0:
        raise ValueError("xi, A and kappa must be positive")
    pref = 2 * d * d * q / (d - d * q + q)
    ratio = A * kappa * math.pi / min(A, kappa * q)
    first = pref * xi**2 * A * math.exp(A) * kappa ** (1 / q) * ratio ** (d / (2 * q))
    return max(first, max(A, kappa * q))


def c0_coefficients(alpha, C, d, gamma, w_norms, xi, q):
    """``(a, c)`` with ``C0(R) = a R^-gamma + c R^(d - gamma)``."""
    w1, winf = w_norms
    a = alpha * w1
    c = (2 * alpha * C ** (1 + d / 2) * math.pi**d * winf
         / (math.gamma(d / 2) * (d - gamma)) * (1 + math.exp(xi / (2 * (q - 1)))))
    return a, c


def compute_C0(alpha, C, d, gamma, R, w_norms, xi, q) -> float:
    if R < 0:
        raise ValueError("R must be positive")
    if not gamma < d:
        raise ValueError("gamma must be below d")
    a, c = c0_coefficients(alpha, C, d, gamma, w_norms, xi, q)
    # R = 0 with gamma = 0 is the infimum of the gamma = 0 family
    return a * R ** (-gamma) + c * R ** (d - gamma) if R > 0 else (a if gamma == 0 else math.inf)


def optimize_R(alpha, C, d, gamma, w_norms, xi, q):
    """Minimise ``C0`` over ``R``; returns ``(R*, C0(R*))``.

    For ``gamma = 0`` the R-dependent term only grows, the infimum is the
    R-independent term and is approached as ``R -> 0``; ``R* = 0`` is returned.
    """
    a, c = c0_coefficients(alpha, C, d, gamma, w_norms, xi, q)
    if gamma == 0:
        return 0.0, a
    if a <= 0 or c <= 0:
        raise ValueError("need positive alpha and vorticity norms")
    if not (math.isfinite(a) and math.isfinite(c)):
        raise ValueError("C0 coefficients overflow double precision")
    r_star = (a * gamma / (c * (d - gamma))) ** (1 / d)
    return r_star, a * r_star ** (-gamma) + c * r_star ** (d - gamma)


@dataclass(frozen=True)
class Horizon:
    L: float
    T_L: float
    tau_max: float
    tau_contract: float

    def factor(self, C0: float, xi: float, tau: float) -> float:
        return contraction_factor(C0, xi, tau)


def contraction_factor(C0: float, xi: float, tau: float) -> float:
    """``C0 (xi + sqrt(xi)) sqrt(tau)``."""
    return C0 * (xi + math.sqrt(xi)) * math.sqrt(tau)


def admissible_horizon(C0: float, xi: float) -> Horizon:
    """``L = max(C0, 1)``, ``T_L = 1/L^2``, ``tau_max = min(1, 1/(xi+sqrt xi)) T_L``.

    ``tau_contract`` is the largest horizon at which ``contraction_factor``
    stays below one; it is smaller than ``tau_max`` whenever ``C0 >= 1``.
    """
    if C0 <= 0:
        raise ValueError("C0 must be positive")
    if xi < 1:
        raise ValueError("xi must be >= 1")
    L = max(C0, 1.0)
    T_L = 1.0 / L**2
    s = xi + math.sqrt(xi)
    tau_max = min(1.0, 1.0 / s) * T_L
    return Horizon(L, T_L, tau_max, min(tau_max, 1.0 / (C0 * s) ** 2))


# --------------------------------------------------------------------------
# density envelopes


def stroock_envelope(A, t, x, y, j=None):
    """``A / min(1, t^((1+d)/2)) exp(-(A t - |y-x|^2 / (A t))^-)``.

    The bound is the same for every coordinate ``j``; the argument is kept for
    symmetry with the derivative it controls.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("time must be positive")
    diff = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
    d = diff.shape[-1]
    r2 = np.einsum("...i,...i->...", diff, diff)
    z = A * t - r2 / (A * t)
    return A / np.minimum(1.0, t ** ((1 + d) / 2)) * np.exp(np.minimum(z, 0.0))


def aronson_envelope(kappa, t, x, y, kappa_prime=None):
    """Upper Aronson envelope, or ``(lower, upper)`` when ``kappa_prime`` is given."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("time must be positive")
    diff = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
    d = diff.shape[-1]
    r2 = np.einsum("...i,...i->...", diff, diff)
    upper = kappa / t ** (d / 2) * np.exp(-r2 / (kappa * t))
    if kappa_prime is None:
        return upper
    lower = kappa_prime / t ** (d / 2) * np.exp(-r2 / (kappa_prime * t))
    return lower, upper


# --------------------------------------------------------------------------
# fitting A, kappa, kappa' from exact densities

# documented fitting grid: times, scaled radii |y-x|/sqrt(t), directions
FIT_TIMES = np.geomspace(1e-3, 1.0, 13)
FIT_RADII = np.linspace(0.0, 10.0, 101)
FIT_ANGLES = 16


def _fit_points(d, times=FIT_TIMES, radii=FIT_RADII, n_dir=FIT_ANGLES):
    if d == 1:
        dirs = np.array([[1.0], [-1.0]])
    else:
        ang = np.linspace(0, 2 * np.pi, n_dir, endpoint=False)
        dirs = np.zeros((n_dir, d))
        dirs[:, 0] = np.cos(ang)
        dirs[:, 1] = np.sin(ang)
    t = np.asarray(times)[:, None, None]
    r = np.asarray(radii)[None, :, None]
    tt = np.broadcast_to(t, (len(times), len(radii), len(dirs)))
    y = np.sqrt(t[..., None]) * r[..., None] * dirs[None, None]
    return tt.reshape(-1), y.reshape(-1, d)


def _bisect(ok, lo, hi, iters=200, want="min"):
    """Bisect in log space for the min (or max) value where ``ok`` holds."""
    for _ in range(iters):
        mid = math.sqrt(lo * hi)
        if ok(mid) == (want == "min"):
            hi = mid
        else:
            lo = mid
        if hi / lo < 1 + 1e-12:
            break
    return hi if want == "min" else lo


def fit_aronson(density, d, times=FIT_TIMES, radii=FIT_RADII):
    """Fit ``(kappa, kappa_prime)`` to an exact density ``density(x, t, y)``.

    ``kappa`` is the smallest and ``kappa_prime`` the largest value for which
    the envelopes bracket the density on the fitting grid.
    """
    t, y = _fit_points(d, times, radii)
    x = np.zeros(d)
    p = density(x, t, y)
    kappa = _bisect(lambda k: np.all(aronson_envelope(k, t, x, y) >= p * (1 - 1e-12)),
                    1e-6, 1e6, want="min")
    kappa_prime = _bisect(lambda k: np.all(aronson_envelope(k, t, x, y) <= p * (1 + 1e-12)),
                          1e-6, 1e6, want="max")
    return kappa, kappa_prime


def fit_stroock(density_grad, d, times=FIT_TIMES, radii=FIT_RADII):
    """Smallest ``A`` with ``|dp/dx_j| <= stroock_envelope`` on the fitting grid."""
    t, y = _fit_points(d, times, radii)
    x = np.zeros(d)
    g = np.abs(density_grad(x, t, y)).max(axis=-1)
    return _bisect(lambda a: np.all(stroock_envelope(a, t, x, y) >= g * (1 - 1e-12)),
                   1e-6, 1e6, want="min")


def fit_constant_diffusion(spec):
    """``(A, kappa, kappa_prime)`` for a constant-coefficient diffusion."""
    from .diffusion import gaussian_density, gaussian_density_grad_x

    def dens(x, t, y):
        return _gauss_vec(spec, x, t, y, gaussian_density)

    def grad(x, t, y):
        return _gauss_vec(spec, x, t, y, gaussian_density_grad_x)

    kappa, kappa_prime = fit_aronson(dens, spec.d)
    return fit_stroock(grad, spec.d), kappa, kappa_prime


def _gauss_vec(spec, x, t, y, fn):
    # evaluate time by time since the closed forms take scalar t
    out = None
    for tv in np.unique(t):
        sel = t == tv
        v = fn(spec, x, tv, y[sel])
        if out is None:
            out = np.zeros((len(t),) + v.shape[1:])
        out[sel] = v
    return out


# --------------------------------------------------------------------------
# bundle


@dataclass(frozen=True)
class ConstantsBundle:
    d: int
    xi: float
    A: float
    kappa: float
    kappa_prime: float
    q: float
    C: float
    alpha: float
    gamma: float
    R: float
    w1: float
    winf: float
    C0: float
    L: float
    T_L: float
    tau_max: float
    tau: float
    factor: float
    tau_contract: float
    sphere_area: float
    exponent_note: str = EXPONENT_NOTE

    def to_dict(self) -> dict:
        return asdict(self)

    def check(self) -> list[str]:
        """Return the violated structural invariants (empty when consistent)."""
        bad = []
        if not 1 < self.q < q_upper(self.d):
            bad.append("q outside (1, d/(d-1))")
        if self.C < max(self.A, self.kappa * self.q):
            bad.append("C < max(A, kappa q)")
        if self.L < max(self.C0, 1.0):
            bad.append("L < max(C0, 1)")
        if not math.isclose(self.T_L, 1 / self.L**2, rel_tol=1e-12):
            bad.append("T_L != 1/L^2")
        if not self.tau < self.tau_max:
            bad.append("tau >= tau_max")
        return bad


def build_bundle(d, xi, A, kappa, alpha, gamma, w1, winf, q=None, R=None,
                 kappa_prime=None, tau_fraction=0.25) -> ConstantsBundle:
    """Assemble every constant; ``R=None`` selects the minimiser of ``C0``."""
    q = default_q(d) if q is None else q
    if not 0 < tau_fraction < 1:
        raise ValueError("tau_fraction must lie in (0, 1)")
    C = compute_C(d, xi, A, kappa, q)
    if R is None:
        R, C0 = optimize_R(alpha, C, d, gamma, (w1, winf), xi, q)
    else:
        C0 = compute_C0(alpha, C, d, gamma, R, (w1, winf), xi, q)
    if not math.isfinite(C0):
        raise ValueError("C0 is not finite")
    if C0 > 0:
        hz = admissible_horizon(C0, xi)
    else:
        # kernel-free case: every L >= 1 works and K(b) = 0 contracts trivially
        tau_max = min(1.0, 1.0 / (xi + math.sqrt(xi)))
        hz = Horizon(1.0, 1.0, tau_max, tau_max)
    tau = tau_fraction * hz.tau_max
    return ConstantsBundle(
        d=d, xi=xi, A=A, kappa=kappa,
        kappa_prime=float("nan") if kappa_prime is None else kappa_prime,
        q=q, C=C, alpha=alpha, gamma=gamma, R=R, w1=w1, winf=winf, C0=C0,
        L=hz.L, T_L=hz.T_L, tau_max=hz.tau_max, tau=tau,
        factor=contraction_factor(C0, xi, tau), tau_contract=hz.tau_contract,
        sphere_area=sphere_area(d))


__all__ = [
    "ConstantsBundle", "Horizon", "admissible_horizon", "aronson_envelope",
    "build_bundle", "c0_coefficients", "compute_C", "compute_C0",
    "contraction_factor", "default_q", "fit_aronson", "fit_constant_diffusion",
    "fit_stroock", "optimize_R", "sphere_area", "stroock_envelope",
]
