"""Histogram transition densities and the bounds and identities they must satisfy."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .constants import ConstantsBundle, _bisect
from .diffusion import (DiffusionSpec, DriftField, PathEnsemble, g_inner, grad_g,
                        simulate_paths)
from .girsanov import compute_weights


@dataclass(frozen=True, eq=False)
class DensityEstimate:
    """Histogram of ``X_t`` from a single start point.

    ``mass`` and ``density`` have one entry per bin; ``stderr`` is the
    standard error of ``density``.  ``out_mass`` is the fraction of paths that
    landed outside the bin box, so ``total_mass + out_mass == 1`` for
    unweighted estimates.
    """

    t: float
    edges: tuple
    mass: np.ndarray
    density: np.ndarray
    stderr: np.ndarray
    total_mass: float
    out_mass: float
    n_paths: int
    weighted: bool = False

    @property
    def d(self) -> int:
        return len(self.edges)

    @property
    def volumes(self):
        widths = [np.diff(e) for e in self.edges]
        return np.prod(np.stack(np.meshgrid(*widths, indexing="ij")), axis=0)

    def bin_boxes(self):
        """Lower and upper corners of every bin, each of shape ``bins + (d,)``."""
        lo = np.stack(np.meshgrid(*[e[:-1] for e in self.edges], indexing="ij"), -1)
        hi = np.stack(np.meshgrid(*[e[1:] for e in self.edges], indexing="ij"), -1)
        return lo, hi

    def centers(self):
        lo, hi = self.bin_boxes()
        return 0.5 * (lo + hi)

    def rows(self, bound=None):
        """Long-format records ``(t, y1..yd, p_hat, stderr, bound)``."""
        c = self.centers().reshape(-1, self.d)
        b = np.full(len(c), np.nan) if bound is None else np.ravel(bound)
        return [[self.t, *map(float, y), float(p), float(s), float(bb)]
                for y, p, s, bb in zip(c, self.density.ravel(), self.stderr.ravel(), b)]


def make_edges(center, half_width, bins, d=None):
    """Equal-width edges on the cube ``center +- half_width``."""
    center = np.atleast_1d(np.asarray(center, dtype=float))
    d = center.size if d is None else d
    center = np.broadcast_to(center, (d,))
    hw = np.broadcast_to(np.asarray(half_width, dtype=float), (d,))
    nb = np.broadcast_to(np.asarray(bins, dtype=int), (d,))
    return tuple(np.linspace(c - h, c + h, n + 1) for c, h, n in zip(center, hw, nb))


def estimate_density(ensemble: PathEnsemble, t: float, edges, weights=None) -> DensityEstimate:
    """Histogram density of ``X_t``; ``weights`` turns it into a reweighted estimate."""
    if len(ensemble.starts) != 1:
        raise ValueError("density estimation needs an ensemble with a single start point")
    k = ensemble.node(t)
    x = ensemble.positions[:, k]
    keep = ~ensemble.aborted
    x = x[keep]
    n = len(x)
    edges = tuple(np.asarray(e, dtype=float) for e in edges)
    if len(edges) != ensemble.d:
        raise ValueError("need one edge array per dimension")
    est = DensityEstimate(float(ensemble.times[k]), edges, None, None, None, 0, 0, n)
    vol = est.volumes
    if weights is None:
        counts, _ = np.histogramdd(x, bins=edges)
        mass = counts / n
        se = np.sqrt(mass * (1 - mass) / n) / vol
        total = float(counts.sum() / n)
        out = float((n - counts.sum()) / n)
    else:
        u = np.asarray(weights, dtype=float)[keep]
        mass, _ = np.histogramdd(x, bins=edges, weights=u / n)
        sq, _ = np.histogramdd(x, bins=edges, weights=u**2 / n)
        # per-bin variance of U 1_bin across paths
        se = np.sqrt(np.maximum(sq - mass**2, 0.0) / max(n - 1, 1)) / vol
        total = float(mass.sum())
        out = float(u.mean() - total)
    return DensityEstimate(est.t, edges, mass, mass / vol, se, total, out, n,
                           weights is not None)


# --------------------------------------------------------------------------
# bin averages


def gaussian_bin_average(scale, lo, hi, center):
    """Average over boxes of ``prod_i exp(-(y_i - c_i)^2 / scale)``.

    ``lo`` and ``hi`` have shape ``(..., d)``; ``scale`` broadcasts against
    them (scalar or per-axis).
    """
    s = np.sqrt(scale)
    a = (np.asarray(lo) - center) / s
    b = (np.asarray(hi) - center) / s
    avg = 0.5 * np.sqrt(np.pi) * s * (erf(b) - erf(a)) / (np.asarray(hi) - np.asarray(lo))
    return np.prod(avg, axis=-1)


def envelope_bin_average(k, t, lo, hi, x_start):
    """Bin average of ``k t^{-d/2} exp(-|y - x|^2 / (k t))``."""
    d = np.shape(lo)[-1]
    return k * t ** (-d / 2) * gaussian_bin_average(k * t, lo, hi, x_start)


def callable_bin_average(fn, lo, hi, order: int = 4):
    """Tensor Gauss-Legendre average of ``fn(y)`` (``y`` of shape (..., d)) over boxes."""
    nodes, weights = np.polynomial.legendre.leggauss(order)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    d = lo.shape[-1]
    grids = np.stack(np.meshgrid(*([nodes] * d), indexing="ij"), -1).reshape(-1, d)
    wts = np.prod(np.stack(np.meshgrid(*([weights] * d), indexing="ij"), -1)
                  .reshape(-1, d), axis=-1) / 2**d
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    pts = mid[..., None, :] + half[..., None, :] * grids
    vals = np.asarray(fn(pts), dtype=float)
    return (vals * wts).sum(-1)


def _region_mask(est: DensityEstimate, frac: float):
    """Bins carrying the top ``frac`` of the observed mass."""
    m = est.mass.ravel()
    order = np.argsort(-m, kind="stable")
    cum = np.cumsum(m[order])
    total = m.sum()
    keep = np.zeros(m.size, dtype=bool)
    if total <= 0:
        return keep.reshape(est.mass.shape)
    n_keep = int(np.searchsorted(cum, frac * total, side="left")) + 1
    keep[order[:n_keep]] = True
    return keep.reshape(est.mass.shape)


# --------------------------------------------------------------------------
# Aronson


def verify_aronson(est: DensityEstimate, kappa: float, kappa_prime: float, x_start,
                   region: float = 0.99, nsigma: float = 3.0) -> dict:
    """Two-sided envelope check per bin.

    The upper side is checked in every bin, the lower side in the bins that
    carry the central ``region`` fraction of the mass.
    """
    if not kappa > kappa_prime > 0:
        raise ValueError("need kappa > kappa' > 0")
    lo, hi = est.bin_boxes()
    x = np.asarray(x_start, dtype=float)
    upper = envelope_bin_average(kappa, est.t, lo, hi, x)
    lower = envelope_bin_average(kappa_prime, est.t, lo, hi, x)
    tol = nsigma * est.stderr
    up_bad = est.density > upper + tol
    mask = _region_mask(est, region)
    low_bad = mask & (est.density < lower - tol)
    return {
        "t": est.t, "kappa": kappa, "kappa_prime": kappa_prime,
        "bins": int(est.density.size), "region_bins": int(mask.sum()),
        "upper_violations": np.argwhere(up_bad).tolist(),
        "lower_violations": np.argwhere(low_bad).tolist(),
        "upper_min_slack": float((upper + tol - est.density).min()),
        "lower_min_slack": float((est.density - lower + tol)[mask].min()) if mask.any() else 0.0,
        "pass": bool(not up_bad.any() and not low_bad.any()),
    }


def fit_aronson_from_estimates(estimates, x_start, region: float = 0.99):
    """Smallest ``kappa`` and largest ``kappa'`` bracketing histogram densities.

    The upper fit uses every bin, the lower fit the central ``region`` bins.
    This is an empirical stand-in for coefficients without a closed-form
    density.
    """
    x = np.asarray(x_start, dtype=float)
    data = []
    for est in estimates:
        lo, hi = est.bin_boxes()
        data.append((est, lo, hi, _region_mask(est, region)))

    def upper_ok(k):
        return all(np.all(envelope_bin_average(k, e.t, lo, hi, x) >= e.density)
                   for e, lo, hi, _ in data)

    def lower_ok(k):
        return all(np.all(envelope_bin_average(k, e.t, lo, hi, x)[m] <= e.density[m])
                   for e, lo, hi, m in data)

    return _bisect(upper_ok, 1e-6, 1e6, want="min"), _bisect(lower_ok, 1e-8, 1e6, want="max")


# --------------------------------------------------------------------------
# the drift-perturbed density bound


def correction_coefficient(bundle: ConstantsBundle, b_norm: float, t: float) -> float:
    """``|b| sqrt(t) exp(xi |b|^2 t / (2 (q - 1)))``."""
    return b_norm * math.sqrt(t) * math.exp(bundle.xi * b_norm**2 * t / (2 * (bundle.q - 1)))


def perturbed_upper_bound(p_values, bundle: ConstantsBundle, b_norm: float, t: float, x, y):
    """Pointwise bound ``p + coef * C t^{-d/2} exp(-|y - x|^2 / (C t))``."""
    if not 0 < t <= 1:
        raise ValueError("t must lie in (0, 1]")
    diff = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
    r2 = np.einsum("...i,...i->...", diff, diff)
    d = diff.shape[-1]
    corr = (correction_coefficient(bundle, b_norm, t) * bundle.C * t ** (-d / 2)
            * np.exp(-r2 / (bundle.C * t)))
    return np.asarray(p_values, dtype=float) + corr, corr


def verify_density_bound_pointwise(p_b, p, bundle: ConstantsBundle, b_norm: float, t: float,
                               x_start, y) -> dict:
    """Exact check ``p_b(y) <= rhs(y)`` for closed-form densities, zero tolerance."""
    y = np.asarray(y, dtype=float)
    lhs = np.asarray(p_b(y), dtype=float)
    rhs, corr = perturbed_upper_bound(p(y), bundle, b_norm, t, x_start, y)
    slack = rhs - lhs
    k = np.unravel_index(np.argmin(slack), slack.shape)
    return {"t": t, "b_norm": b_norm, "C": bundle.C, "points": int(lhs.size),
            "violations": int((slack < 0).sum()), "min_slack": float(slack[k]),
            "min_slack_at": y[k].tolist(), "correction_nonnegative": bool(np.all(corr >= 0)),
            "pass": bool(np.all(slack >= 0) and np.all(corr >= 0))}


def verify_theorem31(p_b_est: DensityEstimate, p_ref, bundle: ConstantsBundle,
                     b_norm: float, t: float, x_start, nsigma: float = 3.0) -> dict:
    """Per-bin check of a histogram ``p_b`` against the bound.

    ``p_ref`` is either a callable ``p(y)`` (bin-averaged by quadrature) or a
    :class:`DensityEstimate` on the same bins, whose error then enters the
    tolerance.
    """
    if not math.isclose(p_b_est.t, t, rel_tol=1e-9):
        raise ValueError("estimate time does not match t")
    lo, hi = p_b_est.bin_boxes()
    x = np.asarray(x_start, dtype=float)
    if isinstance(p_ref, DensityEstimate):
        if not all(np.array_equal(a, b) for a, b in zip(p_ref.edges, p_b_est.edges)):
            raise ValueError("reference density uses different bins")
        p_avg = p_ref.density
        se = np.sqrt(p_b_est.stderr**2 + p_ref.stderr**2)
    else:
        p_avg = callable_bin_average(p_ref, lo, hi)
        se = p_b_est.stderr
    coef = correction_coefficient(bundle, b_norm, t)
    corr = coef * envelope_bin_average(bundle.C, t, lo, hi, x)
    rhs = p_avg + corr
    slack = rhs + nsigma * se - p_b_est.density
    k = np.unravel_index(np.argmin(slack), slack.shape)
    return {"t": t, "b_norm": b_norm, "C": bundle.C, "bins": int(slack.size),
            "violations": np.argwhere(slack < 0).tolist(), "min_slack": float(slack[k]),
            "min_slack_bin": [int(i) for i in k],
            "min_slack_center": p_b_est.centers()[k].tolist(),
            "correction_nonnegative": bool(np.all(corr >= 0)),
            "pass": bool(np.all(slack >= 0) and np.all(corr >= 0))}


# --------------------------------------------------------------------------
# the representation formula


def _diag_metric(spec: DiffusionSpec):
    g = spec.metric(0.0, np.zeros(spec.d))
    if not np.allclose(g, np.diag(np.diag(g))):
        return None
    return np.diag(g)


def _p_and_grad(spec, x, s, y, half):
    """Density of ``y`` given ``x`` after time ``s`` and its ``x``-gradient.

    With ``half`` set the values are averaged over the box ``y +- half``.
    ``x`` has shape ``(n, d)``, ``y`` ``(m, d)``; outputs ``(n, m)`` and
    ``(n, m, d)``.
    """
    diff = y[None, :, :] - x[:, None, :]
    if half is None:
        g = spec.metric(0.0, np.zeros(spec.d))
        prec = np.linalg.inv(s * g)
        q = np.einsum("...i,ij,...j->...", diff, prec, diff)
        p = np.exp(-0.5 * q) / np.sqrt((2 * np.pi) ** spec.d * np.linalg.det(s * g))
        return p, p[..., None] * (diff @ prec.T)
    var = s * _diag_metric(spec)
    sd = np.sqrt(2 * var)
    a = (diff - half) / sd
    b = (diff + half) / sd
    w = 2 * half
    # per-axis average of N(y_i; x_i, var_i) over the interval and its x-derivative
    f = 0.5 * (erf(b) - erf(a)) / w
    df = (np.exp(-a**2) - np.exp(-b**2)) / (np.sqrt(np.pi) * sd) / w
    p = np.prod(f, axis=-1)
    grad = np.empty(diff.shape)
    for i in range(spec.d):
        others = np.prod(np.delete(f, i, axis=-1), axis=-1)
        grad[..., i] = df[..., i] * others
    return p, grad


def _is_constant_field(b: DriftField) -> bool:
    return b.values.shape[0] == 1 and all(n == 1 for n in b.nodes)


def last_cell_bound(bundle: ConstantsBundle, b_norm: float, t: float, dt: float) -> float:
    """Envelope bound on the last quadrature cell ``[t - dt, t]``.

    Uses the gradient envelope integrated in closed form (it decays like
    ``(t - s)^{-1/2}`` after spatial integration) and the density bound for
    the law at time ``s``.
    """
    d, A = bundle.d, bundle.A
    s0 = t - dt
    if s0 <= 0:
        return math.inf
    sup_density = (bundle.kappa + correction_coefficient(bundle, b_norm, t) * bundle.C) \
        * s0 ** (-d / 2)
    grad_mass = A ** (1 + d / 2) * math.pi ** (d / 2) * math.exp(A * dt) * 2 * math.sqrt(dt)
    return b_norm * sup_density * grad_mass


def verify_prop21(x_start, y_targets, t: float, b: DriftField, spec: DiffusionSpec,
                  paths: int, steps: int, seed: int, bundle: ConstantsBundle | None = None,
                  bin_width: float | None = None, nsigma: float = 4.0,
                  batch: int = 20000) -> dict:
    """Compare ``p_b(x, t, y)`` with ``p + int_0^t E[U_s <b, grad^g p>_g] ds``.

    The left side is closed form for a constant drift and a histogram of
    direct ``X^b`` paths otherwise (then ``bin_width`` is required).  The
    right side uses zero-drift paths, their weights, and a left Riemann sum
    on the simulation grid.  With ``bin_width`` both sides are averaged over
    the box of that width around each target.
    """
    if not spec.constant:
        raise ValueError("the representation check needs a constant diffusion "
                         "with a closed-form reference density")
    if not 0 < t <= 1:
        raise ValueError("t must lie in (0, 1]")
    x = np.asarray(x_start, dtype=float).reshape(spec.d)
    y = np.atleast_2d(np.asarray(y_targets, dtype=float))
    half = None
    if bin_width is not None:
        if _diag_metric(spec) is None:
            raise ValueError("bin averaging needs a diagonal metric")
        half = 0.5 * bin_width
    constant_b = _is_constant_field(b)
    if not constant_b and half is None:
        raise ValueError("a varying drift needs bin_width for the histogram side")

    # left side
    if constant_b:
        v = b.values.reshape(-1)[: spec.d]
        p_shift, _ = _p_and_grad(spec, (x + v * t)[None], t, y, half)
        lhs = p_shift[0]
        lhs_se = np.zeros(len(y))
    else:
        ens_b = simulate_paths(spec, b, x, t, steps, paths, seed + 1)
        xt = ens_b.positions[:, -1]
        inside = np.all(np.abs(xt[:, None, :] - y[None]) <= half, axis=-1)
        frac = inside.mean(axis=0)
        vol = bin_width ** spec.d
        lhs = frac / vol
        lhs_se = np.sqrt(frac * (1 - frac) / paths) / vol

    # right side: accumulate per-path integrals batch by batch
    dt = t / steps
    p0, _ = _p_and_grad(spec, x[None], t, y, half)
    totals = np.zeros((paths, len(y)))
    last = np.zeros((paths, len(y)))
    for off in range(0, paths, batch):
        m = min(batch, paths - off)
        ens = simulate_paths(spec, None, x, t, steps, m, seed, path_offset=off)
        wts = compute_weights(ens, b, spec).weights
        for k in range(steps):
            s = ens.times[k]
            pos = ens.positions[:, k]
            _, grad = _p_and_grad(spec, pos, t - s, y, half)
            bv = b(s, pos)
            gg = grad_g(spec, s, pos[:, None, :], grad)
            integrand = wts[:, k, None] * g_inner(spec, s, pos[:, None, :], bv[:, None, :], gg)
            totals[off:off + m] += dt * integrand
            if k == steps - 1:
                last[off:off + m] = dt * integrand
    rhs = p0[0] + totals.mean(axis=0)
    rhs_se = totals.std(axis=0, ddof=1) / math.sqrt(paths)
    comb = np.sqrt(lhs_se**2 + rhs_se**2)
    diff = lhs - rhs
    bound = None
    if bundle is not None:
        bound = last_cell_bound(bundle, b.sup_norm, t, dt)
    records = []
    for j in range(len(y)):
        rec = {"y": y[j].tolist(), "lhs": float(lhs[j]), "lhs_stderr": float(lhs_se[j]),
               "rhs": float(rhs[j]), "rhs_stderr": float(rhs_se[j]), "p": float(p0[0, j]),
               "difference": float(diff[j]),
               "last_cell": float(last[:, j].mean()),
               "last_cell_stderr": float(last[:, j].std(ddof=1) / math.sqrt(paths)),
               "pass": bool(abs(diff[j]) <= nsigma * comb[j])}
        if bound is not None:
            rec["last_cell_bound"] = bound
            rec["last_cell_within_bound"] = bool(abs(rec["last_cell"]) <= bound)
        records.append(rec)
    return {"t": t, "x": x.tolist(), "steps": steps, "paths": paths,
            "lhs_mode": "closed-form" if constant_b else "histogram",
            "bin_width": bin_width, "targets": records,
            "pass": all(r["pass"] for r in records)}
