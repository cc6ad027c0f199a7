"""Monte Carlo evaluation of the mean-field operator and its Picard iteration.

The operator maps a drift ``b`` to

    K(b)(t, x) = int E^y[ K(x - X^b_t) ] w(y) dy,

estimated by drawing start points ``y_i`` uniformly on the support box of
``w``, running ``X^b`` from each, and averaging ``K(x - X^b_t) w(y_i) / q(y_i)``.
Fixing the seed fixes both the ``y_i`` and every Brownian increment, so two
evaluations at different drifts share their randomness.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate

from . import rng
from .constants import ConstantsBundle, sphere_area
from .diffusion import DiffusionSpec, DriftField, eval_drift, grid_points, simulate_paths
from .kernels import KernelSpec, kernel_apply_regularized, kernel_norm_regularized

SINGULAR_WARN_RATE = 0.01


class DivergenceError(RuntimeError):
    """Picard differences grew for three consecutive iterations."""

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


# --------------------------------------------------------------------------
# vorticity


@dataclass(frozen=True, eq=False)
class VorticitySpec:
    """Initial vorticity ``w`` supported in a box, sampled uniformly there.

    ``fn`` maps ``(n, d)`` points to ``(n, d)`` values.  ``integral`` is
    ``int w dy`` when known in closed form.
    """

    fn: Callable = field(repr=False)
    lo: np.ndarray
    hi: np.ndarray
    w1: float
    winf: float
    name: str = "custom"
    params: dict = field(default_factory=dict)
    integral: np.ndarray | None = None

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1 or np.any(hi <= lo):
            raise ValueError("support box must satisfy lo < hi on every axis")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        self._check_support()

    @property
    def d(self) -> int:
        return self.lo.size

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))

    def proposal_density(self, y):
        y = np.asarray(y, dtype=float)
        inside = np.all((y >= self.lo) & (y <= self.hi), axis=-1)
        return np.where(inside, 1.0 / self.volume, 0.0)

    def __call__(self, y):
        return np.asarray(self.fn(np.asarray(y, dtype=float)), dtype=float)

    def sample(self, n: int, seed: int, stream: int = 0, group: int = 0):
        """Uniform proposal draws and their importance weights ``w / q``."""
        u = rng.uniforms(seed, rng.TAG_PROPOSAL, np.arange(n), stream, group, n=self.d)
        y = self.lo + (self.hi - self.lo) * u
        return y, self(y) * self.volume

    def _check_support(self, n: int = 4096):
        # uniform proposal dominates |w| only if w vanishes outside the box
        u = rng.uniforms(12345, rng.TAG_MISC, np.arange(n), n=self.d)
        width = self.hi - self.lo
        y = self.lo - 0.5 * width + 2 * width * u
        outside = ~np.all((y >= self.lo) & (y <= self.hi), axis=-1)
        vals = self(y[outside])
        if np.any(np.abs(vals) > 0):
            raise ValueError("vorticity does not vanish outside its support box; "
                             "the uniform proposal would not dominate |w|")
        inside = self(self.lo + width * u)
        if np.any(np.sqrt((inside**2).sum(-1)) > self.winf * (1 + 1e-9)):
            raise ValueError("vorticity exceeds its declared sup norm")

    def to_dict(self) -> dict:
        return {"name": self.name, **self.params}


def _bump_profile(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    m = s < 1
    out[m] = np.exp(1.0 - 1.0 / (1.0 - s[m] ** 2))
    return out


def bump_vorticity(center=(0.0, 0.0), radius=0.5, amp=1.0, component=0) -> VorticitySpec:
    """Smooth compactly supported bump ``amp exp(1 - 1/(1 - s^2)) e_component``."""
    c = np.asarray(center, dtype=float)
    d = c.size

    def fn(y):
        s = np.sqrt(((y - c) ** 2).sum(-1)) / radius
        out = np.zeros(y.shape)
        out[..., component] = amp * _bump_profile(s)
        return out

    radial, _ = integrate.quad(lambda s: float(_bump_profile(s)) * s ** (d - 1), 0, 1)
    w1 = abs(amp) * sphere_area(d) * radius**d * radial
    integral = np.zeros(d)
    integral[component] = math.copysign(w1, amp)
    return VorticitySpec(fn, c - radius, c + radius, w1, abs(amp), "bump",
                         {"center": c.tolist(), "radius": radius, "amp": amp,
                          "component": component}, integral)


def box_vorticity(lo, hi, value) -> VorticitySpec:
    """Constant vector ``value`` on a box."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    v = np.asarray(value, dtype=float)

    def fn(y):
        inside = np.all((y >= lo) & (y <= hi), axis=-1)
        return inside[..., None] * v

    vol = float(np.prod(hi - lo))
    nv = float(np.linalg.norm(v))
    return VorticitySpec(fn, lo, hi, nv * vol, nv, "box",
                         {"lo": lo.tolist(), "hi": hi.tolist(), "value": v.tolist()},
                         v * vol)


def scaled_vorticity(w: VorticitySpec, c: float) -> VorticitySpec:
    return VorticitySpec(lambda y: c * w(y), w.lo, w.hi, abs(c) * w.w1, abs(c) * w.winf,
                         w.name, dict(w.params, scale=c),
                         None if w.integral is None else c * w.integral)


def sum_vorticity(w1: VorticitySpec, w2: VorticitySpec) -> VorticitySpec:
    """Pointwise sum on the common box (both must share it)."""
    if not (np.array_equal(w1.lo, w2.lo) and np.array_equal(w1.hi, w2.hi)):
        raise ValueError("vorticities must share a support box")
    integral = None
    if w1.integral is not None and w2.integral is not None:
        integral = w1.integral + w2.integral
    return VorticitySpec(lambda y: w1(y) + w2(y), w1.lo, w1.hi, w1.w1 + w2.w1,
                         w1.winf + w2.winf, "sum",
                         {"terms": [w1.to_dict(), w2.to_dict()]}, integral)


def make_vorticity(name: str, **params) -> VorticitySpec:
    if name == "bump":
        return bump_vorticity(**params)
    if name == "box":
        return box_vorticity(**params)
    raise ValueError(f"unknown vorticity {name!r}")


# --------------------------------------------------------------------------
# operator


@dataclass(frozen=True)
class TargetGrid:
    """Space-time nodes at which the operator is evaluated."""

    times: tuple
    lo: tuple
    hi: tuple
    nodes: tuple

    @classmethod
    def uniform(cls, horizon, n_times, lo, hi, nodes):
        times = np.linspace(0.0, horizon, n_times) if n_times > 1 else np.zeros(1)
        return cls(tuple(float(t) for t in times), tuple(map(float, lo)),
                   tuple(map(float, hi)), tuple(int(n) for n in nodes))

    def points(self):
        return grid_points(np.array(self.lo), np.array(self.hi), self.nodes)


@dataclass(frozen=True)
class MCParams:
    samples: int
    paths: int = 1
    seed: int = 0
    substeps: int = 4
    batches: int = 20

    def to_dict(self) -> dict:
        return {"samples": self.samples, "paths": self.paths, "seed": self.seed,
                "substeps": self.substeps, "batches": self.batches}


@dataclass(frozen=True, eq=False)
class KEstimate:
    field: DriftField
    stderr: np.ndarray        # per node and component
    batch_means: np.ndarray   # (batches,) + values shape
    singular_hits: int
    evaluations: int

    @property
    def hit_rate(self) -> float:
        return self.singular_hits / max(self.evaluations, 1)


def _simulate_from_samples(b, w, spec, grid: TargetGrid, mc: MCParams):
    if mc.samples < 1 or mc.paths < 1:
        raise ValueError("need at least one sample and one path")
    if spec.d != w.d:
        raise ValueError("vorticity and diffusion dimensions differ")
    y, omega = w.sample(mc.samples, mc.seed)
    times = np.asarray(grid.times)
    horizon = float(times[-1])
    if horizon == 0.0:
        return y[:, None, None, :], omega, [0]
    n_int = len(times) - 1
    steps = n_int * mc.substeps
    grid_t = np.linspace(0.0, horizon, n_int + 1)
    if not np.allclose(times, grid_t, rtol=0, atol=1e-12 * horizon):
        raise ValueError("target times must be uniformly spaced from 0")
    ens = simulate_paths(spec, b, y, horizon, steps, mc.paths, mc.seed)
    if np.any(ens.aborted):
        raise FloatingPointError("non-finite paths while evaluating the operator")
    pos = ens.positions.reshape(mc.samples, mc.paths, steps + 1, spec.d)
    nodes = [k * mc.substeps for k in range(n_int + 1)]
    return pos, omega, nodes


def _accumulate(kernel, pts, pos_t, omega, part, R, chunk_elems=2_000_000):
    """Per-sample contributions ``(S, n_pts, d)`` at one time slice."""
    S, m, d = pos_t.shape
    flat = pos_t.reshape(S * m, d)
    om = np.repeat(omega, m, axis=0)
    out = np.empty((S, len(pts), d))
    hits = 0
    step = max(1, chunk_elems // max(S * m, 1))
    for a in range(0, len(pts), step):
        p = pts[a:a + step]
        diff = p[:, None, :] - flat[None, :, :]
        vals, hit = kernel_apply_regularized(kernel, diff, om[None], R=R, part=part)
        hits += int(hit.sum())
        out[:, a:a + step] = vals.reshape(len(p), S, m, d).mean(axis=2).transpose(1, 0, 2)
    return out, hits


def apply_K_detailed(b: DriftField | None, kernel: KernelSpec, w: VorticitySpec,
                     spec: DiffusionSpec, grid: TargetGrid, mc: MCParams,
                     part: str = "full", R: float | None = None) -> KEstimate:
    """Operator estimate with standard errors, batch means and singular tallies.

    ``part`` restricts the kernel to the closed ball of radius ``R``
    (``"ball"``) or its complement (``"outside"``).
    """
    if kernel.d != spec.d:
        raise ValueError("kernel and diffusion dimensions differ")
    if b is not None and b.horizon < grid.times[-1] * (1 - 1e-12):
        raise ValueError("drift horizon does not cover the target grid")
    pts = grid.points().reshape(-1, spec.d)
    pos, omega, nodes = _simulate_from_samples(b, w, spec, grid, mc)
    S = mc.samples
    nb = max(1, min(mc.batches, S))
    edges = np.linspace(0, S, nb + 1).astype(int)
    vals, ses, bms = [], [], []
    hits = 0
    for k in nodes:
        contrib, h = _accumulate(kernel, pts, pos[:, :, k], omega, part, R)
        hits += h
        vals.append(contrib.mean(axis=0))
        ses.append(contrib.std(axis=0, ddof=1) / math.sqrt(S) if S > 1
                   else np.zeros_like(contrib[0]))
        bms.append(np.stack([contrib[edges[i]:edges[i + 1]].mean(axis=0)
                             for i in range(nb)]))
    shape = (len(nodes),) + tuple(grid.nodes) + (spec.d,)
    values = np.stack(vals).reshape(shape)
    stderr = np.stack(ses).reshape(shape)
    batch_means = np.stack(bms, axis=1).reshape((nb,) + shape)
    evaluations = len(nodes) * len(pts) * S * mc.paths
    if hits > SINGULAR_WARN_RATE * evaluations:
        warnings.warn(f"{hits} of {evaluations} kernel evaluations hit the "
                      f"regularisation radius {kernel.eps:g}", RuntimeWarning, stacklevel=2)
    meta = {"kernel": kernel.to_dict(), "vorticity": w.to_dict(),
            "diffusion": spec.name, "mc": mc.to_dict(), "part": part}
    fld = DriftField(np.asarray(grid.times), np.array(grid.lo), np.array(grid.hi),
                     values, float(grid.times[-1]), meta)
    return KEstimate(fld, stderr, batch_means, hits, evaluations)


def apply_K(b, kernel, w, spec, grid, mc, part="full", R=None) -> DriftField:
    """Monte Carlo estimate of ``K(b)`` on ``grid`` as a drift field."""
    return apply_K_detailed(b, kernel, w, spec, grid, mc, part, R).field


def sup_difference(f: DriftField, g: DriftField) -> float:
    """``||f - g||_inf``; exact on a shared grid since interpolation is linear."""
    if f.same_grid(g):
        return float(np.sqrt(((f.values - g.values) ** 2).sum(-1)).max())
    # evaluate both on the node set of each field
    best = 0.0
    for ref in (f, g):
        pts = ref.node_points().reshape(-1, ref.d)
        for t in ref.times:
            if t > min(f.horizon, g.horizon):
                continue
            diff = eval_drift(f, t, pts) - eval_drift(g, t, pts)
            best = max(best, float(np.sqrt((diff**2).sum(-1)).max()))
    return best


def resample_on_grid(b: DriftField | None, grid: TargetGrid, d: int) -> DriftField:
    times = np.asarray(grid.times)
    if b is None:
        b = DriftField.zero(d, float(times[-1]))
    return DriftField.from_function(lambda t, x: eval_drift(b, t, x), times,
                                    np.array(grid.lo), np.array(grid.hi), grid.nodes,
                                    meta=dict(b.meta))


def bootstrap_noise_floor(est: KEstimate, n_boot: int = 200, seed: int = 0) -> float:
    """Max over nodes of the bootstrap spread of the field over sample batches."""
    bm = est.batch_means
    nb = bm.shape[0]
    if nb < 2:
        return 0.0
    u = rng.uniforms(seed, rng.TAG_BOOTSTRAP, np.arange(n_boot)[:, None],
                     np.arange(nb)[None, :], n=1)[..., 0]
    idx = np.minimum((u * nb).astype(int), nb - 1)
    means = bm[idx].mean(axis=1)  # (n_boot,) + shape
    spread = means.std(axis=0, ddof=1)
    return float(np.sqrt((spread**2).sum(-1)).max())


# --------------------------------------------------------------------------
# Picard iteration


@dataclass(eq=False)
class FixpointReport:
    iterates: list
    differences: list
    ratios: list
    factor: float
    converged: bool
    noise_floor: float
    singular_hits: int = 0
    tau: float = 0.0
    L: float = 0.0

    def to_dict(self) -> dict:
        return {"tau": self.tau, "L": self.L, "iterations": len(self.iterates),
                "differences": self.differences, "ratios": self.ratios,
                "theoretical_factor": self.factor, "converged": self.converged,
                "noise_floor": self.noise_floor, "singular_hits": self.singular_hits,
                "sup_norms": [it.sup_norm for it in self.iterates]}


def picard(b0: DriftField | None, tau: float, tol: float, max_iter: int,
           kernel: KernelSpec, w: VorticitySpec, spec: DiffusionSpec,
           bundle: ConstantsBundle, lo, hi, nodes, n_times: int, mc: MCParams,
           ) -> FixpointReport:
    """Iterate ``b <- K(b)`` on ``[0, tau]`` with common random numbers.

    Stops once the sup difference falls to ``max(tol, noise floor)``; the noise
    floor is the bootstrap spread of the latest operator estimate.
    """
    if not 0 < tau < bundle.tau_max:
        raise ValueError(f"tau={tau} must lie in (0, tau_max={bundle.tau_max})")
    grid = TargetGrid.uniform(tau, n_times, lo, hi, nodes)
    current = resample_on_grid(b0, grid, spec.d)
    if current.sup_norm > bundle.L * (1 + 1e-12):
        raise ValueError(f"initial drift has sup norm {current.sup_norm} > L={bundle.L}")
    factor = bundle.factor if math.isclose(tau, bundle.tau) else \
        bundle.C0 * (bundle.xi + math.sqrt(bundle.xi)) * math.sqrt(tau)
    report = FixpointReport([current], [], [], factor, False, 0.0, 0, tau, bundle.L)
    growth = 0
    for _ in range(max_iter):
        est = apply_K_detailed(current, kernel, w, spec, grid, mc)
        report.singular_hits += est.singular_hits
        nxt = est.field
        diff = sup_difference(nxt, current)
        report.noise_floor = bootstrap_noise_floor(est, seed=mc.seed)
        report.iterates.append(nxt)
        report.differences.append(diff)
        diffs = report.differences
        if len(diffs) >= 2 and diffs[-2] > report.noise_floor:
            report.ratios.append(diffs[-1] / diffs[-2])
        if len(diffs) >= 2 and diffs[-1] > diffs[-2] and diffs[-1] > report.noise_floor:
            growth += 1
        else:
            growth = 0
        if growth >= 3:
            raise DivergenceError(
                f"sup differences grew for 3 consecutive iterations: {diffs[-4:]}", report)
        current = nxt
        if diff <= max(tol, report.noise_floor):
            report.converged = True
            break
    return report


# --------------------------------------------------------------------------
# operator bound checks


def _ball_coefficient(bundle: ConstantsBundle) -> float:
    d, g = bundle.d, bundle.gamma
    return (2 * bundle.alpha * bundle.C ** (1 + d / 2) * math.pi**d * bundle.R ** (d - g)
            * bundle.winf / (math.gamma(d / 2) * (d - g)))


def operator_bound_terms(bundle: ConstantsBundle, b_sup: float, t: float,
                         R: float | None = None):
    """Right-hand sides of the near-field and far-field bounds at radius ``R``."""
    if R is not None:
        bundle = _with_R(bundle, R)
    growth = 1 + b_sup * math.sqrt(t) * math.exp(
        bundle.xi * b_sup**2 * t / (2 * (bundle.q - 1)))
    ball = _ball_coefficient(bundle) * growth
    outside = bundle.alpha * bundle.w1 / bundle.R**bundle.gamma
    return ball, outside


def _with_R(bundle: ConstantsBundle, R: float) -> ConstantsBundle:
    from dataclasses import replace
    return replace(bundle, R=R)


def verify_lemma41(b: DriftField | None, kernel: KernelSpec, w: VorticitySpec,
                   spec: DiffusionSpec, R: float, t: float, x, mc: MCParams,
                   bundle: ConstantsBundle, nsigma: float = 3.0) -> dict:
    """Monte Carlo near/far-field kernel moments against their bounds."""
    if not 0 <= t <= 1:
        raise ValueError("t must lie in [0, 1]")
    x = np.asarray(x, dtype=float)
    y, _ = w.sample(mc.samples, mc.seed)
    absw = np.sqrt((w(y) ** 2).sum(-1)) * w.volume
    if t > 0:
        steps = max(1, mc.substeps)
        ens = simulate_paths(spec, b, y, t, steps, mc.paths, mc.seed)
        xt = ens.positions[:, -1].reshape(mc.samples, mc.paths, spec.d)
    else:
        xt = y[:, None, :]
    diff = x - xt
    r = np.sqrt((diff**2).sum(-1))
    norm = kernel_norm_regularized(kernel, diff)
    terms = {"ball": (norm * (r <= R)).mean(axis=1) * absw,
             "outside": (norm * (r > R)).mean(axis=1) * absw}
    b_sup = 0.0 if b is None else b.sup_norm
    ball_rhs, out_rhs = operator_bound_terms(bundle, b_sup, t, R)
    report = {"t": t, "x": x.tolist(), "R": R, "b_sup": b_sup}
    for name, rhs in (("ball", ball_rhs), ("outside", out_rhs)):
        v = terms[name]
        est = float(v.mean())
        se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
        report[name] = {"estimate": est, "stderr": se, "bound": rhs,
                        "margin": rhs - est, "pass": bool(est <= rhs + nsigma * se)}
    report["pass"] = report["ball"]["pass"] and report["outside"]["pass"]
    return report


def verify_lemma42(b: DriftField | None, kernel: KernelSpec, w: VorticitySpec,
                   spec: DiffusionSpec, grid: TargetGrid, mc: MCParams,
                   bundle: ConstantsBundle, nsigma: float = 3.0) -> dict:
    """Sup norm of ``K(b)`` against ``L`` for ``b`` in the ball of radius ``L``."""
    b_sup = 0.0 if b is None else b.sup_norm
    if b_sup > bundle.L * (1 + 1e-12):
        raise ValueError("drift lies outside the ball of radius L")
    if grid.times[-1] > bundle.T_L * (1 + 1e-12):
        raise ValueError("grid horizon exceeds T_L")
    est = apply_K_detailed(b, kernel, w, spec, grid, mc)
    norms = np.sqrt((est.field.values**2).sum(-1))
    k = np.unravel_index(np.argmax(norms), norms.shape)
    se = float(np.sqrt((est.stderr[k] ** 2).sum()))
    sup = float(norms[k])
    return {"sup_norm": sup, "stderr": se, "L": bundle.L, "margin": bundle.L - sup,
            "b_sup": b_sup, "singular_hits": est.singular_hits,
            "pass": bool(sup <= bundle.L + nsigma * se)}


def contraction_check(b: DriftField, b_tilde: DriftField, kernel: KernelSpec,
                      w: VorticitySpec, spec: DiffusionSpec, grid: TargetGrid,
                      mc: MCParams, bundle: ConstantsBundle, nsigma: float = 3.0) -> dict:
    """Measured Lipschitz ratio of the operator for one pair of drifts."""
    e1 = apply_K_detailed(b, kernel, w, spec, grid, mc)
    e2 = apply_K_detailed(b_tilde, kernel, w, spec, grid, mc)
    num = sup_difference(e1.field, e2.field)
    den = sup_difference(resample_on_grid(b, grid, spec.d),
                         resample_on_grid(b_tilde, grid, spec.d))
    if den == 0:
        raise ValueError("drifts coincide on the grid")
    # noise of the difference under shared randomness, from the batch means
    diff_b = e1.batch_means - e2.batch_means
    nb = diff_b.shape[0]
    spread = diff_b.std(axis=0, ddof=1) / math.sqrt(nb) if nb > 1 else np.zeros_like(diff_b[0])
    noise = float(np.sqrt((spread**2).sum(-1)).max())
    tau = float(grid.times[-1])
    factor = bundle.C0 * (bundle.xi + math.sqrt(bundle.xi)) * math.sqrt(tau)
    ratio = num / den
    tol = nsigma * noise / den
    return {"ratio": ratio, "factor": factor, "tolerance": tol, "numerator": num,
            "denominator": den, "tau": tau,
            "pass": bool(ratio < 1 and ratio <= factor + tol)}
