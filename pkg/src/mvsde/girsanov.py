"""Exponential change-of-measure weights along zero-drift paths.

For a zero-drift ensemble ``X0`` with martingale increments ``dM`` the weight

    U_t = exp( sum <b, dM>_g - 1/2 sum |b|_g^2 dt )

(left-point sums, ``b`` and ``g`` frozen at the start of each step) turns
expectations under ``X0`` into expectations under the drift-``b`` scheme.
With left-point evaluation the discrete product is an exact martingale, so
unit-mean checks carry no discretisation bias.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .diffusion import DiffusionSpec, DriftField, PathEnsemble


@dataclass(frozen=True, eq=False)
class WeightedEnsemble:
    ensemble: PathEnsemble
    drift_sup: float
    xi: float
    exponent: np.ndarray  # (paths, nodes)
    weights: np.ndarray   # exp(exponent)

    @property
    def times(self):
        return self.ensemble.times


def exponent_increments(ensemble: PathEnsemble, drift: DriftField | None,
                        spec: DiffusionSpec) -> np.ndarray:
    """Per-step ``<b, dM>_g - |b|_g^2 dt / 2``, shape ``(paths, steps)``."""
    n, steps = ensemble.n_paths, ensemble.steps
    inc = np.zeros((n, steps))
    if drift is None or drift.sup_norm == 0.0:
        return inc
    fixed_inv = None
    if spec.constant:
        fixed_inv = np.linalg.inv(spec.metric(0.0, np.zeros(spec.d)))
    for k in range(steps):
        t = ensemble.times[k]
        x = ensemble.positions[:, k]
        b = drift(t, x)
        if fixed_inv is not None:
            gb = b @ fixed_inv.T
        else:
            gb = np.linalg.solve(spec.metric(t, x), b[..., None])[..., 0]
        inc[:, k] = (np.einsum("ij,ij->i", gb, ensemble.dM[:, k])
                     - 0.5 * np.einsum("ij,ij->i", gb, b) * ensemble.dt)
    return inc


def compute_weights(ensemble: PathEnsemble, drift: DriftField | None,
                    spec: DiffusionSpec) -> WeightedEnsemble:
    if not ensemble.drift_zero:
        raise ValueError("weights must be computed along a zero-drift ensemble")
    if ensemble.d != spec.d or ensemble.diffusion != spec.name:
        raise ValueError("ensemble was simulated with a different diffusion")
    if drift is not None:
        if drift.d != spec.d:
            raise ValueError("drift dimension does not match the ensemble")
        if ensemble.times[-1] > drift.horizon * (1 + 1e-12):
            raise ValueError("drift horizon does not cover the ensemble")
    inc = exponent_increments(ensemble, drift, spec)
    expo = np.zeros((ensemble.n_paths, ensemble.steps + 1))
    np.cumsum(inc, axis=1, out=expo[:, 1:])
    weights = np.exp(expo)
    expo.setflags(write=False)
    weights.setflags(write=False)
    sup = 0.0 if drift is None else drift.sup_norm
    return WeightedEnsemble(ensemble, sup, spec.xi, expo, weights)


def moment_bound(xi: float, p: float, b_sup: float, s: float) -> float:
    """``exp(xi p (p - 1) |b|_inf^2 s / 2)``."""
    return float(np.exp(0.5 * xi * p * (p - 1) * b_sup**2 * s))


def moment_check(w: WeightedEnsemble, p: float, times) -> list[dict]:
    """Compare Monte Carlo ``E[U^p]`` with its exponential bound at each time."""
    if p <= 1:
        raise ValueError("moment order must exceed 1")
    records = []
    for t in times:
        k = w.ensemble.node(t)
        up = w.weights[:, k] ** p
        est = float(up.mean())
        se = float(up.std(ddof=1) / np.sqrt(up.size)) if up.size > 1 else 0.0
        bound = moment_bound(w.xi, p, w.drift_sup, float(w.times[k]))
        heavy = est > 0 and se / est > 0.5
        if heavy:
            warnings.warn(f"E[U^{p}] at t={t}: relative standard error {se / est:.0%}",
                          RuntimeWarning, stacklevel=2)
        records.append({"time": float(w.times[k]), "p": float(p), "estimate": est,
                        "stderr": se, "bound": bound,
                        "pass": bool(est <= bound + 3 * se), "heavy_tail": bool(heavy)})
    return records


def unit_mean_check(w: WeightedEnsemble, times, nsigma: float = 4.0) -> list[dict]:
    records = []
    for t in times:
        k = w.ensemble.node(t)
        u = w.weights[:, k]
        est = float(u.mean())
        se = float(u.std(ddof=1) / np.sqrt(u.size))
        records.append({"time": float(w.times[k]), "estimate": est, "stderr": se,
                        "pass": bool(abs(est - 1.0) <= nsigma * se + 1e-15)})
    return records


def reweighted_expectation(w: WeightedEnsemble, f, t: float, start: int | None = None):
    """Estimate ``E[f(X^b_t)]`` as the mean of ``U_t f(X0_t)``.

    ``f`` maps an ``(n, d)`` array to ``(n,)`` or ``(n, k)``.  Returns
    ``(value, standard error)``.
    """
    k = w.ensemble.node(t)
    sel = slice(None) if start is None else w.ensemble.start_index == start
    x = w.ensemble.positions[sel, k]
    u = w.weights[sel, k]
    vals = np.asarray(f(x), dtype=float)
    terms = u.reshape((-1,) + (1,) * (vals.ndim - 1)) * vals
    n = terms.shape[0]
    mean = terms.mean(axis=0)
    se = terms.std(axis=0, ddof=1) / np.sqrt(n)
    if np.ndim(mean) == 0:
        return float(mean), float(se)
    return mean, se
