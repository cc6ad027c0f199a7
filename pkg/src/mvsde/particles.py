"""Interacting N-vortex system with multiplicative noise."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import rng
from .diffusion import DiffusionSpec, DriftField, NumericalAbort, eval_drift
from .kernels import SAFE_NORM, KernelSpec, kernel_apply_regularized
from .meanfield import VorticitySpec

BLOCK_PAIRS = 4_000_000  # pair evaluations per block of the O(N^2) sum
_TINY = np.finfo(float).tiny


@dataclass(frozen=True, eq=False)
class VortexEnsemble:
    positions: np.ndarray
    intensities: np.ndarray
    ids: np.ndarray
    time: float = 0.0
    step_count: int = 0
    seed: int = 0
    replica: int = 0
    eps: float = 0.0
    hits: int = 0

    def __post_init__(self):
        for name in ("positions", "intensities", "ids"):
            a = np.array(getattr(self, name))
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if self.positions.ndim != 2 or len(self.intensities) != len(self.positions):
            raise ValueError("positions must be (N, d) with one intensity per vortex")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("vortex positions must be finite")

    @property
    def N(self) -> int:
        return len(self.positions)

    @property
    def d(self) -> int:
        return self.positions.shape[1]

    def total_intensity(self) -> float:
        return float(self.intensities.sum())

    def permuted(self, perm) -> "VortexEnsemble":
        """Relabel vortices; ids travel with them so noise streams follow."""
        perm = np.asarray(perm)
        return replace(self, positions=self.positions[perm],
                       intensities=self.intensities[perm], ids=self.ids[perm])

    def rows(self):
        """Snapshot records ``(i, x1..xd, intensity)``."""
        return [[int(i), *map(float, x), float(w)]
                for i, x, w in zip(self.ids, self.positions, self.intensities)]


def init_from_vorticity(w: VorticitySpec, N: int, seed: int, replica: int = 0,
                        eps: float = 0.0) -> VortexEnsemble:
    """Uniform draws on the support box carrying intensities ``w_1(y) / q(y)``."""
    if N < 1:
        raise ValueError("need at least one vortex")
    y, omega = w.sample(N, seed, stream=N, group=replica + 1)
    return VortexEnsemble(y, omega[:, 0], np.arange(N), 0.0, 0, int(seed), int(replica), eps)


def _pair_sum(kernel: KernelSpec, targets, sources, intensities, exclude_self: bool):
    """``(1/N) sum_j w_j K(x - X_j)`` for each target; returns (values, hits)."""
    n, N, d = len(targets), len(sources), kernel.d
    if kernel.name == "zero":
        return np.zeros((n, d)), 0
    if kernel.name == "power-law" and kernel.gamma == 0.0:
        # constant kernel: the sum does not depend on positions
        tot = intensities.sum() - (intensities if exclude_self else 0.0)
        out = np.zeros((n, d))
        out[:, 0] = kernel.alpha * tot / N
        return out, 0
    out = np.empty((n, d))
    hits = 0
    block = max(1, BLOCK_PAIRS // max(N, 1))
    for a in range(0, n, block):
        b = min(a + block, n)
        out[a:b], h = _radial_block(kernel, targets[a:b], sources, intensities,
                                    a if exclude_self else None)
        hits += h
    return out / N, hits


def _radial_block(kernel, x, src, wts, self_offset):
    """Unnormalised pair sums for one block of targets.

    Both built-in singular kernels are a radial factor times either the
    rotated displacement (Biot-Savart) or ``e_1`` (power law), so the sum over
    sources reduces to one matrix product with ``[w, w X]``.  Clamping follows
    :func:`kernels.regularize`.
    """
    floor = max(kernel.eps, SAFE_NORM)
    diffs = [x[:, k, None] - src[None, :, k] for k in range(kernel.d)]
    r2 = sum(dk * dk for dk in diffs)
    # floor**2 underflows for tiny floors, so confirm candidates on the norm itself
    cand = r2 < max(floor * floor, _TINY)
    hit = np.zeros(r2.shape, dtype=bool)
    if cand.any():
        hit[cand] = np.sqrt(r2[cand]) < floor
    if self_offset is not None:
        rows = np.arange(len(x))
        hit[rows, rows + self_offset] = False
        r2[rows, rows + self_offset] = 1.0
    r2[hit] = 1.0
    with np.errstate(divide="ignore", over="ignore"):
        if kernel.name == "biot-savart":
            f = (1.0 / (2 * np.pi)) / r2
        else:
            f = kernel.alpha * r2 ** (-0.5 * kernel.gamma)
    f[hit] = 0.0
    if self_offset is not None:
        f[rows, rows + self_offset] = 0.0
    out = np.zeros((len(x), kernel.d))
    if kernel.name == "biot-savart":
        m = f @ np.stack([wts, wts * src[:, 0], wts * src[:, 1]], axis=1)
        # sum_j f w_j (x_i - X_j) per axis, then rotate by a quarter turn
        sx = x[:, 0] * m[:, 0] - m[:, 1]
        sy = x[:, 1] * m[:, 0] - m[:, 2]
        out[:, 0] = -sy
        out[:, 1] = sx
    else:
        out[:, 0] = f @ wts
    nhit = int(hit.sum())
    if nhit:
        # clamped pairs go through the generic rule
        ii, jj = np.nonzero(hit)
        v = np.zeros((nhit, kernel.d))
        v[:, 0] = wts[jj]
        vals, _ = kernel_apply_regularized(kernel, x[ii] - src[jj], v)
        np.add.at(out, ii, vals)
    return out, nhit


def pairwise_drift(ens: VortexEnsemble, kernel: KernelSpec):
    """Drift on every vortex, excluding self-interaction."""
    return _pair_sum(kernel, ens.positions, ens.positions, ens.intensities, True)


def _min_pair_distance(x):
    best = math.inf
    for a in range(0, len(x), 512):
        diff = x[a:a + 512, None, :] - x[None, :, :]
        r = np.sqrt((diff**2).sum(-1))
        idx = np.arange(min(512, len(x) - a))
        r[idx, idx + a] = np.inf
        best = min(best, float(r.min()))
    return best


def step(ens: VortexEnsemble, dt: float, spec: DiffusionSpec | None,
         kernel: KernelSpec) -> VortexEnsemble:
    """One Euler-Maruyama step; ``spec=None`` switches the noise off."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if kernel.d != ens.d or (spec is not None and spec.d != ens.d):
        raise ValueError("dimension mismatch between ensemble, kernel and diffusion")
    with np.errstate(over="ignore", invalid="ignore"):
        # overflow surfaces as non-finite positions below
        drift, hits = pairwise_drift(ens, kernel)
        new = ens.positions + drift * dt
    if spec is not None:
        dB = rng.normals(ens.seed, rng.TAG_VORTEX, ens.ids, ens.step_count, ens.replica,
                         n=ens.d) * math.sqrt(dt)
        sig = spec.sigma(ens.time, ens.positions)
        new = new + np.einsum("...ij,...j->...i", sig, dB)
    if not np.all(np.isfinite(new)):
        raise NumericalAbort(
            f"non-finite vortex position at step {ens.step_count + 1}; minimal pair "
            f"distance before the step was {_min_pair_distance(ens.positions):.3e}")
    return replace(ens, positions=new, time=ens.time + dt,
                   step_count=ens.step_count + 1, hits=ens.hits + hits)


def run(ens: VortexEnsemble, dt: float, steps: int, spec, kernel) -> VortexEnsemble:
    for _ in range(steps):
        ens = step(ens, dt, spec, kernel)
    return ens


def empirical_velocity(ens: VortexEnsemble, x, kernel: KernelSpec, return_hits=False):
    """``(1/N) sum_j w_j K(x - X_j)`` over all vortices at points ``x``."""
    x = np.asarray(x, dtype=float)
    lead = x.shape[:-1]
    vals, hits = _pair_sum(kernel, x.reshape(-1, ens.d), ens.positions, ens.intensities,
                           False)
    vals = vals.reshape(lead + (ens.d,))
    return (vals, hits) if return_hits else vals


def two_vortex_orbit(x1, x2, w1, w2, N, t):
    """Closed-form co-rotation of two point vortices under the N-scaled system."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if w1 + w2 == 0:
        raise ValueError("orbit closed form needs nonzero total intensity")
    c = (w1 * x1 + w2 * x2) / (w1 + w2)
    D2 = float(((x1 - x2) ** 2).sum())
    omega = (w1 + w2) / (2 * np.pi * N * D2)
    th = omega * t
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    return c + (x1 - c) @ rot.T, c + (x2 - c) @ rot.T, omega


def _check_reference(reference: DriftField, kernel, w, spec):
    meta = reference.meta
    expect = {"kernel": kernel.to_dict(), "vorticity": w.to_dict(),
              "diffusion": None if spec is None else spec.name}
    for key, val in expect.items():
        if key in meta and val is not None and meta[key] != val:
            if key == "kernel":
                # eps is a simulation choice, not a model parameter
                a = {k: v for k, v in meta[key].items() if k != "eps"}
                b = {k: v for k, v in val.items() if k != "eps"}
                if a == b:
                    continue
            raise ValueError(f"reference {key} {meta[key]!r} does not match {val!r}")


def chaos_error(Ns, reference: DriftField, t: float, probes, w: VorticitySpec,
                kernel: KernelSpec, spec: DiffusionSpec | None, replicas: int,
                seed: int, steps: int = 1) -> dict:
    """Deviation of the empirical velocity from a reference drift, per N.

    Each replica draws a fresh initial ensemble, runs ``steps`` steps up to
    time ``t`` and compares velocities on the probe points.
    """
    _check_reference(reference, kernel, w, spec)
    probes = np.asarray(probes, dtype=float).reshape(-1, w.d)
    ref = eval_drift(reference, t, probes)
    rows = []
    for N in Ns:
        maxes, means, hits = [], [], 0
        for r in range(replicas):
            ens = init_from_vorticity(w, int(N), seed, r, kernel.eps)
            if t > 0:
                ens = run(ens, t / steps, steps, spec, kernel)
            vel, h = empirical_velocity(ens, probes, kernel, return_hits=True)
            err = np.sqrt(((vel - ref) ** 2).sum(-1))
            maxes.append(err.max())
            means.append(err.mean())
            hits += h + ens.hits
        maxes, means = np.array(maxes), np.array(means)
        se = (lambda a: float(a.std(ddof=1) / math.sqrt(len(a))) if len(a) > 1 else 0.0)
        rows.append({"N": int(N), "max_error": float(maxes.mean()), "max_stderr": se(maxes),
                     "mean_error": float(means.mean()), "mean_stderr": se(means),
                     "replicas": replicas, "singular_hits": hits})
    logN = np.log([r["N"] for r in rows])
    logE = np.log([max(r["mean_error"], 1e-300) for r in rows])
    slope = float(np.polyfit(logN, logE, 1)[0]) if len(rows) > 1 else float("nan")
    errs = [r["mean_error"] for r in rows]
    ses = [r["mean_stderr"] for r in rows]
    monotone = all(errs[i + 1] <= errs[i] + 2 * math.hypot(ses[i], ses[i + 1])
                   for i in range(len(errs) - 1))
    return {"t": t, "rows": rows, "slope": slope, "monotone": bool(monotone),
            "probes": probes.tolist()}
