"""Diffusion coefficients, drift fields and Euler-Maruyama path ensembles.

The metric ``g`` used for inner products is ``sigma @ sigma.T``, the density of
the quadratic variation of the martingale part ``dM = sigma dB``.  For the
symmetric coefficients shipped here it coincides with ``sigma.T @ sigma``.
"""
from __future__ import annotations

import csv
import json
import struct
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rng

PENS_MAGIC = b"PENS"
PENS_VERSION = 1
# magic, version, d, paths, steps
PENS_HEADER = struct.Struct("<4sIIQQ")
# optional trailer after the payload: magic, uint32 length, UTF-8 JSON
PENS_TRAILER_MAGIC = b"PMET"


class NumericalAbort(RuntimeError):
    """A simulation produced non-finite values."""


# --------------------------------------------------------------------------
# diffusion coefficients


@dataclass(frozen=True)
class DiffusionSpec:
    """Noise coefficient ``sigma(t, x)`` with ellipticity constant ``xi``.

    ``rule`` is vectorised: ``rule(t, x)`` with ``x`` of shape ``(..., d)``
    returns ``(..., d, d)``.  ``constant`` marks coefficients independent of
    ``(t, x)``; only those have a closed-form transition density here.
    """

    d: int
    rule: Callable = field(repr=False, compare=False)
    xi: float
    name: str = "custom"
    params: dict = field(default_factory=dict, compare=False)
    deriv_bound: float = 0.0
    constant: bool = False

    def __post_init__(self):
        if self.xi < 1:
            raise ValueError(f"ellipticity constant must be >= 1, got {self.xi}")

    def sigma(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.rule(t, x), x.shape[:-1] + (self.d, self.d))

    def metric(self, t, x):
        s = self.sigma(t, x)
        return s @ np.swapaxes(s, -1, -2)

    def to_dict(self) -> dict:
        return {"name": self.name, "d": self.d, "xi": self.xi, **self.params}


def identity(d: int = 2) -> DiffusionSpec:
    eye = np.eye(d)
    return DiffusionSpec(d, lambda t, x: eye, 1.0, "identity", {}, 0.0, True)


def scaled_identity(d: int = 2, scale: float = 1.0) -> DiffusionSpec:
    if scale <= 0:
        raise ValueError("scale must be positive")
    m = scale * np.eye(d)
    xi = max(scale**2, scale**-2)
    return DiffusionSpec(d, lambda t, x: m, xi, "scaled-identity",
                         {"scale": scale}, 0.0, True)


def diag_sin(amp: float = 0.5) -> DiffusionSpec:
    """``sigma = diag(1 + amp sin x2, 1)`` in two dimensions."""
    if not 0 <= amp < 1:
        raise ValueError("amp must lie in [0, 1)")

    def rule(t, x):
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = 1.0 + amp * np.sin(x[..., 1])
        out[..., 1, 1] = 1.0
        return out

    xi = max((1 + amp) ** 2, (1 - amp) ** -2)
    # second derivatives of g11 = (1 + amp sin x2)^2 are bounded by 2 amp (1 + 2 amp)
    return DiffusionSpec(2, rule, xi, "diag-sin", {"amp": amp},
                         2 * amp * (1 + 2 * amp), False)


def table(sigma) -> DiffusionSpec:
    """Constant user-supplied coefficient matrix."""
    m = np.array(sigma, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("sigma table must be a square matrix")
    ev = np.linalg.eigvalsh(m @ m.T)
    if ev[0] <= 0:
        raise ValueError("sigma table is singular")
    xi = float(max(ev[-1], 1 / ev[0], 1.0))
    return DiffusionSpec(m.shape[0], lambda t, x: m, xi, "table",
                         {"sigma": m.tolist()}, 0.0, True)


def make_diffusion(name: str, d: int = 2, **params) -> DiffusionSpec:
    if name == "identity":
        return identity(d)
    if name == "scaled-identity":
        return scaled_identity(d, params.get("scale", 1.0))
    if name == "diag-sin":
        if d != 2:
            raise ValueError("diag-sin is two-dimensional")
        return diag_sin(params.get("amp", 0.5))
    if name == "table":
        return table(params["sigma"])
    raise ValueError(f"unknown diffusion {name!r}")


def g_inner(spec: DiffusionSpec, t, x, a, c):
    """``a^T g(t, x)^{-1} c``."""
    g = spec.metric(t, x)
    a = np.asarray(a, dtype=float)
    c = np.asarray(c, dtype=float)
    lead = np.broadcast_shapes(g.shape[:-2], c.shape[:-1])
    g = np.broadcast_to(g, lead + g.shape[-2:])
    try:
        sol = np.linalg.solve(g, np.broadcast_to(c, lead + c.shape[-1:])[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise ValueError("metric is not invertible; invalid DiffusionSpec") from exc
    return np.einsum("...i,...i->...", a, sol)


def grad_g(spec: DiffusionSpec, t, x, euclidean_gradient):
    """Raise an index: ``g(t, x) @ grad``."""
    g = spec.metric(t, x)
    return np.einsum("...ij,...j->...i", g, np.asarray(euclidean_gradient, dtype=float))


def check_ellipticity(spec: DiffusionSpec, n: int = 2000, box: float = 10.0,
                      horizon: float = 1.0, seed: int = 0):
    """Sample ``g`` and return ``(ok, min_eig, max_eig)``."""
    u = rng.uniforms(seed, rng.TAG_MISC, np.arange(n), n=spec.d + 1)
    x = (2 * u[:, : spec.d] - 1) * box
    ts = u[:, spec.d] * horizon
    eig = np.concatenate([np.linalg.eigvalsh(spec.metric(t, xi[None]))[0]
                          for t, xi in zip(ts, x)])
    lo, hi = float(eig.min()), float(eig.max())
    tol = 1e-12
    return (lo >= 1 / spec.xi - tol and hi <= spec.xi + tol), lo, hi


def gaussian_density(spec: DiffusionSpec, x, t, y):
    """Transition density ``p(x, t, y)`` of ``dX = sigma dB`` for constant sigma."""
    if not spec.constant:
        raise ValueError(f"no closed-form density for diffusion {spec.name!r}")
    cov = t * spec.metric(0.0, np.zeros(spec.d))
    diff = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
    prec = np.linalg.inv(cov)
    q = np.einsum("...i,ij,...j->...", diff, prec, diff)
    norm = np.sqrt((2 * np.pi) ** spec.d * np.linalg.det(cov))
    return np.exp(-0.5 * q) / norm


def gaussian_density_grad_x(spec: DiffusionSpec, x, t, y):
    """Gradient of ``p(x, t, y)`` in the start point ``x`` (constant sigma)."""
    cov = t * spec.metric(0.0, np.zeros(spec.d))
    diff = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
    p = gaussian_density(spec, x, t, y)
    return p[..., None] * (diff @ np.linalg.inv(cov).T)


# --------------------------------------------------------------------------
# drift fields


@dataclass(frozen=True, eq=False)
class DriftField:
    """Bounded drift stored on a space-time grid.

    Piecewise constant in time (value of the last node at or before ``t``),
    multilinear in space, clamped to the boundary outside the box.  A box axis
    with a single node makes the field constant along that axis.
    """

    times: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    values: np.ndarray
    horizon: float
    meta: dict = field(default_factory=dict)
    interp: str = "left-constant/multilinear"
    sup_norm: float = field(init=False)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        d = lo.size
        if times.ndim != 1 or times.size == 0 or times[0] != 0.0:
            raise ValueError("time grid must be a nonempty 1-D array starting at 0")
        if np.any(np.diff(times) <= 0):
            raise ValueError("time grid must be increasing")
        if self.horizon < times[-1]:
            raise ValueError("horizon precedes the last time node")
        if vals.ndim != d + 2 or vals.shape[0] != times.size or vals.shape[-1] != d:
            raise ValueError(f"values shape {vals.shape} inconsistent with grid")
        nodes = np.array(vals.shape[1:-1])
        if np.any((hi <= lo) & (nodes > 1)):
            raise ValueError("box must have hi > lo on axes with several nodes")
        if not np.all(np.isfinite(vals)):
            raise ValueError("drift values must be finite")
        for name, v in (("times", times), ("lo", lo), ("hi", hi), ("values", vals)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        object.__setattr__(self, "sup_norm",
                           float(np.sqrt((vals**2).sum(-1)).max()) if vals.size else 0.0)

    @property
    def d(self) -> int:
        return self.lo.size

    @property
    def nodes(self) -> tuple:
        return self.values.shape[1:-1]

    @classmethod
    def zero(cls, d: int, horizon: float) -> "DriftField":
        return cls.constant(np.zeros(d), horizon)

    @classmethod
    def constant(cls, v, horizon: float) -> "DriftField":
        v = np.asarray(v, dtype=float)
        d = v.size
        vals = v.reshape((1,) + (1,) * d + (d,))
        return cls(np.zeros(1), np.zeros(d), np.zeros(d), vals, float(horizon),
                   {"kind": "constant"})

    @classmethod
    def from_function(cls, fn, times, lo, hi, nodes, horizon=None, meta=None):
        """Sample ``fn(t, x)`` (``x`` of shape ``(..., d)``) on the grid."""
        times = np.asarray(times, dtype=float)
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        pts = grid_points(lo, hi, nodes)
        vals = np.stack([np.asarray(fn(t, pts), dtype=float) * np.ones_like(pts)
                         for t in times])
        return cls(times, lo, hi, vals, float(times[-1] if horizon is None else horizon),
                   dict(meta or {}, kind="sampled"))

    def node_points(self):
        return grid_points(self.lo, self.hi, self.nodes)

    def with_values(self, values, meta=None) -> "DriftField":
        return DriftField(self.times, self.lo, self.hi, values, self.horizon,
                          dict(self.meta if meta is None else meta))

    def same_grid(self, other: "DriftField") -> bool:
        return (self.values.shape == other.values.shape
                and np.array_equal(self.times, other.times)
                and np.array_equal(self.lo, other.lo)
                and np.array_equal(self.hi, other.hi))

    def in_ball(self, L: float) -> bool:
        return self.sup_norm <= L

    def __call__(self, t, x):
        return eval_drift(self, t, x)


def grid_points(lo, hi, nodes):
    """Node coordinates of a rectangular grid, shape ``nodes + (d,)``."""
    axes = [np.linspace(a, b, int(n)) if n > 1 else np.array([0.5 * (a + b)])
            for a, b, n in zip(lo, hi, nodes)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def eval_drift(drift: DriftField, t: float, x):
    """Evaluate a drift field at scalar time ``t`` and points ``x`` (..., d)."""
    t = float(t)
    tol = 1e-12 * max(1.0, drift.horizon)
    if t < -tol or t > drift.horizon + tol:
        raise ValueError(f"time {t} outside the drift horizon [0, {drift.horizon}]")
    k = max(int(np.searchsorted(drift.times, t + tol, side="right")) - 1, 0)
    slab = drift.values[k]
    x = np.asarray(x, dtype=float)
    lead = x.shape[:-1]
    pts = x.reshape(-1, drift.d)
    idx0, frac = [], []
    for a, n in enumerate(drift.nodes):
        if n == 1:
            idx0.append(np.zeros(len(pts), dtype=int))
            frac.append(np.zeros(len(pts)))
            continue
        h = (drift.hi[a] - drift.lo[a]) / (n - 1)
        s = np.clip((pts[:, a] - drift.lo[a]) / h, 0.0, n - 1)
        i0 = np.minimum(np.floor(s).astype(int), n - 2)
        idx0.append(i0)
        frac.append(s - i0)
    out = np.zeros((len(pts), drift.d))
    for corner in range(2 ** drift.d):
        w = np.ones(len(pts))
        index = []
        for a, n in enumerate(drift.nodes):
            bit = (corner >> a) & 1
            if n == 1:
                if bit:
                    w = w * 0.0
                index.append(idx0[a])
                continue
            w = w * (frac[a] if bit else 1.0 - frac[a])
            index.append(idx0[a] + bit)
        if not np.any(w):
            continue
        out += w[:, None] * slab[tuple(index)]
    return out.reshape(lead + (drift.d,))


# --------------------------------------------------------------------------
# path ensembles


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Euler-Maruyama trajectories with their noise increments.

    Paths are ordered start-major: path ``k`` starts at
    ``starts[start_index[k]]``.
    """

    starts: np.ndarray
    start_index: np.ndarray
    times: np.ndarray
    positions: np.ndarray
    dB: np.ndarray
    dM: np.ndarray
    seed: int
    dt: float
    drift_zero: bool
    aborted: np.ndarray
    diffusion: str = ""
    drift_meta: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.positions.shape[-1]

    @property
    def n_paths(self) -> int:
        return self.positions.shape[0]

    @property
    def steps(self) -> int:
        return self.times.size - 1

    def node(self, t: float) -> int:
        """Index of time node ``t`` (must lie on the grid)."""
        k = int(round(t / self.dt))
        if k < 0 or k > self.steps or abs(self.times[k] - t) > 1e-9 * max(self.dt, 1.0):
            raise ValueError(f"time {t} is not an ensemble node")
        return k

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "step", "t"] + [f"x{i + 1}" for i in range(self.d)])
            for p in range(self.n_paths):
                for k, t in enumerate(self.times):
                    w.writerow([p, k, repr(float(t))]
                               + [repr(float(v)) for v in self.positions[p, k]])

    def to_bytes(self) -> bytes:
        head = PENS_HEADER.pack(PENS_MAGIC, PENS_VERSION, self.d, self.n_paths, self.steps)
        return head + np.ascontiguousarray(self.positions, dtype="<f8").tobytes()

    def write_binary(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())


def read_binary(path):
    """Read a PENS file; returns ``(header dict, positions array)``.

    A metadata trailer, when present, is decoded into ``header["meta"]``.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, d, paths, steps = PENS_HEADER.unpack_from(raw)
    if magic != PENS_MAGIC:
        raise ValueError("not a PENS file")
    if version != PENS_VERSION:
        raise ValueError(f"unsupported PENS version {version}")
    count = paths * (steps + 1) * d
    end = PENS_HEADER.size + 8 * count
    if len(raw) < end:
        raise ValueError("truncated PENS file")
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=PENS_HEADER.size)
    header = {"version": version, "d": d, "paths": paths, "steps": steps}
    rest = raw[end:]
    if rest:
        if rest[:4] != PENS_TRAILER_MAGIC:
            raise ValueError("unexpected bytes after the PENS payload")
        n = int.from_bytes(rest[4:8], "little")
        header["meta"] = json.loads(rest[8:8 + n].decode())
    return header, data.reshape(paths, steps + 1, d)


def brownian_increments(seed, d, start_ids, path_ids, steps, dt, chunk=8192):
    """``sqrt(dt) * N(0, I)`` keyed by (seed, start, path, step)."""
    n = len(path_ids)
    out = np.empty((n, steps, d))
    step_ids = np.arange(steps)[None, :]
    for a in range(0, n, chunk):
        b = min(a + chunk, n)
        out[a:b] = rng.normals(seed, rng.TAG_PATHS, path_ids[a:b, None], step_ids,
                               start_ids[a:b, None], n=d)
    out *= np.sqrt(dt)
    return out


def simulate_paths(spec: DiffusionSpec, drift: DriftField | None, starts,
                   horizon: float, steps: int, paths_per_start: int, seed: int,
                   path_offset: int = 0) -> PathEnsemble:
    """Euler-Maruyama for ``dX = b dt + sigma dB`` from each start point.

    ``drift=None`` means zero drift.  Path ``j`` of start ``i`` draws its noise
    from the stream keyed by ``(seed, i, path_offset + j)``, so splitting a run
    into batches with increasing ``path_offset`` reproduces it exactly.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    if steps < 1 or paths_per_start < 1:
        raise ValueError("steps and paths_per_start must be positive")
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    if starts.shape[1] != spec.d:
        raise ValueError("start points have the wrong dimension")
    if drift is not None:
        if drift.d != spec.d:
            raise ValueError("drift dimension does not match the diffusion")
        if horizon > drift.horizon * (1 + 1e-12):
            raise ValueError(f"horizon {horizon} exceeds the drift horizon {drift.horizon}")
        if not np.isfinite(drift.sup_norm):
            raise ValueError("drift must be bounded")
    d = spec.d
    S, m = len(starts), paths_per_start
    start_ids = np.repeat(np.arange(S), m)
    path_ids = np.tile(np.arange(path_offset, path_offset + m), S)
    dt = horizon / steps
    times = np.arange(steps + 1) * dt
    times[-1] = horizon
    dB = brownian_increments(seed, d, start_ids, path_ids, steps, dt)
    X = np.empty((S * m, steps + 1, d))
    X[:, 0] = starts[start_ids]
    dM = np.empty_like(dB)
    aborted = np.zeros(S * m, dtype=bool)
    first_bad = None
    for k in range(steps):
        x = X[:, k]
        sig = spec.sigma(times[k], x)
        dM[:, k] = np.einsum("...ij,...j->...i", sig, dB[:, k])
        step = dM[:, k]
        if drift is not None:
            step = step + drift(times[k], x) * dt
        X[:, k + 1] = x + step
        bad = ~np.isfinite(X[:, k + 1]).all(axis=1) & ~aborted
        if np.any(bad):
            if first_bad is None:
                first_bad = (int(np.flatnonzero(bad)[0]), k + 1)
            aborted |= bad
            X[aborted, k + 1] = np.nan
    if first_bad is not None:
        warnings.warn(f"{int(aborted.sum())} path(s) aborted with non-finite positions; "
                      f"first: path {first_bad[0]} at step {first_bad[1]}",
                      RuntimeWarning, stacklevel=2)
    for a in (X, dB, dM, aborted):
        a.setflags(write=False)
    return PathEnsemble(starts, start_ids, times, X, dB, dM, int(seed), dt,
                        drift is None or drift.sup_norm == 0.0, aborted, spec.name,
                        dict(drift.meta) if drift is not None else {"kind": "zero"})
