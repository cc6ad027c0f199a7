"""Turn a :class:`RunConfig` into model objects."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .config import (ConfigError, ConstantsConfig, DiffusionConfig, DriftConfig,
                     KernelConfig, RunConfig, VorticityConfig)
from .constants import ConstantsBundle, build_bundle, fit_constant_diffusion
from .diffusion import DiffusionSpec, DriftField, make_diffusion
from .kernels import KernelSpec, make_kernel
from .meanfield import VorticitySpec, make_vorticity


@dataclass(frozen=True, eq=False)
class Components:
    spec: DiffusionSpec
    kernel: KernelSpec
    w: VorticitySpec
    bundle: ConstantsBundle
    fitted: dict


def diffusion_from(cfg: DiffusionConfig) -> DiffusionSpec:
    params = {"scale": cfg.scale, "amp": cfg.amp}
    if cfg.name == "table":
        if cfg.sigma is None:
            raise ConfigError("diffusion.sigma: required for the table diffusion")
        params = {"sigma": cfg.sigma}
    try:
        return make_diffusion(cfg.name, cfg.d, **params)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"diffusion: {exc}") from None


def kernel_from(cfg: KernelConfig, d: int, eps: float = 0.0) -> KernelSpec:
    try:
        return make_kernel(cfg.name, d, cfg.alpha, cfg.gamma, eps)
    except ValueError as exc:
        raise ConfigError(f"kernel: {exc}") from None


def vorticity_from(cfg: VorticityConfig) -> VorticitySpec:
    try:
        if cfg.name == "bump":
            return make_vorticity("bump", center=cfg.center, radius=cfg.radius,
                                  amp=cfg.amp, component=cfg.component)
        if cfg.name == "box":
            if cfg.lo is None or cfg.hi is None or cfg.value is None:
                raise ConfigError("vorticity: box needs lo, hi and value")
            return make_vorticity("box", lo=cfg.lo, hi=cfg.hi, value=cfg.value)
        raise ConfigError(f"vorticity.name: unknown vorticity {cfg.name!r}")
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"vorticity: {exc}") from None


_FIT_CACHE: dict = {}


def _fit(spec: DiffusionSpec):
    key = (spec.name, spec.d, json.dumps(spec.params, sort_keys=True))
    if key not in _FIT_CACHE:
        _FIT_CACHE[key] = fit_constant_diffusion(spec)
    return _FIT_CACHE[key]


def fitted_constants(spec: DiffusionSpec, cfg: ConstantsConfig):
    """``(A, kappa, kappa_prime, source)``; fills gaps by fitting when possible."""
    A, kappa, kp = cfg.A, cfg.kappa, cfg.kappa_prime
    source = "config"
    if A is None or kappa is None or kp is None:
        if not spec.constant:
            raise ConfigError("constants.A: A, kappa and kappa_prime must be given "
                              "for a non-constant diffusion")
        fA, fk, fkp = _fit(spec)
        A = fA if A is None else A
        kappa = fk if kappa is None else kappa
        kp = fkp if kp is None else kp
        source = "fitted"
    return A, kappa, kp, source


def bundle_from(spec: DiffusionSpec, kernel: KernelSpec, w: VorticitySpec,
                cfg: ConstantsConfig):
    A, kappa, kp, source = fitted_constants(spec, cfg)
    xi = spec.xi if cfg.xi is None else cfg.xi
    try:
        bundle = build_bundle(spec.d, xi, A, kappa, kernel.alpha, kernel.gamma, w.w1, w.winf,
                              q=cfg.q, R=cfg.R, kappa_prime=kp, tau_fraction=cfg.tau_fraction)
    except ValueError as exc:
        raise ConfigError(f"constants: {exc}") from None
    return bundle, {"A": A, "kappa": kappa, "kappa_prime": kp, "source": source}


def components(cfg: RunConfig) -> Components:
    spec = diffusion_from(cfg.diffusion)
    w = vorticity_from(cfg.vorticity)
    if w.d != spec.d:
        raise ConfigError("vorticity.center: dimension differs from diffusion.d")
    raw = kernel_from(cfg.kernel, spec.d)
    bundle, fitted = bundle_from(spec, raw, w, cfg.constants)
    eps = cfg.kernel.eps
    if eps is None:
        eps = cfg.kernel.eps_factor * (bundle.R if bundle.R > 0 else 1.0)
    return Components(spec, raw.with_eps(eps), w, bundle, fitted)


def drift_from(cfg: DriftConfig, d: int, horizon: float, L: float = 1.0) -> DriftField | None:
    """Time-constant test drift; ``relative_to_L`` scales the amplitude by ``L``."""
    amp = cfg.amplitude * (L if cfg.relative_to_L else 1.0)
    if cfg.kind == "zero":
        return None
    if cfg.kind == "constant":
        v = np.asarray(cfg.vector, dtype=float)
        if v.size != d:
            raise ConfigError("drift.vector: wrong dimension")
        if cfg.relative_to_L:
            v = v * L
        return DriftField.constant(v, horizon)
    if len(cfg.lo) != d or len(cfg.hi) != d or len(cfg.nodes) != d:
        raise ConfigError("drift.lo: box and nodes must match the dimension")
    s = cfg.scale
    if s <= 0:
        raise ConfigError("drift.scale: must be positive")
    fn = _FIELDS.get(cfg.kind)
    if fn is None:
        raise ConfigError(f"drift.kind: unknown drift {cfg.kind!r}")
    return DriftField.from_function(lambda t, x: amp * fn(x / s), [0.0], cfg.lo, cfg.hi,
                                    cfg.nodes, horizon, {"kind": cfg.kind, "amplitude": amp,
                                                         "scale": s})


def _rotating(u):
    # unit vectors turning with the first coordinate: |b| = amplitude everywhere
    out = np.zeros(u.shape)
    out[..., 0] = np.cos(u[..., 0])
    out[..., 1] = np.sin(u[..., 0])
    return out


def _swirl(u):
    r2 = (u[..., :2] ** 2).sum(-1)
    out = np.zeros(u.shape)
    out[..., 0] = -2 * u[..., 1] / (1 + r2)
    out[..., 1] = 2 * u[..., 0] / (1 + r2)
    return out


def _sinusoidal(u):
    out = np.zeros(u.shape)
    out[..., 0] = np.sin(u[..., 1]) / math.sqrt(2)
    out[..., 1] = np.cos(u[..., 0]) / math.sqrt(2)
    return out


_FIELDS = {"rotating": _rotating, "swirl": _swirl, "sinusoidal": _sinusoidal}
