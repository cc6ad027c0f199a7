"""Run configuration: nested dataclasses loaded from YAML.

Validation (types, unknown keys, missing fields) goes through pydantic's
``TypeAdapter`` on the plain dataclasses, so errors carry a dotted field path.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Optional

import yaml
from pydantic import ConfigDict, TypeAdapter, ValidationError

_STRICT = ConfigDict(extra="forbid")


class ConfigError(ValueError):
    """Schema violation; the message starts with the offending field path."""


def _section(cls):
    cls.__pydantic_config__ = _STRICT
    return dataclass(cls)


@_section
class DiffusionConfig:
    name: str = "identity"
    d: int = 2
    scale: float = 1.0
    amp: float = 0.5
    sigma: Optional[list[list[float]]] = None


@_section
class KernelConfig:
    name: str = "biot-savart"
    alpha: Optional[float] = None
    gamma: Optional[float] = None
    eps: Optional[float] = None
    # eps = eps_factor * R when eps is not given
    eps_factor: float = 1e-8


@_section
class VorticityConfig:
    name: str = "bump"
    center: list[float] = field(default_factory=lambda: [0.0, 0.0])
    radius: float = 0.5
    amp: float = 1.0
    component: int = 0
    lo: Optional[list[float]] = None
    hi: Optional[list[float]] = None
    value: Optional[list[float]] = None


@_section
class ConstantsConfig:
    xi: Optional[float] = None
    A: Optional[float] = None
    kappa: Optional[float] = None
    kappa_prime: Optional[float] = None
    q: Optional[float] = None
    R: Optional[float] = None
    tau_fraction: float = 0.25


@_section
class DriftConfig:
    kind: str = "zero"
    vector: list[float] = field(default_factory=lambda: [0.0, 0.0])
    amplitude: float = 1.0
    relative_to_L: bool = False
    scale: float = 1.0
    lo: list[float] = field(default_factory=lambda: [-3.0, -3.0])
    hi: list[float] = field(default_factory=lambda: [3.0, 3.0])
    nodes: list[int] = field(default_factory=lambda: [17, 17])


@_section
class SimulateConfig:
    starts: list[list[float]] = field(default_factory=lambda: [[0.0, 0.0]])
    horizon: float = 0.25
    steps: int = 25
    paths: int = 200
    drift: DriftConfig = field(default_factory=DriftConfig)


def _default_test_drifts():
    return [DriftConfig(kind="constant", vector=[1.0, 0.0]),
            DriftConfig(kind="rotating", amplitude=2.0, scale=0.5),
            DriftConfig(kind="swirl", amplitude=1.5)]


@_section
class GirsanovConfig:
    start: list[float] = field(default_factory=lambda: [0.0, 0.0])
    paths: int = 20000
    steps: int = 25
    horizon: float = 0.25
    times: list[float] = field(default_factory=lambda: [0.1, 0.25])
    moments: list[float] = field(default_factory=lambda: [2.0, 4.0])
    drifts: list[DriftConfig] = field(default_factory=_default_test_drifts)


@_section
class MCConfig:
    samples: int = 2000
    paths: int = 1
    substeps: int = 2
    batches: int = 20


@_section
class GridConfig:
    lo: list[float] = field(default_factory=lambda: [-1.0, -1.0])
    hi: list[float] = field(default_factory=lambda: [1.0, 1.0])
    nodes: list[int] = field(default_factory=lambda: [9, 9])
    n_times: int = 3
    # None selects the bundle's tau
    horizon: Optional[float] = None


@_section
class KopConfig:
    mc: MCConfig = field(default_factory=MCConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    drift: DriftConfig = field(default_factory=DriftConfig)


@_section
class FixpointConfig:
    mc: MCConfig = field(default_factory=MCConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    b0: DriftConfig = field(default_factory=DriftConfig)
    tol: float = 1e-6
    max_iter: int = 10


@_section
class DensityConfig:
    start: list[float] = field(default_factory=lambda: [0.0, 0.0])
    t: float = 0.25
    paths: int = 20000
    steps: int = 25
    bins: int = 20
    half_width: float = 2.0
    drift: DriftConfig = field(
        default_factory=lambda: DriftConfig(kind="constant", vector=[1.0, 0.5]))
    targets: list[list[float]] = field(
        default_factory=lambda: [[0.0, 0.0], [0.25, 0.125], [0.5, 0.0]])
    representation_paths: int = 20000
    representation_steps: int = 25


@_section
class NvortexConfig:
    N: int = 500
    steps: int = 10
    dt: float = 1e-3
    replica: int = 0
    noise: bool = True


@_section
class ChaosConfig:
    Ns: list[int] = field(default_factory=lambda: [100, 300, 1000])
    replicas: int = 4
    steps: int = 1
    probe_nodes: list[int] = field(default_factory=lambda: [3, 3])
    probe_lo: list[float] = field(default_factory=lambda: [-0.4, -0.4])
    probe_hi: list[float] = field(default_factory=lambda: [0.4, 0.4])
    reference_samples: int = 20000


@_section
class OutputConfig:
    dir: str = "out"
    csv: bool = True


@_section
class RunConfig:
    scenario: str
    seed: int
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    vorticity: VorticityConfig = field(default_factory=VorticityConfig)
    constants: ConstantsConfig = field(default_factory=ConstantsConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    girsanov: GirsanovConfig = field(default_factory=GirsanovConfig)
    kop: KopConfig = field(default_factory=KopConfig)
    fixpoint: FixpointConfig = field(default_factory=FixpointConfig)
    density: DensityConfig = field(default_factory=DensityConfig)
    nvortex: NvortexConfig = field(default_factory=NvortexConfig)
    chaos: ChaosConfig = field(default_factory=ChaosConfig)
    output: OutputConfig = field(default_factory=OutputConfig)


_ADAPTER = TypeAdapter(RunConfig)


def _format(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{path}: {e['msg']}")
    return "; ".join(lines)


def from_dict(data) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>: config must be a mapping")
    try:
        cfg = _ADAPTER.validate_python(data)
    except ValidationError as exc:
        raise ConfigError(_format(exc)) from None
    if cfg.seed < 0 or cfg.seed >= 2**64:
        raise ConfigError("seed: must lie in [0, 2^64)")
    return cfg


def to_dict(cfg: RunConfig) -> dict:
    return asdict(cfg)


def loads(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"<root>: invalid YAML ({exc})") from None
    return from_dict(data)


def load(path) -> RunConfig:
    with open(path) as fh:
        return loads(fh.read())


def dumps(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def config_hash(cfg: RunConfig) -> str:
    """SHA-256 of the canonical JSON form of the config."""
    blob = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` strings (values parsed as YAML) to a raw dict."""
    data = json.loads(json.dumps(data))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"{item}: override must look like key.path=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key}: {p} is not a section")
        node[parts[-1]] = yaml.safe_load(raw)
    return data


def desk_scenario_text() -> str:
    return resources.files("mvsde").joinpath("scenarios/desk.yaml").read_text()


def desk_scenario() -> RunConfig:
    return loads(desk_scenario_text())
