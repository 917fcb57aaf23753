"""Run configuration files.

Configurations are TOML documents with the sections ``[mesh]``, ``[time]``,
``[model]``, ``[initial]``, ``[boundary]``, ``[newton]``, ``[output]``,
and for the studies ``[eoc]`` and ``[perturb]``.  Every key is optional;
defaults reproduce the one-dimensional convergence setting.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import tomli

from .model import ModelParams
from .solver import NewtonSettings

__all__ = [
    "ConfigError",
    "MeshSpec",
    "TimeSpec",
    "InitialSpec",
    "OutputSpec",
    "EocStudyConfig",
    "PerturbSpec",
    "RunConfig",
    "load_config",
    "parse_config",
    "PROFILES",
]

PROFILES = ("tanh_1d", "perturbed_circle", "ellipsoid_3d", "octahedron_3d", "constant")
_PROFILE_DIM = {"tanh_1d": 1, "perturbed_circle": 2, "ellipsoid_3d": 3, "octahedron_3d": 3}


class ConfigError(ValueError):
    """The configuration cannot be parsed or is inconsistent."""


@dataclass(frozen=True)
class MeshSpec:
    dim: int = 1
    bounds: tuple = (0.0, 1.0)
    n: int = 32
    markers: dict = field(default_factory=dict)
    adapt: bool = False
    h_min: Optional[float] = None
    adapt_every: int = 10
    threshold: float = 0.95


@dataclass(frozen=True)
class TimeSpec:
    T: float = 0.1
    dt: Optional[float] = None
    dt_rule: str = "h2"
    final_step: str = "shorten"


@dataclass(frozen=True)
class InitialSpec:
    profile: str = "tanh_1d"
    centre: tuple = ()
    radius: Optional[float] = None
    amplitude: float = 0.1
    mode: int = 2
    phi: float = -1.0
    sigma: Optional[float] = None


@dataclass(frozen=True)
class OutputSpec:
    dir: str = "out"
    snapshots: int = 20
    vtk: bool = True


@dataclass(frozen=True)
class EocStudyConfig:
    """Convergence study against a fine reference solution."""

    hs: tuple = (1 / 32, 1 / 64, 1 / 128, 1 / 256)
    h_ref: float = 1 / 1024
    T: float = 0.1
    T_precondition: float = 0.01
    quick: bool = False

    def __post_init__(self):
        if not self.hs or any(not h > self.h_ref for h in self.hs):
            raise ConfigError("the reference mesh size must be smaller than every study mesh size")
        for h in (*self.hs, self.h_ref):
            k = 1.0 / h
            if abs(k - round(k)) > 1e-9 or round(k) & (round(k) - 1):
                raise ConfigError(f"mesh size {h} is not a dyadic fraction of the interval, meshes would not nest")
        if any(not b < a for a, b in zip(self.hs, self.hs[1:])):
            raise ConfigError("study mesh sizes must be strictly decreasing; identical levels would give "
                              "zero errors and no convergence order")

    @classmethod
    def quick_mode(cls, **kw) -> "EocStudyConfig":
        return cls(hs=(1 / 32, 1 / 64, 1 / 128), h_ref=1 / 512, quick=True, **kw)


@dataclass(frozen=True)
class PerturbSpec:
    deltas: tuple = (1e-2, 1e-3)
    target: str = "initial"
    T: float = 0.01


@dataclass(frozen=True)
class RunConfig:
    mesh: MeshSpec = MeshSpec()
    time: TimeSpec = TimeSpec()
    params: ModelParams = ModelParams.preset("1d")
    initial: InitialSpec = InitialSpec()
    sigma_inf: float = 1.0
    newton: NewtonSettings = NewtonSettings()
    output: OutputSpec = OutputSpec()
    eoc: EocStudyConfig = EocStudyConfig()
    perturb: PerturbSpec = PerturbSpec()

    @property
    def h(self) -> float:
        """Cell side length of the (base) structured mesh."""
        b = self.mesh.bounds
        return (b[self.mesh.dim] - b[0]) / self.mesh.n

    @property
    def dt(self) -> float:
        if self.time.dt is not None:
            return self.time.dt
        if self.time.dt_rule == "h2":
            h = self.mesh.h_min / math.sqrt(self.mesh.dim) if (self.mesh.adapt and self.mesh.h_min) else self.h
            return h * h
        raise ConfigError(f"unknown dt rule {self.time.dt_rule!r}")


def _build(cls, section: dict, name: str, convert=None):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
    values = dict(section)
    for k, fn in (convert or {}).items():
        if k in values:
            values[k] = fn(values[k])
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def _model(section: dict, dim: int) -> ModelParams:
    section = dict(section)
    preset = section.pop("preset", {1: "1d", 2: "2d", 3: "3d"}.get(dim, "1d"))
    names = {f.name for f in dataclasses.fields(ModelParams)} | {"eta"}
    unknown = set(section) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in [model]: {', '.join(sorted(unknown))}")
    try:
        return ModelParams.preset(preset, **section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[model]: {exc}") from exc


_DEFAULT_MESH = {
    1: dict(bounds=(0.0, 1.0), n=32),
    2: dict(bounds=(0.0, 0.0, 12.5, 12.5), n=16, adapt=True, h_min=12.5 / 1024 * math.sqrt(2),
            markers={"left": "neumann", "bottom": "neumann", "right": "robin", "top": "robin"}),
    3: dict(bounds=(0.0, 0.0, 0.0, 3.0, 3.0, 3.0), n=8,
            markers={"left": "neumann", "bottom": "neumann", "front": "neumann",
                     "right": "robin", "top": "robin", "back": "robin"}),
}
_DEFAULT_TIME = {1: {}, 2: dict(T=2.0, dt=1e-3), 3: dict(T=0.5, dt=1e-3)}
_DEFAULT_PROFILE = {1: "tanh_1d", 2: "perturbed_circle", 3: "ellipsoid_3d"}


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse a TOML configuration document."""
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    known = {"mesh", "time", "model", "initial", "boundary", "newton", "output", "eoc", "perturb"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {', '.join(sorted(unknown))}")
    mesh_sec = dict(doc.get("mesh", {}))
    dim = mesh_sec.get("dim", 1)
    if dim not in (1, 2, 3):
        raise ConfigError(f"[mesh] dim must be 1, 2 or 3, got {dim}")
    mesh_sec = {**_DEFAULT_MESH[dim], **mesh_sec, "dim": dim}
    mesh = _build(MeshSpec, mesh_sec, "mesh", {"bounds": lambda b: tuple(float(x) for x in b)})
    if len(mesh.bounds) != 2 * dim:
        raise ConfigError(f"[mesh] bounds needs {2 * dim} numbers for dimension {dim}")
    init_sec = {"profile": _DEFAULT_PROFILE[dim], **doc.get("initial", {})}
    initial = _build(InitialSpec, init_sec, "initial", {"centre": lambda c: tuple(float(x) for x in c)})
    if initial.profile not in PROFILES:
        raise ConfigError(f"[initial] profile must be one of {PROFILES}")
    if _PROFILE_DIM.get(initial.profile, dim) != dim:
        raise ConfigError(f"[initial] profile {initial.profile!r} does not fit dimension {dim}")
    time = _build(TimeSpec, {**_DEFAULT_TIME[dim], **doc.get("time", {})}, "time")
    if time.final_step not in ("shorten", "uniform"):
        raise ConfigError("[time] final_step must be 'shorten' or 'uniform'")
    params = _model(doc.get("model", {}), dim)
    boundary = dict(doc.get("boundary", {}))
    sigma_inf = boundary.pop("sigma_inf", 1.0)
    if boundary:
        raise ConfigError(f"unknown key(s) in [boundary]: {', '.join(sorted(boundary))}")
    newton = _build(NewtonSettings, doc.get("newton", {}), "newton")
    output = _build(OutputSpec, doc.get("output", {}), "output")
    eoc = _build(EocStudyConfig, doc.get("eoc", {}), "eoc", {"hs": tuple})
    perturb = _build(PerturbSpec, doc.get("perturb", {}), "perturb", {"deltas": tuple})
    if perturb.target not in ("initial", "boundary"):
        raise ConfigError("[perturb] target must be 'initial' or 'boundary'")
    return RunConfig(mesh, time, params, initial, float(sigma_inf), newton, output, eoc, perturb)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse_config(text, str(path))
