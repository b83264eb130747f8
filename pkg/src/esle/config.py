"""Run configuration: TOML parsing, validation and the physics hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .dynamics import DriveProtocol, EvolutionMode
from .errors import ConfigError, DomainError
from .kernels import BathSpec, TimeGrids

__all__ = ["RunConfig", "REQUIRED_KEYS", "parse_config", "load_preset", "preset_names"]

REQUIRED_KEYS = ("mode", "kind", "alpha", "omega_c", "beta", "t0", "dt", "n_steps",
                 "runs", "seed")
NORMALIZATIONS = ("ensemble", "trajectory")

# fields that do not change any simulated number
_NON_PHYSICS = ("runs", "output_dir", "checkpoint_every", "tau_slices", "strict_factorization")


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to reproduce a run.  Defaults: hbar = 1, delta = 1,
    report_stride = 1, normalization = "ensemble", chunk_size = 100,
    checkpoint_every = 0 (off), strict_factorization = true."""

    mode: EvolutionMode
    kind: str
    alpha: float
    omega_c: float
    beta: float
    t0: float
    dt: float
    n_steps: int
    m_steps: int
    runs: int
    seed: int
    epsilon0: float
    kappa: float = 0.0
    delta: float = 1.0
    hbar: float = 1.0
    report_stride: int = 1
    normalization: str = "ensemble"
    chunk_size: int = 100
    checkpoint_every: int = 0
    output_dir: str = "esle-output"
    tau_slices: tuple = ()
    strict_factorization: bool = True

    def __post_init__(self):
        try:
            self.bath
            self.grids
            self.protocol
        except DomainError as exc:
            raise ConfigError(str(exc)) from exc
        for name in ("runs", "chunk_size", "report_stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"normalization must be one of {NORMALIZATIONS}")
        for s in self.tau_slices:
            if not 0 <= s <= self.beta * self.hbar:
                raise ConfigError(f"tau slice {s} outside [0, beta*hbar]")

    @property
    def bath(self) -> BathSpec:
        return BathSpec(self.alpha, self.omega_c, self.beta, self.hbar)

    @property
    def grids(self) -> TimeGrids:
        return TimeGrids.for_bath(self.bath, t0=self.t0, dt=self.dt, n_steps=self.n_steps,
                                  m_steps=self.m_steps)

    @property
    def protocol(self) -> DriveProtocol:
        return DriveProtocol(self.kind, self.epsilon0, self.t0, self.kappa, self.delta)

    def physics(self) -> dict:
        d = dataclasses.asdict(self)
        for k in _NON_PHYSICS:
            d.pop(k)
        d["mode"] = self.mode.value
        return d

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.physics(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def echo(self) -> dict:
        d = dataclasses.asdict(self)
        d["mode"] = self.mode.value
        d["tau_slices"] = list(self.tau_slices)
        return d

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_ALLOWED = set(_FIELDS) | {"dtau"}
_INT_KEYS = {"n_steps", "m_steps", "runs", "seed", "report_stride", "chunk_size",
             "checkpoint_every"}
_FLOAT_KEYS = {"alpha", "omega_c", "beta", "t0", "dt", "epsilon0", "kappa", "delta",
               "hbar", "dtau"}


def _coerce(key, value):
    if key in _INT_KEYS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        if isinstance(value, float):
            if not value.is_integer():
                raise ConfigError(f"{key} must be an integer, got {value!r}")
            value = int(value)
        return value
    if key in _FLOAT_KEYS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if key in ("mode", "kind", "normalization", "output_dir"):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
        return value
    if key == "tau_slices":
        if not isinstance(value, list):
            raise ConfigError("tau_slices must be a list of numbers")
        return tuple(float(v) for v in value)
    if key == "strict_factorization":
        if not isinstance(value, bool):
            raise ConfigError("strict_factorization must be true or false")
        return value
    return value


def _from_mapping(raw: dict) -> RunConfig:
    unknown = sorted(set(raw) - _ALLOWED)
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(unknown)}")
    missing = [k for k in REQUIRED_KEYS if k not in raw]
    if "m_steps" not in raw and "dtau" not in raw:
        missing.append("m_steps (or dtau)")
    kind = raw.get("kind")
    if kind == "constant" and "epsilon0" not in raw:
        missing.append("epsilon0")
    if kind == "linear" and "kappa" not in raw:
        missing.append("kappa")
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")

    vals = {k: _coerce(k, v) for k, v in raw.items()}
    if vals["kind"] not in ("constant", "linear"):
        raise ConfigError(f"kind must be 'constant' or 'linear', got {vals['kind']!r}")
    try:
        vals["mode"] = EvolutionMode.parse(vals["mode"])
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc

    beta_hbar = vals["beta"] * vals.get("hbar", 1.0)
    dtau = vals.pop("dtau", None)
    if "m_steps" in vals:
        if dtau is not None and abs(dtau * vals["m_steps"] - beta_hbar) > 1e-12 * beta_hbar:
            raise ConfigError("dtau and m_steps disagree: m_steps*dtau must equal beta*hbar")
    else:
        m = round(beta_hbar / dtau)
        if m < 1 or abs(m * dtau - beta_hbar) > 1e-12 * beta_hbar:
            raise ConfigError(f"dtau = {dtau} does not divide beta*hbar = {beta_hbar}")
        vals["m_steps"] = int(m)

    if vals["kind"] == "linear":
        expected = vals["kappa"] * vals["t0"]
        if "epsilon0" in vals:
            if abs(vals["epsilon0"] - expected) > 1e-12 * max(1.0, abs(expected)):
                raise ConfigError(
                    f"linear protocol requires epsilon0 = kappa*t0 = {expected!r}, "
                    f"got {vals['epsilon0']!r}")
        vals["epsilon0"] = expected
    elif vals.get("kappa", 0.0) != 0.0:
        raise ConfigError("constant protocol does not take a nonzero kappa")
    return RunConfig(**vals)


def parse_config(source) -> RunConfig:
    """Parse a TOML file path (str or Path), or a dict of keys."""
    if isinstance(source, dict):
        return _from_mapping(dict(source))
    path = Path(source)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return _from_mapping(raw)


def preset_names() -> list[str]:
    root = resources.files("esle") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".toml"))


def load_preset(name: str) -> RunConfig:
    root = resources.files("esle") / "presets"
    item = root / f"{name}.toml"
    if not item.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return _from_mapping(tomllib.loads(item.read_text()))
