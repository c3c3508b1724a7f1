"""Run configuration: a single JSON document, every section optional.

Defaults reproduce the reference parameter set (strike 90, S0 = 100, T = 1,
barriers 1e-4 and 1, lattice scale 5, n = M = 400).  Units: rates and
volatilities per year, prices in currency units, time in years.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .model import HestonParams, Projection, TruncationBounds


class ConfigError(ValueError):
    pass


TABLE1_X = (0, 5, 10, 15, 20, 25, 30, 35, 40, 45, 50, 55, 60, 70, 80, 90, 100)


@dataclass(frozen=True)
class LatticeConfig:
    n: int = 400
    sigma_tilde: float = 5.0
    M: int = 400


@dataclass(frozen=True)
class McSettings:
    paths: int = 1_000_000
    dt: float = 1e-3
    seed: int = 0
    antithetic: bool = False
    dump: bool = False


@dataclass(frozen=True)
class Table2Config:
    sigma_his: tuple = (0.4, 0.6, 0.8, 1.0, 2.0)
    x: tuple = (0, 10, 20)
    n: int | None = None          # defaults to lattice.n
    M: int | None = None          # defaults to lattice.M


@dataclass(frozen=True)
class LadderConfig:
    """Grids for the M-sensitivity and n-convergence tables."""
    n: tuple = (50, 100, 200, 400, 800)
    M_fractions: tuple = (0.25, 0.5, 1.0)
    x: float = 20.0


@dataclass(frozen=True)
class DiagnosticsConfig:
    n: tuple = (25, 50, 100)
    q: float = 2.0
    jump_paths: int = 1000


@dataclass(frozen=True)
class DemosConfig:
    kais_n: tuple = (10, 100, 1000)
    kais_paths: int = 100_000
    hullwhite_n: tuple = (50, 100, 200, 400)
    hullwhite_paths: int = 100_000
    hullwhite_strike: float = 1.0
    enumerate_n: int = 12


@dataclass(frozen=True)
class RunConfig:
    params: HestonParams = field(default_factory=HestonParams.table1)
    bounds: TruncationBounds = field(default_factory=TruncationBounds.table1)
    lattice: LatticeConfig = field(default_factory=LatticeConfig)
    projection: Projection = Projection.PS1
    mc: McSettings = field(default_factory=McSettings)
    x_grid: tuple = TABLE1_X
    table2: Table2Config = field(default_factory=Table2Config)
    ladder: LadderConfig = field(default_factory=LadderConfig)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    demos: DemosConfig = field(default_factory=DemosConfig)
    out: str = "results"
    threads: int | None = None
    checkpoint: str | None = None
    resume_verb: str = "table1"

    def digest(self) -> str:
        """Hash of everything that affects results (not paths or thread counts)."""
        doc = to_dict(self)
        for key in ("out", "threads", "checkpoint", "resume_verb"):
            doc.pop(key)
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()

    def check_x_on_grid(self, xs, M: int) -> None:
        for x in xs:
            scaled = x / self.params.s0 * M
            if abs(scaled - round(scaled)) > 1e-9 or not 0 <= round(scaled) <= M:
                raise ConfigError(f"x={x} gives x/s0 off the control grid for M={M}")


_SECTIONS = {
    "lattice": LatticeConfig, "mc": McSettings, "table2": Table2Config,
    "ladder": LadderConfig, "diagnostics": DiagnosticsConfig, "demos": DemosConfig,
}


def _build(cls, doc: dict, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from None


def from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    base = RunConfig()
    kw = {}
    if "params" in doc:
        merged = {**asdict(base.params), **doc["params"]}
        kw["params"] = _build(HestonParams, merged, "params")
    if "bounds" in doc:
        merged = {"sigma_lo": base.bounds.sigma_lo, "sigma_hi": base.bounds.sigma_hi,
                  **doc["bounds"]}
        kw["bounds"] = _build(TruncationBounds, merged, "bounds")
    for name, cls in _SECTIONS.items():
        if name in doc:
            merged = {**asdict(getattr(base, name)), **doc[name]}
            kw[name] = _build(cls, merged, name)
    if "projection" in doc:
        try:
            kw["projection"] = Projection(doc["projection"])
        except ValueError:
            raise ConfigError(f"unknown projection {doc['projection']!r}") from None
    for name in ("out", "threads", "checkpoint", "resume_verb"):
        if name in doc:
            kw[name] = doc[name]
    if "x_grid" in doc:
        kw["x_grid"] = tuple(doc["x_grid"])
    cfg = replace(base, **kw)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    lat = cfg.lattice
    if lat.n < 1 or lat.M < 1:
        raise ConfigError("lattice n and M must be >= 1")
    if lat.sigma_tilde < cfg.bounds.sigma_hi:
        raise ConfigError("lattice sigma_tilde must be >= bounds sigma_hi")
    if cfg.mc.paths < 1 or not cfg.mc.dt > 0:
        raise ConfigError("mc paths must be >= 1 and dt > 0")
    if any(x < 0 for x in cfg.x_grid):
        raise ConfigError("x_grid entries must be non-negative")
    if cfg.threads is not None and cfg.threads < 1:
        raise ConfigError("threads must be >= 1")


def load(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}") from None
    return from_dict(doc)


def to_dict(cfg: RunConfig) -> dict:
    doc = asdict(cfg)
    doc["projection"] = Projection(cfg.projection).value
    return doc
