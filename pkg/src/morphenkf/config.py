"""Run configuration read from flat ``section.key = value`` text files."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from importlib import resources

from .field import GridGeometry
from .firemodel import FireModelParams
from .morphing_enkf import MorphingEnKFConfig
from .registration import RegistrationConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GridConfig:
    nx: int = 125
    ny: int = 125
    Lx: float = 250.0
    Ly: float = 250.0

    def geometry(self) -> GridGeometry:
        return GridGeometry(self.nx, self.ny, self.Lx, self.Ly)


@dataclass(frozen=True)
class ModelConfig:
    k_diff: float = FireModelParams.k_diff
    wind_x: float = FireModelParams.wind[0]
    wind_y: float = FireModelParams.wind[1]
    w_ambient: float = FireModelParams.w_ambient
    w_ignition: float = FireModelParams.w_ignition
    A: float = FireModelParams.A
    B: float = FireModelParams.B
    C_fuel: float = FireModelParams.C_fuel
    gamma: float = FireModelParams.gamma
    dt: float = FireModelParams.dt
    cycle_len: float = FireModelParams.cycle_len
    spinup_cycles: int = 2
    ignition_size: float = 20.0

    def params(self) -> FireModelParams:
        return FireModelParams(self.k_diff, (self.wind_x, self.wind_y), self.w_ambient, self.w_ignition,
                               self.A, self.B, self.C_fuel, self.gamma, self.dt, self.cycle_len)


@dataclass(frozen=True)
class EnsembleConfig:
    members: int = 50
    amp_r: float = 50.0
    amp_T: float = 5.0
    modes: int = 10
    max_tries: int = 100


@dataclass(frozen=True)
class FilterConfig:
    sigma_r: float = 50.0
    sigma_T: float = 5.0
    assimilate_fuel: bool = False
    max_halvings: int = 10


@dataclass(frozen=True)
class DataConfig:
    """The truth is the reference fire displaced by ``shift * sin(pi x) sin(pi y)``."""

    shift_x: float = 10.0
    shift_y: float = 5.0


@dataclass(frozen=True)
class RunSettings:
    cycles: int = 5
    seed: int = 1
    out: str = "run_out"
    workers: int = 1
    probe_row: int = -1
    probe_col: int = -1
    bandwidth_factor: float = 0.3
    fireline_contour: float = 800.0


SECTIONS = {
    "grid": GridConfig,
    "model": ModelConfig,
    "reg": RegistrationConfig,
    "ens": EnsembleConfig,
    "filter": FilterConfig,
    "data": DataConfig,
    "run": RunSettings,
}


@dataclass(frozen=True)
class RunConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    reg: RegistrationConfig = field(default_factory=RegistrationConfig)
    ens: EnsembleConfig = field(default_factory=EnsembleConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    data: DataConfig = field(default_factory=DataConfig)
    run: RunSettings = field(default_factory=RunSettings)

    def validate(self) -> "RunConfig":
        try:
            g = self.grid.geometry()
            self.model.params().check_stability(g)
            self.enkf_config()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.ens.members < 2:
            raise ConfigError("ens.members must be at least 2")
        if self.run.cycles < 0:
            raise ConfigError("run.cycles must be non-negative")
        if self.ens.modes < 1 or self.ens.amp_r < 0 or self.ens.amp_T < 0 or self.ens.max_tries < 1:
            raise ConfigError("invalid ensemble settings")
        if self.model.spinup_cycles < 0 or not self.model.ignition_size > 0:
            raise ConfigError("invalid spin-up settings")
        return self

    def enkf_config(self) -> MorphingEnKFConfig:
        f = self.filter
        return MorphingEnKFConfig(self.reg, f.sigma_r, f.sigma_T, f.assimilate_fuel,
                                  f.max_halvings, self.run.workers)

    def replace(self, section: str, **changes) -> "RunConfig":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})

    def to_text(self) -> str:
        lines = []
        for name in SECTIONS:
            sub = getattr(self, name)
            for f in dataclasses.fields(sub):
                lines.append(f"{name}.{f.name} = {_format(getattr(sub, f.name))}")
        return "\n".join(lines) + "\n"


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw: str, typ, key: str):
    if typ in (bool, "bool"):
        low = raw.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    conv = {int: int, "int": int, float: float, "float": float, str: str, "str": str}.get(typ)
    if conv is None:
        raise ConfigError(f"{key}: unsupported type")
    try:
        return conv(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Apply ``section.key = value`` lines on top of ``base``.

    Blank lines and ``#`` comments are ignored; unknown keys are errors.
    """
    cfg = base or RunConfig()
    updates: dict[str, dict] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in SECTIONS:
            raise ConfigError(f"line {lineno}: unknown section in {key!r}")
        types = {f.name: f.type for f in dataclasses.fields(SECTIONS[section])}
        if name not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        updates.setdefault(section, {})[name] = _parse(raw, types[name], key)
    for section, changes in updates.items():
        try:
            cfg = cfg.replace(section, **changes)
        except ValueError as e:
            raise ConfigError(f"{section}: {e}") from e
    return cfg


BUILTIN = ("desk", "full")


def load_config(path_or_name: str | None) -> RunConfig:
    """Read a config file, or one of the bundled ``desk`` / ``full`` configs."""
    if path_or_name is None:
        return RunConfig().validate()
    if path_or_name in BUILTIN and not os.path.exists(path_or_name):
        text = resources.files("morphenkf.configs").joinpath(f"{path_or_name}.cfg").read_text()
    else:
        try:
            with open(path_or_name) as fh:
                text = fh.read()
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from e
    return parse_config(text).validate()
