"""Run configuration: one INI section per module config, strict key checking."""

from __future__ import annotations

import configparser
import dataclasses
import io
import os
import typing
from dataclasses import dataclass, field
from typing import Optional

from .autoencoder import AEConfig
from .energy_transformer import ETConfig, GuidanceConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    seed: int = 0
    out: str = "runs/default"
    dtype: str = "float64"


@dataclass
class SimulateSection:
    n_trials: int = 7000
    n_neurons: int = 128
    n_bins: int = 256
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0
    dt: float = 0.01
    burn_in: int = 1000
    perturb_std: float = 0.5
    gain: float = 1.0
    base_rate: float = 0.3
    bin_width: float = 0.005
    val_fraction: float = 0.1
    behavior: str = "velocity"
    velocity_noise: float = 0.1


@dataclass
class SampleSection:
    count: int = 2008
    steps: int = 64
    temperature: float = 0.7
    batch_size: int = 256


@dataclass
class MetricsSection:
    ridge_lambda: float = 10.0
    ridge_grid: str = "0.1,1,10,100"
    kl_eps: float = 1e-6


def _ae_train_defaults():
    return TrainConfig(learning_rate=1e-3, epochs=1000, warmup_epochs=0, batch_size=128, patience=50)


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    lorenz: SimulateSection = field(default_factory=SimulateSection)
    autoencoder: AEConfig = field(default_factory=AEConfig)
    train_ae: TrainConfig = field(default_factory=_ae_train_defaults)
    energy_transformer: ETConfig = field(default_factory=ETConfig)
    train_eag: TrainConfig = field(default_factory=TrainConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    sample: SampleSection = field(default_factory=SampleSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)

    # set by the command line; wins over EAG_SEED and the file
    seed_override: typing.ClassVar[Optional[int]] = None

    def seed(self) -> int:
        if self.seed_override is not None:
            return self.seed_override
        env = os.environ.get("EAG_SEED")
        return int(env) if env not in (None, "") else self.run.seed


SECTIONS = [f.name for f in dataclasses.fields(RunConfig)]


def _section_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _parse_value(raw: str, tp, path: str):
    optional = typing.get_origin(tp) is typing.Union and type(None) in typing.get_args(tp)
    if optional:
        if raw.strip().lower() in ("none", ""):
            return None
        tp = next(a for a in typing.get_args(tp) if a is not type(None))
    try:
        if tp is bool:
            low = raw.strip().lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw.strip()
    except ValueError:
        raise ConfigError(f"{path}: cannot parse {raw!r} as {tp.__name__}") from None
    raise ConfigError(f"{path}: unsupported field type {tp}")


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config(text: str) -> RunConfig:
    """Parse INI text; unknown sections or keys raise ConfigError naming the path."""
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    kwargs = {}
    defaults = RunConfig()
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"[{section}]: unknown section")
        base = getattr(defaults, section)
        cls = type(base)
        types = _section_types(cls)
        values = {}
        for key, raw in cp.items(section):
            if key not in types:
                raise ConfigError(f"{section}.{key}: unknown key")
            values[key] = _parse_value(raw, types[key], f"{section}.{key}")
        try:
            kwargs[section] = dataclasses.replace(base, **values)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{section}]: {exc}") from None
    return RunConfig(**kwargs)


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as fh:
        return parse_config(fh.read())


def dump_config(cfg: RunConfig) -> str:
    """Canonical INI text: every section and key, in declaration order."""
    out = io.StringIO()
    for i, section in enumerate(SECTIONS):
        obj = getattr(cfg, section)
        if i:
            out.write("\n")
        out.write(f"[{section}]\n")
        for f in dataclasses.fields(obj):
            out.write(f"{f.name} = {_format_value(getattr(obj, f.name))}\n")
    return out.getvalue()


def section_dict(obj) -> dict:
    return dataclasses.asdict(obj)
