"""INI experiment configs with sections run, model, noise, schedule, data and pilot.

Every key has a default; unknown sections or keys are rejected so a typo
never silently falls back to a default.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .model import ModelConfig
from .noise import GaussianSpec, NoiseSpec, format_spec, spec_from_mapping
from .pilot import BIAS_TYPES, PilotConfig
from .scheduler import MODES, IdrConfig

DATA_ENV = "IDR_DATA_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    mode: str = "fast"
    seed: int = 0
    workers: int = 1
    out_dir: str = "runs/idr"
    record_time_in_csv: bool = False
    log_every: int = 0


@dataclass
class ModelSection:
    levels: int = 3
    base_channels: int = 16
    in_channels: int = 0  # 0: taken from the data
    slope: float = 0.1
    convs_per_level: int = 1


@dataclass
class ScheduleSection:
    epochs: int = 10
    rounds: int = 4
    epochs_per_round: int = 4
    iters_per_epoch: int = 2000
    batch_size: int = 4
    patch_size: int = 48
    lr: float = 3e-4
    milestones: tuple[float, ...] = (0.5, 0.8)
    lr_factor: float = 0.5
    inference_batch: int = 32
    refine: bool = True


@dataclass
class DataSection:
    train_dir: str = ""
    test_dir: str = ""
    clean_dir: str = ""  # clean oracle for the pilot studies
    synthetic: bool = False
    synthetic_count: int = 80
    synthetic_size: int = 128
    train_fraction: float = 0.7
    data_seed: int = 0


@dataclass
class PilotSection:
    seeds: tuple[int, ...] = (0, 1, 2)
    levels: int = 4
    epochs: int = 4
    bias_type: str = "gaussian_noise"
    sigmas: tuple[float, ...] = (1.0, 3.0, 5.0)


SECTIONS = {
    "run": RunSection,
    "model": ModelSection,
    "schedule": ScheduleSection,
    "data": DataSection,
    "pilot": PilotSection,
}


@dataclass
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    model: ModelSection = field(default_factory=ModelSection)
    noise: NoiseSpec = field(default_factory=lambda: GaussianSpec((5.0, 20.0)))
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    data: DataSection = field(default_factory=DataSection)
    pilot: PilotSection = field(default_factory=PilotSection)
    base_dir: Path = field(default_factory=Path.cwd)

    def idr_config(self) -> IdrConfig:
        s = self.schedule
        return IdrConfig(
            mode=self.run.mode,
            epochs=s.epochs,
            rounds=s.rounds,
            epochs_per_round=s.epochs_per_round,
            iters_per_epoch=s.iters_per_epoch,
            batch_size=s.batch_size,
            patch_size=s.patch_size,
            lr=s.lr,
            milestones=s.milestones,
            lr_factor=s.lr_factor,
            seed=self.run.seed,
            inference_batch=s.inference_batch,
            refine=s.refine,
            workers=self.run.workers,
        )

    def model_config(self, channels: int) -> ModelConfig:
        m = self.model
        if m.in_channels and m.in_channels != channels:
            raise ConfigError(f"model.in_channels = {m.in_channels} but the data has {channels} channels")
        return ModelConfig(m.levels, m.base_channels, channels, m.slope, 0, m.convs_per_level)

    def pilot_config(self) -> PilotConfig:
        train = replace(self.idr_config(), mode="baseline", epochs=self.pilot.epochs)
        return PilotConfig(train, self.pilot.seeds, self.pilot.levels, self.data.train_fraction,
                           self.data.data_seed, self.run.workers)

    def resolve(self, path: str) -> Path:
        """Relative data paths are taken from $IDR_DATA_DIR, else the config's folder."""
        p = Path(path)
        if p.is_absolute():
            return p
        root = os.environ.get(DATA_ENV)
        return (Path(root) if root else self.base_dir) / p

    def to_ini(self) -> str:
        """Resolved config with every default spelled out."""
        lines = []
        for name in ("run", "model", "noise", "schedule", "data", "pilot"):
            lines.append(f"[{name}]")
            if name == "noise":
                lines.extend(format_spec(self.noise).splitlines())
            else:
                section = getattr(self, name)
                for f in fields(section):
                    lines.append(f"{f.name} = {_format_value(getattr(section, f.name))}")
            lines.append("")
        return "\n".join(lines)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            parts = [p for p in raw.replace(",", " ").split() if p]
            return tuple(kind(p) for p in parts)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = ExperimentConfig(base_dir=Path(base_dir) if base_dir is not None else Path.cwd())
    for name in parser.sections():
        if name == "noise":
            try:
                cfg.noise = spec_from_mapping(dict(parser[name]), cfg.base_dir)
            except (ValueError, OSError) as exc:
                raise ConfigError(f"[noise]: {exc}") from None
            continue
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        section = getattr(cfg, name)
        known = {f.name: f for f in fields(section)}
        for key, raw in parser[name].items():
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            setattr(section, key, _convert(raw, getattr(section, key), f"[{name}] {key}"))
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.run.mode not in MODES:
        raise ConfigError(f"[run] mode must be one of {', '.join(MODES)}, got {cfg.run.mode!r}")
    if cfg.pilot.bias_type not in BIAS_TYPES:
        raise ConfigError(f"[pilot] bias_type must be one of {', '.join(BIAS_TYPES)}")
    if cfg.pilot.epochs < 1 or not cfg.pilot.seeds:
        raise ConfigError("[pilot] needs epochs >= 1 and at least one seed")
    try:
        cfg.idr_config()
        cfg.model_config(cfg.model.in_channels or 1)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, path.parent)
