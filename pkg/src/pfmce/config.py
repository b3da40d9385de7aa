"""Run configuration: an INI-style document with one section per module.

Every key has a default; unknown sections or keys raise ``ConfigError``.
Lists are comma separated. ``overrides`` of the form ``section.key=value``
take precedence over file values.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .dataset import ChannelConfig
from .pfm import PfmConfig
from .pilot_net import VitConfig
from .trainer import STAGE_DEFAULTS

PILOT_KEYS = ("pilot_seed", "pilot_stride", "pilot_symbols_2p", "pilot_symbols_4p")


class ConfigError(ValueError):
    def __init__(self, message: str, key: str = ""):
        super().__init__(message)
        self.key = key


@dataclass
class TrainSection:
    epochs: int = 3
    batch_size: int = 64
    seed: int = 0
    val_fraction: float = 0.1
    checkpoint_every: int = 0
    # desk-scale rates; the trainer's STAGE_DEFAULTS keep the full-scale values
    lr_adapt: float = 1e-3
    wd_adapt: float = STAGE_DEFAULTS["adapt"][1]
    lr_phase1: float = 1e-3
    wd_phase1: float = STAGE_DEFAULTS["phase1"][1]
    lr_phase2: float = 3e-4
    wd_phase2: float = STAGE_DEFAULTS["phase2"][1]

    def stage_params(self, stage: str) -> tuple[float, float]:
        return getattr(self, f"lr_{stage}"), getattr(self, f"wd_{stage}")


@dataclass
class EvalSection:
    methods: list[str] = field(default_factory=lambda: ["lmmse", "linear", "vit", "pfm-ce"])
    snrs_db: list[float] = field(default_factory=lambda: [5.0, 10.0, 15.0, 20.0, 25.0])
    speeds_kmh: list[float] = field(default_factory=lambda: [30.0, 90.0, 300.0])
    patterns: list[str] = field(default_factory=lambda: ["2P", "4P"])
    profiles: list[str] = field(default_factory=lambda: ["mixed"])
    n_trajectories: int = 200
    seed: int = 1234
    interpolation: str = "lmmse"


@dataclass
class RunConfig:
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    # desk-scale model sizes; the full-size configs remain available
    pfm: PfmConfig = field(default_factory=lambda: PfmConfig(d_model=128, n_heads=4, fusion_residual=True))
    vit: VitConfig = field(default_factory=lambda: VitConfig(n_layers=4, d_model=64, d_ffn=128, dec_channels=16, input_skip=True))
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = 0  # dataset seed

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pilot"] = {k: d["channel"].pop(k) for k in PILOT_KEYS}
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def to_text(self) -> str:
        d = self.to_dict()
        seed = d.pop("seed")
        lines = ["[channel]", f"seed = {seed}"]
        for section, values in d.items():
            if section != "channel":
                lines.append(f"\n[{section}]")
            for key, value in values.items():
                lines.append(f"{key} = {_format(value)}")
        return "\n".join(lines) + "\n"


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, list):
        return ", ".join(str(v) for v in value)
    return str(value)


def _parse(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, list):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            kind = type(default[0]) if default else str
            return [kind(s) for s in items]
        if default is None or isinstance(default, int):
            return None if raw == "" else int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}", key) from exc


def _sections(cfg: RunConfig) -> dict[str, object]:
    return {"channel": cfg.channel, "pilot": cfg.channel, "pfm": cfg.pfm, "vit": cfg.vit, "train": cfg.train, "eval": cfg.eval}


def _allowed(section: str, target) -> set[str]:
    names = {f.name for f in dataclasses.fields(target)}
    if section == "pilot":
        return set(PILOT_KEYS)
    if section == "channel":
        return (names - set(PILOT_KEYS)) | {"seed"}
    return names


def apply(cfg: RunConfig, section: str, key: str, raw: str) -> None:
    targets = _sections(cfg)
    full = f"{section}.{key}"
    if section not in targets:
        raise ConfigError(f"unknown section [{section}]", full)
    target = targets[section]
    if key not in _allowed(section, target):
        raise ConfigError(f"unknown key {full}", full)
    if section == "channel" and key == "seed":
        cfg.seed = _parse(raw, 0, full)
        return
    setattr(target, key, _parse(raw, getattr(target, key), full))


def _revalidate(cfg: RunConfig) -> None:
    for section in ("pfm", "vit"):
        try:
            getattr(cfg, section).__post_init__()
        except ValueError as exc:
            raise ConfigError(f"[{section}] {exc}", section) from exc


def load_config(path: str | Path | None = None, overrides: list[str] | tuple[str, ...] = ()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if parser.defaults():
            raise ConfigError(f"unknown key DEFAULT.{next(iter(parser.defaults()))}", "DEFAULT")
        for section in parser.sections():
            for key, raw in parser.items(section):
                apply(cfg, section, key, raw)
    for item in overrides:
        name, sep, raw = item.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override must look like section.key=value, got {item!r}", name)
        apply(cfg, section, key, raw)
    _revalidate(cfg)
    return cfg
