"""Run configuration: flat ``section.key=value`` text with a default for every field."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .codec import TASKS
from .datagen import SplitSpec, WorldConfig
from .model import ModelConfig

TRAIN_MODES = ("multitask", "continual", "single")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 2e-4
    weight_decay: float = 0.01
    batch: int = 24
    accumulation: int = 2
    warmup: float = 0.01
    mode: str = "multitask"
    tasks: tuple[str, ...] = TASKS
    rec_per_user: int = 0  # 0 = every training position
    aux_per_user: int = 1
    eval_users: int = 0  # 0 = all validation users
    clip_norm: float = 1.0


@dataclass
class LossConfig:
    gamma: float = 2.0
    context: bool = True
    reweight: bool = True
    weights: dict[str, float] = field(default_factory=lambda: {t: 1.0 for t in TASKS})


@dataclass
class DecodeConfig:
    beam: int = 10
    retrieved: int = 2
    filter_seen: bool = False
    expl_max_len: int = 16


@dataclass
class PathConfig:
    data: str = "data"
    run: str = "run"


@dataclass
class RunConfig:
    seed: int = 0
    num_codes: int = 64
    value_tokens: int = 8
    history_items: int = 5
    world: WorldConfig = field(default_factory=WorldConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    paths: PathConfig = field(default_factory=PathConfig)

    def validate(self) -> "RunConfig":
        if self.train.mode not in TRAIN_MODES:
            raise ConfigError(f"train.mode must be one of {TRAIN_MODES}, got {self.train.mode!r}")
        bad = [t for t in self.train.tasks if t not in TASKS]
        if bad:
            raise ConfigError(f"train.tasks: unknown task {bad[0]!r}")
        if self.train.batch % self.train.accumulation:
            raise ConfigError("train.batch must be divisible by train.accumulation")
        if self.decode.retrieved > self.decode.beam:
            raise ConfigError("decode.retrieved must not exceed decode.beam")
        missing = [t for t in self.train.tasks if t not in self.loss.weights]
        if missing:
            raise ConfigError(f"loss.weights.{missing[0]} is required for a trained task")
        return self

    def seeded(self, seed: int) -> "RunConfig":
        """Copy with one seed applied to the world, split, model and run."""
        cfg = dataclasses.replace(self)
        cfg.seed = seed
        cfg.world = dataclasses.replace(self.world, seed=seed)
        cfg.split = dataclasses.replace(self.split, seed=seed)
        cfg.model = dataclasses.replace(self.model, seed=seed)
        return cfg

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in flatten(self).items())

    def digest(self) -> str:
        """Hash of every setting except file locations, which do not change results."""
        lines = [ln for ln in self.to_text().splitlines() if not ln.startswith("paths.")]
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()


def _format(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def flatten(cfg: RunConfig) -> dict[str, str]:
    out: dict[str, str] = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            for g in fields(v):
                sub = getattr(v, g.name)
                if isinstance(sub, dict):
                    for k in sorted(sub):
                        out[f"{f.name}.{g.name}.{k}"] = _format(sub[k])
                else:
                    out[f"{f.name}.{g.name}"] = _format(sub)
        else:
            out[f.name] = _format(v)
    return out


def _coerce(key: str, kind: str, text: str) -> Any:
    text = text.strip()
    try:
        if kind in ("bool",):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind.startswith("tuple"):
            return tuple(x.strip() for x in text.split(",") if x.strip())
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind}") from None


def apply_overrides(cfg: RunConfig, pairs: dict[str, str]) -> RunConfig:
    for key, text in pairs.items():
        parts = key.strip().split(".")
        if len(parts) == 1:
            target, name = cfg, parts[0]
        else:
            section = getattr(cfg, parts[0], None)
            if section is None or not dataclasses.is_dataclass(section):
                raise ConfigError(f"unknown config key {key!r}")
            target, name = section, parts[1]
        kinds = {f.name: str(f.type) for f in fields(target)}
        if name not in kinds:
            raise ConfigError(f"unknown config key {key!r}")
        if kinds[name].startswith("dict"):
            if len(parts) != 3:
                raise ConfigError(f"config key {key!r} needs a task suffix, e.g. {key}.rec")
            if parts[2] not in TASKS:
                raise ConfigError(f"unknown config key {key!r}")
            getattr(target, name)[parts[2]] = _coerce(key, "float", text)
            continue
        if len(parts) > 2:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(target, name, _coerce(key, kinds[name], text))
    # re-run dataclass validation on touched sections
    try:
        cfg.world = dataclasses.replace(cfg.world)
        cfg.model = dataclasses.replace(cfg.model)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.split.new_domains = tuple(cfg.split.new_domains)
    return cfg.validate()


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    pairs: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        pairs.update(parse_text(p.read_text(), str(p)))
    pairs.update(overrides or {})
    return apply_overrides(cfg, pairs)
