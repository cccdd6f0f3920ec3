"""Strict sectioned configuration.

The file format is INI: one ``[section]`` per config group, ``key = value``
lines, values written as Python literals (``0.1``, ``(0, 2, 4)``, ``"full"``,
``true``). Unknown sections or keys are errors. Every key has a default, so
an empty file is a valid config.
"""

from __future__ import annotations

import ast
import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_type_hints

from .backbone import BackboneConfig
from .bitransformer import BiTConfig
from .errors import ConfigError
from .generation import CONTINUOUS, GenerationConfig
from .retrieval import RetrievalConfig


@dataclass
class ScheduleConfig:
    initial_frac: float = 0.1
    progressive_frac: float = 0.7
    r_initial: float = 0.15
    r_progressive_end: float = 0.75
    r_final: float = 1.0
    mode: str = CONTINUOUS


@dataclass
class TrainerConfig:
    # stage 1
    stage1_steps: int = 3000
    stage1_batch: int = 32
    stage1_lr: float = 2e-3
    stage1_mode: str = "full"  # "full" or "lora"
    lora_targets: tuple[str, ...] = ("backbone.blocks.*.attn.*.weight", "backbone.blocks.*.mlp.*.weight")
    lora_r: int = 4
    lora_scale: float = 1.0
    task_mix: tuple[float, float, float] = (0.4, 0.3, 0.3)  # caption, edit, generation prompt
    # stage 2
    stage2_steps: int = 6000
    gen_batch: int = 64
    itc_batch: int = 128
    stage2_lr: float = 1e-3
    gen_weight: float = 1.0
    itc_weight: float = 1.0
    init_frac: float = 0.1
    init_lr_factor: float = 0.1
    # shared
    warmup_steps: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    log_every: int = 50
    checkpoint_every: int = 0  # 0: only the final checkpoint
    log_wall_time: bool = False

    def __post_init__(self):
        if self.stage1_mode not in ("full", "lora"):
            raise ConfigError(f"trainer.stage1_mode must be 'full' or 'lora', got {self.stage1_mode!r}")


@dataclass
class DataConfig:
    dir: str = "data"
    n_train: int = 4096
    n_test: int = 512
    featurizer_seed: int = 0
    edit_prob: float = 0.5


@dataclass
class SeedConfig:
    root: int = 20240917
    data: int = 1


@dataclass
class Config:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    bitransformer: BiTConfig = field(default_factory=BiTConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    schedules: ScheduleConfig = field(default_factory=ScheduleConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        """Hash of everything that fixes parameter shapes, init and data encoding."""
        d = self.to_dict()
        keep = {k: d[k] for k in ("backbone", "bitransformer", "retrieval", "generation")}
        keep["featurizer_seed"] = self.data.featurizer_seed
        keep["root_seed"] = self.seeds.root
        return hashlib.sha256(json.dumps(keep, sort_keys=True).encode()).hexdigest()[:16]

    def dumps(self) -> str:
        lines = []
        for sec in dataclasses.fields(self):
            lines.append(f"[{sec.name}]")
            for k, v in dataclasses.asdict(getattr(self, sec.name)).items():
                lines.append(f"{k} = {v!r}")
            lines.append("")
        return "\n".join(lines)


def _coerce(section: str, key: str, raw: str, typ, current):
    text = raw.strip()
    lowered = text.lower()
    if lowered in ("true", "false"):
        value = lowered == "true"
    else:
        try:
            value = ast.literal_eval(text)
        except (ValueError, SyntaxError):
            value = text
    where = f"{section}.{key}"
    origin = getattr(typ, "__origin__", typ)
    if origin is tuple or isinstance(current, tuple):
        if isinstance(value, (int, float, str)):
            value = (value,)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a sequence, got {raw!r}")
        return tuple(value)
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {raw!r}")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {raw!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {raw!r}")
        return float(value)
    if isinstance(current, str):
        return str(value)
    raise ConfigError(f"{where}: unsupported value {raw!r}")


def parse_config(text: str, overrides: dict[str, str] | None = None) -> Config:
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    raw: dict[str, dict[str, str]] = {s: dict(parser.items(s)) for s in parser.sections()}
    for dotted, value in (overrides or {}).items():
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        sec, key = dotted.split(".", 1)
        raw.setdefault(sec, {})[key] = value
    base = Config()
    sections = {f.name: f for f in dataclasses.fields(Config)}
    built = {}
    for name in sections:
        default = getattr(base, name)
        given = raw.pop(name, {})
        hints = get_type_hints(type(default))
        known = {f.name for f in dataclasses.fields(default)}
        values = {}
        for key, val in given.items():
            if key not in known:
                raise ConfigError(f"unknown config key {name}.{key}")
            values[key] = _coerce(name, key, val, hints.get(key), getattr(default, key))
        try:
            built[name] = dataclasses.replace(default, **values)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{name}]: {exc}") from exc
    if raw:
        raise ConfigError(f"unknown config section(s): {sorted(raw)}")
    return Config(**built)


def load_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> Config:
    if path is None:
        return parse_config("", overrides)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, overrides)
