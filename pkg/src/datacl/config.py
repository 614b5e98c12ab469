"""Run configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, fields
from pathlib import Path

from .tasks import StreamConfig

METHODS = ("data", "seqlora", "data_replay", "lora_replay")
ABLATION_FLAGS = ("high_branch", "low_branch", "weighting", "attention", "ortho", "restore")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    method: str = "data"
    high_branch: bool = True
    low_branch: bool = True
    weighting: bool = True
    attention: bool = True
    ortho: bool = True
    restore: bool = True
    beta: float = 10.0
    lr: float = 1e-4
    epochs: int = 1
    batch_size: int = 16
    replay_ratio: float = 0.02
    seed: int = 0
    scalar_lambda: bool = False
    dual_bank: bool = False
    d_l: int = 2
    d_h: int = 8
    L_w: int = 8
    per_task: int = 2
    restore_p: float = 0.01
    restore_interval: int = 200
    hidden: int = 64
    pretrain_steps: int = 300
    static_eval: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method: must be one of {METHODS}, got {self.method!r}")
        checks = [
            ("replay_ratio", 0.0 <= self.replay_ratio <= 0.5, "in [0, 0.5]"),
            ("beta", self.beta >= 0, ">= 0"),
            ("lr", self.lr > 0 and math.isfinite(self.lr), "> 0"),
            ("epochs", self.epochs >= 0, ">= 0"),
            ("batch_size", self.batch_size >= 1, ">= 1"),
            ("d_l", self.d_l >= 1, ">= 1"),
            ("d_h", self.d_h > self.d_l, f"> d_l ({self.d_l})"),
            ("L_w", self.L_w >= 2 and self.L_w % 2 == 0, "even and >= 2"),
            ("per_task", self.per_task >= 1, ">= 1"),
            ("restore_p", 0.0 <= self.restore_p <= 1.0, "in [0, 1]"),
            ("restore_interval", self.restore_interval >= 1, ">= 1"),
            ("hidden", self.hidden >= self.d_h, f">= d_h ({self.d_h})"),
            ("pretrain_steps", self.pretrain_steps >= 0, ">= 0"),
        ]
        for name, ok, bound in checks:
            if not ok:
                raise ConfigError(f"{name}: must be {bound}, got {getattr(self, name)!r}")

    @property
    def is_lora(self) -> bool:
        return self.method in ("seqlora", "lora_replay")

    @property
    def uses_replay(self) -> bool:
        return self.method in ("data_replay", "lora_replay")

    def flag(self, name: str) -> bool:
        """Ablation flag in effect; the LoRA baselines run the high branch alone."""
        if self.is_lora:
            return name == "high_branch"
        if name == "attention":
            return self.weighting and self.attention
        return getattr(self, name)


def _parse_value(raw: str, typ, key: str):
    raw = raw.strip()
    if typ is bool or typ == "bool":
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if typ is int or typ == "int":
            return int(raw)
        if typ is float or typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {typ if isinstance(typ, str) else typ.__name__}, got {raw!r}")
    return raw


def _field_types(cls) -> dict:
    return {f.name: f.type for f in fields(cls)}


STREAM_PREFIX = "stream."


def parse_config_text(text: str) -> tuple[RunConfig, StreamConfig]:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Stream keys carry a ``stream.`` prefix. ``method`` is mandatory. Unknown
    keys are reported together.
    """
    run_types = _field_types(RunConfig)
    stream_types = _field_types(StreamConfig)
    run_kw: dict = {}
    stream_kw: dict = {}
    unknown = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith(STREAM_PREFIX) and key[len(STREAM_PREFIX):] in stream_types:
            name = key[len(STREAM_PREFIX):]
            stream_kw[name] = _parse_value(value, stream_types[name], key)
        elif key in run_types:
            run_kw[key] = _parse_value(value, run_types[key], key)
        else:
            unknown.append(key)
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(unknown)}")
    if "method" not in run_kw:
        raise ConfigError("method: required (one of " + ", ".join(METHODS) + ")")
    try:
        stream = StreamConfig(**stream_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(**run_kw), stream


def load_config(path) -> tuple[RunConfig, StreamConfig]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def config_dict(cfg: RunConfig, stream: StreamConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d.update({STREAM_PREFIX + k: v for k, v in dataclasses.asdict(stream).items()})
    return d


def config_hash(cfg: RunConfig, stream: StreamConfig) -> str:
    blob = json.dumps(config_dict(cfg, stream), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def dump_config(cfg: RunConfig, stream: StreamConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config_dict(cfg, stream).items())
