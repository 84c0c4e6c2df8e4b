"""Run configuration: defaults, key=value config files, flag overrides, hashing.

Precedence is flag > file > default. Unknown keys are rejected so typos
fail loudly. The resolved configuration has a stable hash that is
embedded in run records, checkpoints, and reports.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import UsageError

MODES = ("baseline", "llm")
DECODERS = ("mbr", "viterbi")
PRECISIONS = ("f32", "f64")


@dataclass
class TrainConfig:
    n_nonterminals: int = 30
    n_preterminals: int = 60
    dim: int = 256
    z_dim: int = 64
    mode: str = "baseline"
    zero_train: bool = False
    epochs: int = 10
    batch_size: int = 16
    lr: float = 0.001
    dropout: float = 0.5
    clip_norm: float = 3.0
    max_length: int = 45
    vocab_size: int = 10000
    seed: int = 0
    precision: str = "f32"
    decoder: str = "mbr"

    def __post_init__(self):
        if self.epochs < 1:
            raise UsageError("epochs must be >= 1")
        if self.lr <= 0:
            raise UsageError("lr must be > 0")
        if not 0.0 <= self.dropout < 1.0:
            raise UsageError("dropout must be in [0, 1)")
        for key, allowed in (("mode", MODES), ("decoder", DECODERS), ("precision", PRECISIONS)):
            if getattr(self, key) not in allowed:
                raise UsageError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")


_FIELDS = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELDS[key]
    try:
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise UsageError(f"bad value for {key}: {raw!r}")


def parse_config_file(path: str | Path) -> dict:
    """key=value lines; '#' starts a comment; blank lines ignored."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def resolve_config(file_values: dict | None = None, overrides: dict | None = None) -> TrainConfig:
    """Merge defaults, file values, and flag overrides (None = unset)."""
    merged = dict(file_values or {})
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELDS:
            raise UsageError(f"unknown config key {key!r}")
        merged[key] = value
    return TrainConfig(**merged)


def config_hash(config: TrainConfig) -> str:
    text = "\n".join(f"{f.name}={getattr(config, f.name)}" for f in fields(TrainConfig))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def config_dict(config: TrainConfig) -> dict:
    return {f.name: getattr(config, f.name) for f in fields(TrainConfig)}
