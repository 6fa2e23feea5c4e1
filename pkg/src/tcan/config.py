"""Model and training configuration, plus the flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

MODALITIES = ("text", "visual", "acoustic")
SHORT = {"text": "t", "visual": "v", "acoustic": "a"}
LONG = {v: k for k, v in SHORT.items()}

# ablation labels for the modality-subset axis, text-centred naming
SUBSET_LABELS = {"T": "t", "A": "a", "V": "v", "TV": "tv", "TA": "ta", "TV+TA": "tva"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    L: int = 24
    N: int = 5
    h: int = 4
    ffn_mult: int = 4
    lambda_: float = 0.5
    pooling: str = "mean"
    gates_enabled: bool = True
    joint_learning_enabled: bool = True
    center_modality: str = "text"
    positional_encoding: bool = True
    attention_residual: bool = False
    kernel_size: int = 3
    modalities: str = "tva"

    def __post_init__(self):
        if self.d < 1 or self.h < 1 or self.d % self.h:
            raise ConfigError(f"d={self.d} must be a positive multiple of h={self.h}")
        if self.N < 1:
            raise ConfigError(f"N must be >= 1, got {self.N}")
        if self.L < 2:
            raise ConfigError(f"L must be >= 2, got {self.L}")
        if self.lambda_ < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lambda_}")
        if self.ffn_mult < 1:
            raise ConfigError(f"ffn_mult must be >= 1, got {self.ffn_mult}")
        if self.pooling not in ("mean", "last"):
            raise ConfigError(f"pooling must be 'mean' or 'last', got {self.pooling!r}")
        if self.center_modality not in MODALITIES:
            raise ConfigError(f"center_modality must be one of {MODALITIES}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        mods = self.modalities
        if not mods or set(mods) - set("tva") or len(set(mods)) != len(mods):
            raise ConfigError(f"modalities must be a non-empty subset of 'tva', got {mods!r}")
        if len(mods) > 1 and SHORT[self.center_modality] not in mods:
            raise ConfigError(
                f"center modality {self.center_modality!r} is not among modalities {mods!r}")

    @property
    def center(self) -> str:
        return SHORT[self.center_modality]

    @property
    def cross_modalities(self) -> tuple:
        """Short names of the modalities fused into the centre stream, in concat order."""
        if len(self.modalities) == 1:
            return ()
        return tuple(m for m in "avt" if m in self.modalities and m != self.center)

    @property
    def used_modalities(self) -> tuple:
        return tuple(m for m in "tva" if m in self.modalities)

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return {_file_key(f.name): getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return _from_dict(cls, d)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    momentum: float = 0.9
    clip_norm: float = 0.0
    seed: int = 0
    checkpoint_dir: str = ""
    patience: int = 0
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _from_dict(cls, d)


def _file_key(name: str) -> str:
    # `lambda` is a keyword in Python, the file key is not
    return "lambda" if name == "lambda_" else name


def _attr_name(key: str) -> str:
    return "lambda_" if key == "lambda" else key


def _coerce(kind: Any, raw: Any, key: str):
    if isinstance(raw, str):
        text = raw.strip()
        if kind in (bool, "bool"):
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
        try:
            if kind in (int, "int"):
                return int(text)
            if kind in (float, "float"):
                return float(text)
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {raw!r}") from None
        return text
    if kind in (bool, "bool") and not isinstance(raw, bool):
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if kind in (float, "float"):
        return float(raw)
    return raw


def _from_dict(cls, d: dict):
    known = {f.name: f for f in fields(cls)}
    kw = {}
    unknown = []
    for key, raw in d.items():
        name = _attr_name(key)
        if name not in known:
            unknown.append(key)
            continue
        kw[name] = _coerce(known[name].type, raw, key)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(sorted(unknown))}")
    return cls(**kw)


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def read_config_file(path) -> dict:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def format_config(cfg) -> str:
    d = cfg.to_dict()
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in d.items())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def write_config_file(cfg, path) -> None:
    Path(path).write_text(format_config(cfg), encoding="utf-8")
