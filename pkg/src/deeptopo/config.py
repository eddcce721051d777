"""Run configuration: profiles, config files and overrides.

Resolution order is profile defaults, then the config file, then explicit
flags. Each profile pins some fields; setting a pinned field to another
value is a conflict and is refused.

Config files are UTF-8 ``key = value`` lines; ``#`` starts a comment.
Tuples are comma separated (``atrm_channels = 64, 32, 16``).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping, Optional

from .backbone import ABLATIONS, ModelConfig
from .losses import LossWeights

PROFILES = ("paper", "toy")

# fields that cannot be overridden under each profile
PINNED = {
    "paper": {
        "image_size": 384, "patch_size": 16,
        "enc_dim": 768, "enc_depth": 12, "enc_heads": 12,
        "dec_dim": 512, "dec_depth": 8, "dec_heads": 16,
        "mask_ratio": 0.05, "learning_rate": 5e-5, "lam": 0.1,
    },
    "toy": {
        "image_size": 96, "patch_size": 8,
        "enc_dim": 64, "enc_depth": 2, "enc_heads": 4,
        "dec_dim": 48, "dec_depth": 1, "dec_heads": 4,
        "atrm_stages": 3,
    },
}

# free defaults per profile
DEFAULTS = {
    "paper": {"atrm_stages": 4, "atrm_channels": (64, 32, 16, 8), "epochs": 50, "batch_size": 8},
    "toy": {"atrm_channels": (64, 32, 16), "mask_ratio": 0.05, "learning_rate": 1e-3, "lam": 0.1,
            "epochs": 20, "batch_size": 8},
}

# location fields: never part of a run's identity
LOCATION_FIELDS = ("data_dir", "eval_dir", "out_dir")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    profile: str = "toy"
    # model
    image_size: int = 96
    patch_size: int = 8
    enc_dim: int = 64
    enc_depth: int = 2
    enc_heads: int = 4
    dec_dim: int = 48
    dec_depth: int = 1
    dec_heads: int = 4
    mask_ratio: float = 0.05
    wcap_kernel: int = 3
    atrm_stages: int = 3
    atrm_channels: tuple[int, ...] = (64, 32, 16)
    atrm_width: int = 64
    kernel_length: int = 5
    ablation: str = "full"
    seed: int = 0
    dtype: str = "float32"
    # loss
    lam: float = 0.1
    l: float = 1.0  # noqa: E741
    alpha_max: float = 20.0
    # optimisation
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    # locations
    data_dir: str = "data/train"
    eval_dir: str = "data/eval"
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.atrm_channels = tuple(int(c) for c in self.atrm_channels)

    def validate(self) -> "RunConfig":
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {PROFILES}, got {self.profile!r}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        try:
            self.model_config()
            self.loss_weights()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        return self

    def model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def loss_weights(self) -> LossWeights:
        return LossWeights(lam=self.lam, l=self.l, alpha_max=self.alpha_max)

    def identity(self) -> dict[str, Any]:
        """Every field except the run locations, in declaration order."""
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name not in LOCATION_FIELDS}

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def format_value(v: Any) -> str:
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def parse_value(key: str, raw: str) -> Any:
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    t = str(_FIELD_TYPES[key])
    raw = raw.strip()
    try:
        if t.startswith("tuple"):
            return tuple(int(x) for x in raw.replace("(", "").replace(")", "").split(",") if x.strip())
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {t}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    out = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{ln}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{source}:{ln}: duplicate key {key!r}")
        out[key] = parse_value(key, raw)
    return out


def load_config_file(path) -> dict[str, Any]:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {p}: {e.strerror}") from None
    return parse_config_text(text, str(p))


def dump_config(values: Mapping[str, Any]) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in values.items())


def resolve(profile: Optional[str] = None, file_values: Optional[Mapping[str, Any]] = None,
            overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Build a validated RunConfig from profile defaults, file values and overrides."""
    file_values = dict(file_values or {})
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    prof = overrides.pop("profile", None) or file_values.pop("profile", None) or profile or "toy"
    file_values.pop("profile", None)
    if prof not in PROFILES:
        raise ConfigError(f"profile must be one of {PROFILES}, got {prof!r}")
    explicit = {**file_values, **overrides}
    for k in explicit:
        if k not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {k!r}")
    for k, pinned in PINNED[prof].items():
        if k in explicit and explicit[k] != pinned:
            raise ConfigError(f"{k} = {format_value(explicit[k])} conflicts with the {prof} profile "
                              f"(pinned to {format_value(pinned)})")
    values = {**DEFAULTS[prof], **PINNED[prof], **explicit, "profile": prof}
    if "atrm_channels" in values:
        values["atrm_channels"] = tuple(values["atrm_channels"])
    return RunConfig(**values).validate()


__all__ = ["PROFILES", "PINNED", "DEFAULTS", "ConfigError", "RunConfig", "resolve",
           "parse_config_text", "load_config_file", "dump_config", "format_value"]
