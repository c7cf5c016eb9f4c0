"""Training configuration and the flat ``key = value`` config file format.

Recognised keys (``#`` starts a comment)::

    # encoder
    layers, hidden, heads, ffn, max_position, encoder_init_std
    # model
    similarity (dot|cos|l1|l2|jss), ablation (full|Q-only|A-only),
    mlp_hidden, init_std, max_question, max_answer, share_aux (true|false)
    # training
    loss_ratio, top_k, p_neg, lr, beta1, beta2, eps, keep_initial,
    keep_decay, keep_every, keep_floor, batch_size, epochs, seed, min_freq,
    retrieve_from (archived|both)
    # shorthand for truncation and batch size of a benchmark corpus
    preset (cqadupstack|quoraqp-a)
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Iterable, Optional, Union

from .errors import ConfigError
from .text import LIMITS

PRESET_BATCH = {"cqadupstack": 32, "quoraqp-a": 48}


@dataclass
class TrainingConfig:
    loss_ratio: float = 0.6
    top_k: int = 5
    p_neg: float = 0.5
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    keep_initial: float = 1.0
    keep_decay: float = 0.933
    keep_every: int = 5000
    keep_floor: float = 0.5
    batch_size: int = 32
    epochs: int = 3
    seed: int = 0
    min_freq: int = 1
    retrieve_from: str = "archived"

    def __post_init__(self):
        if not 0.0 <= self.loss_ratio <= 1.0:
            raise ConfigError(f"loss_ratio must lie in [0, 1], got {self.loss_ratio}")
        if not 0.0 <= self.p_neg <= 1.0:
            raise ConfigError(f"p_neg must lie in [0, 1], got {self.p_neg}")
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.keep_floor <= self.keep_initial <= 1.0:
            raise ConfigError("keep rates must satisfy 0 < keep_floor <= keep_initial <= 1")
        if self.retrieve_from not in ("archived", "both"):
            raise ConfigError(f"retrieve_from must be 'archived' or 'both', got {self.retrieve_from!r}")


ENCODER_KEYS = {"layers": int, "hidden": int, "heads": int, "ffn": int, "max_position": int, "encoder_init_std": float}
MODEL_KEYS = {"similarity": str, "ablation": str, "mlp_hidden": int, "init_std": float, "max_question": int, "max_answer": int, "share_aux": bool}
TRAINING_KEYS = {f.name: f.type for f in fields(TrainingConfig)}
_CASTS = {"int": int, "float": float, "str": str}
_BOOLS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


@dataclass
class RunConfig:
    """Everything a ``train`` run needs besides the data."""

    encoder: Dict[str, object]
    model: Dict[str, object]
    training: TrainingConfig

    def to_flat(self) -> Dict[str, object]:
        flat = {}
        for k, v in self.encoder.items():
            flat["encoder_init_std" if k == "init_std" else k] = v
        flat.update(self.model)
        flat.update(asdict(self.training))
        return flat


def parse_config_text(text: str) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _cast(key: str, value: object, kind) -> object:
    if isinstance(kind, str):
        kind = _CASTS[kind]
    if kind is bool:
        if isinstance(value, bool):
            return value
        try:
            return _BOOLS[str(value).strip().lower()]
        except KeyError:
            raise ConfigError(f"config key {key!r}: cannot read {value!r} as a boolean") from None
    try:
        if kind is int and isinstance(value, str):
            return int(float(value)) if "e" in value.lower() else int(value)
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r}: cannot read {value!r} as {kind.__name__}") from None


def build_run_config(values: Dict[str, object]) -> RunConfig:
    values = dict(values)
    preset = values.pop("preset", None)
    if preset is not None:
        preset = str(preset).lower()
        if preset not in LIMITS:
            raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(LIMITS)}")
        base = dict(LIMITS[preset], batch_size=PRESET_BATCH[preset])
        values = {**base, **values}
    encoder, model, training = {}, {}, {}
    for key, value in values.items():
        if key in ENCODER_KEYS:
            name = "init_std" if key == "encoder_init_std" else key
            encoder[name] = _cast(key, value, ENCODER_KEYS[key])
        elif key in MODEL_KEYS:
            model[key] = _cast(key, value, MODEL_KEYS[key])
        elif key in TRAINING_KEYS:
            training[key] = _cast(key, value, TRAINING_KEYS[key])
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return RunConfig(encoder, model, TrainingConfig(**training))


def load_config(path: Optional[Union[str, Path]], overrides: Iterable[str] = ()) -> RunConfig:
    """Read a config file (optional) and apply ``key=value`` overrides."""
    values: Dict[str, object] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_config_text(p.read_text(encoding="utf-8")))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        values[key] = value
    return build_run_config(values)
