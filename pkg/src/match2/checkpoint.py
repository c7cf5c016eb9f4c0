"""Checkpoint directories.

Layout::

    manifest.json         format version, dtype, config echo, entry tables
    vocab.json
    params/<name>.f32     one raw little-endian float32 blob per parameter
    bn/<name>.mean.f32    running statistics, one pair per batch-norm layer
    bn/<name>.var.f32
    optim/<name>.m.f32    optimiser moments (only when an optimiser is saved)
    optim/<name>.v.f32
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from .config import TrainingConfig
from .encoder import EncoderConfig
from .errors import ContractError
from .model import Match2, Match2Config
from .text import Vocabulary

FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


@dataclass
class Checkpoint:
    model: Match2
    vocab: Vocabulary
    training: Optional[TrainingConfig]
    optimizer: Optional[dict]
    manifest: dict


def _write_blob(path: Path, array: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(array, dtype=_LE_F32).tobytes())


def _read_blob(path: Path, shape) -> np.ndarray:
    if not path.exists():
        raise ContractError(f"checkpoint blob missing: {path}")
    raw = np.frombuffer(path.read_bytes(), dtype=_LE_F32)
    expected = int(np.prod(shape, dtype=np.int64))
    if raw.size != expected:
        raise ContractError(f"{path.name}: expected {expected} values for shape {tuple(shape)}, found {raw.size}")
    return raw.reshape(shape).astype(np.float32)


def model_config_to_json(cfg: Match2Config) -> dict:
    model = {f.name: getattr(cfg, f.name) for f in fields(cfg) if f.name != "encoder"}
    return {"encoder": asdict(cfg.encoder), "model": model}


def model_config_from_json(obj: dict) -> Match2Config:
    return Match2Config(EncoderConfig(**obj["encoder"]), **obj["model"])


def save_checkpoint(out_dir: Union[str, Path], model: Match2, vocab: Vocabulary,
                    training: Optional[TrainingConfig] = None, optimizer=None, extra: Optional[dict] = None) -> Path:
    """Write ``model`` (and optionally the optimiser moments) to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = []
    for name, p in model.named_parameters().items():
        _write_blob(out / "params" / f"{name}.f32", p.data)
        params.append({"name": name, "shape": list(p.shape), "file": f"params/{name}.f32"})
    states = []
    for name, s in model.named_states().items():
        _write_blob(out / "bn" / f"{name}.mean.f32", s.running_mean)
        _write_blob(out / "bn" / f"{name}.var.f32", s.running_var)
        states.append({"name": name, "channels": s.channels, "momentum": s.momentum, "eps": s.eps,
                       "mean": f"bn/{name}.mean.f32", "var": f"bn/{name}.var.f32"})
    optim = None
    if optimizer is not None:
        moments = []
        for name in optimizer.params:
            _write_blob(out / "optim" / f"{name}.m.f32", optimizer.m[name])
            _write_blob(out / "optim" / f"{name}.v.f32", optimizer.v[name])
            moments.append({"name": name, "m": f"optim/{name}.m.f32", "v": f"optim/{name}.v.f32"})
        optim = {"kind": "radam", "step": optimizer.step_count, "lr": optimizer.lr, "beta1": optimizer.beta1,
                 "beta2": optimizer.beta2, "eps": optimizer.eps, "moments": moments}
    vocab.save(out / "vocab.json")
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": "float32",
        "byte_order": "little",
        "config": model_config_to_json(model.config),
        "training": asdict(training) if training is not None else None,
        "parameters": params,
        "batch_norm": states,
        "optimizer": optim,
        "vocab": "vocab.json",
    }
    if extra:
        manifest["extra"] = extra
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return out


def read_manifest(model_dir: Union[str, Path]) -> dict:
    path = Path(model_dir) / "manifest.json"
    if not path.exists():
        raise ContractError(f"not a checkpoint directory (no manifest.json): {model_dir}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ContractError(f"unsupported checkpoint format version {manifest.get('format_version')!r}")
    return manifest


def load_checkpoint(model_dir: Union[str, Path]) -> Checkpoint:
    root = Path(model_dir)
    manifest = read_manifest(root)
    cfg = model_config_from_json(manifest["config"])
    model = Match2(cfg, np.random.default_rng(0))
    own = model.named_parameters()
    listed = {e["name"]: e for e in manifest["parameters"]}
    if set(own) != set(listed):
        missing, unexpected = sorted(set(own) - set(listed)), sorted(set(listed) - set(own))
        raise ContractError(f"checkpoint parameters do not match the model: missing {missing}, unexpected {unexpected}")
    for name, p in own.items():
        entry = listed[name]
        if tuple(entry["shape"]) != p.shape:
            raise ContractError(f"parameter {name!r}: checkpoint shape {entry['shape']} vs model {p.shape}")
        p.data = _read_blob(root / entry["file"], p.shape)
    states = model.named_states()
    for entry in manifest["batch_norm"]:
        s = states[entry["name"]]
        s.running_mean = _read_blob(root / entry["mean"], (s.channels,))
        s.running_var = _read_blob(root / entry["var"], (s.channels,))
    optim = manifest.get("optimizer")
    if optim is not None:
        optim = dict(optim)
        optim["m"] = {e["name"]: _read_blob(root / e["m"], own[e["name"]].shape) for e in optim["moments"]}
        optim["v"] = {e["name"]: _read_blob(root / e["v"], own[e["name"]].shape) for e in optim["moments"]}
    training = TrainingConfig(**manifest["training"]) if manifest.get("training") else None
    vocab = Vocabulary.load(root / manifest["vocab"])
    return Checkpoint(model, vocab, training, optim, manifest)


def restore_optimizer(optimizer, state: Dict) -> None:
    """Copy saved moments and the step counter into a fresh :class:`RAdam`."""
    optimizer.step_count = int(state["step"])
    for name in optimizer.params:
        optimizer.m[name] = state["m"][name].copy()
        optimizer.v[name] = state["v"][name].copy()
