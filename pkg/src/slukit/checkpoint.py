"""Flat named-parameter checkpoints: JSON map of parameter path -> shape +
row-major float64 values. Format is versioned; float round-trips are exact
(json uses repr for doubles).
"""

from __future__ import annotations

import json

import numpy as np

from .autodiff import Tensor

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "assign_params"]

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, params: dict[str, Tensor], meta: dict | None = None) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "meta": meta or {},
        "params": {
            name: {"shape": list(p.data.shape), "data": p.data.reshape(-1).tolist()}
            for name, p in sorted(params.items())
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_checkpoint(path):
    """Returns (param name -> ndarray, meta dict)."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format_version {version}")
    params = {}
    for name, rec in payload["params"].items():
        arr = np.asarray(rec["data"], dtype=np.float64).reshape(rec["shape"])
        params[name] = arr
    return params, payload.get("meta", {})


def assign_params(model_params: dict[str, Tensor], loaded: dict[str, np.ndarray],
                  prefix: str = "", strict: bool = True) -> list[str]:
    """Copy loaded arrays into model tensors by name (after stripping
    ``prefix``). Shape mismatches always raise; in strict mode missing or
    extra names raise too. Returns the names actually assigned."""
    available = {name[len(prefix):]: arr for name, arr in loaded.items()
                 if name.startswith(prefix)}
    assigned = []
    for name, tensor in model_params.items():
        if name not in available:
            if strict:
                raise CheckpointError(f"checkpoint is missing parameter {prefix}{name}")
            continue
        arr = available[name]
        if tuple(arr.shape) != tuple(tensor.data.shape):
            raise CheckpointError(
                f"parameter {prefix}{name}: checkpoint shape {tuple(arr.shape)} "
                f"does not match model shape {tuple(tensor.data.shape)}")
        tensor.data[...] = arr
        assigned.append(name)
    if strict:
        extra = set(available) - set(model_params)
        if extra:
            raise CheckpointError(f"checkpoint has unknown parameters {sorted(extra)}")
    return assigned
