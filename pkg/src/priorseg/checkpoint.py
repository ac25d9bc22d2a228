"""Checkpoint container shared by every persisted model in the package.

A checkpoint is a compressed ``.npz`` holding one array per tensor plus a
JSON metadata record (format version, model kind, architecture fields,
seeds, hyperparameters).  Writing the same state twice produces
byte-identical files, which the CLI relies on for reproducibility checks.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

FORMAT_VERSION = 1
_META_KEY = "_meta_json"


def save_npz(path: str | Path, arrays: Mapping[str, np.ndarray], meta: dict[str, Any]) -> Path:
    """Write arrays plus a metadata dict to ``path`` as a compressed npz."""
    path = Path(path)
    if _META_KEY in arrays:
        raise ValueError(f"array name {_META_KEY!r} is reserved for metadata")
    record = dict(meta)
    record.setdefault("format_version", FORMAT_VERSION)
    blob = json.dumps(record, sort_keys=True).encode("utf-8")
    payload: dict[str, np.ndarray] = {_META_KEY: np.frombuffer(blob, dtype=np.uint8)}
    payload.update(arrays)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez_compressed(fh, **payload)
    return path


def load_npz(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Read back ``(arrays, meta)``; rejects files without a metadata record."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path) as archive:
        if _META_KEY not in archive.files:
            raise ValueError(f"not a priorseg checkpoint (missing metadata): {path}")
        meta = json.loads(bytes(archive[_META_KEY]))
        arrays = {k: archive[k] for k in archive.files if k != _META_KEY}
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {version!r} in {path}")
    return arrays, meta


def expect_kind(meta: dict[str, Any], kind: str, path: str | Path) -> None:
    found = meta.get("kind")
    if found != kind:
        raise ValueError(f"checkpoint kind mismatch: expected {kind!r}, found {found!r} in {path}")


def module_arrays(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    """Parameters and buffers of ``module`` as numpy arrays keyed by state-dict name."""
    return {prefix + name: tensor.detach().cpu().numpy() for name, tensor in module.state_dict().items()}


def load_module_arrays(module: torch.nn.Module, arrays: Mapping[str, np.ndarray], prefix: str = "") -> None:
    """Strictly load arrays saved by :func:`module_arrays` back into ``module``."""
    state = {}
    for name, value in arrays.items():
        if not name.startswith(prefix):
            continue
        state[name[len(prefix):]] = torch.as_tensor(np.asarray(value))
    module.load_state_dict(state, strict=True)
