"""Checkpoint directory format.

A checkpoint is a directory holding ``manifest.json`` (schema version,
parameter names/shapes, dtype, hyperparameter snapshot) and ``weights.bin``
(raw little-endian float32 values concatenated in manifest order).
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ParseError, ShapeError

MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.bin"
SCHEMA_VERSION = 1


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray], hyper: dict) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "checkpoint_schema": SCHEMA_VERSION,
        "dtype": "float32",
        "params": [{"name": n, "shape": list(a.shape)} for n, a in arrays.items()],
        "hyper": hyper,
    }
    blob = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays.values())
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    (path / WEIGHTS_NAME).write_bytes(blob)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Returns (arrays upcast to float64, hyper snapshot)."""
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST_NAME).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read checkpoint manifest at {path}: {exc}") from exc
    if manifest.get("checkpoint_schema") != SCHEMA_VERSION:
        raise ParseError(f"unsupported checkpoint schema in {path}")
    try:
        blob = (path / WEIGHTS_NAME).read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read checkpoint weights at {path}: {exc}") from exc
    flat = np.frombuffer(blob, dtype="<f4")
    arrays: dict[str, np.ndarray] = {}
    off = 0
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        if off + n > flat.size:
            raise ShapeError(f"weights.bin too short for parameter {entry['name']!r}")
        arrays[entry["name"]] = flat[off:off + n].astype(np.float64).reshape(shape)
        off += n
    if off != flat.size:
        raise ShapeError(f"weights.bin has {flat.size - off} trailing values")
    return arrays, manifest.get("hyper", {})
