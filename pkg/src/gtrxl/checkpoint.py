"""Parameter registry traversal and the checkpoint archive format.

A checkpoint is a directory holding ``manifest.json`` (parameter names,
shapes, byte offsets and free-form metadata) and ``params.bin`` (row-major
little-endian float64 values in manifest order).
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from .tensor import Tensor

MANIFEST = "manifest.json"
BLOB = "params.bin"
FORMAT = "gtrxl-checkpoint/1"


def named_parameters(obj: Any, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield ``(dotted_name, tensor)`` for every trainable tensor inside ``obj``.

    Walks dataclasses (in field order), lists/tuples (by index) and dicts
    (in insertion order).  Tensors without ``requires_grad`` are skipped.
    """
    if isinstance(obj, Tensor):
        if obj.requires_grad:
            yield prefix, obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            yield from named_parameters(getattr(obj, f.name), _join(prefix, f.name))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, _join(prefix, str(i)))
    elif isinstance(obj, dict):
        for key, item in obj.items():
            yield from named_parameters(item, _join(prefix, str(key)))


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


def parameters(obj: Any) -> list[Tensor]:
    return [t for _, t in named_parameters(obj)]


def save_checkpoint(path, obj: Any, metadata: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, t in named_parameters(obj):
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": FORMAT, "metadata": metadata or {}, "params": entries}
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    (path / BLOB).write_bytes(b"".join(chunks))
    return path


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``({name: array}, metadata)`` from a checkpoint directory."""
    path = Path(path)
    manifest = json.loads((path / MANIFEST).read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
    blob = (path / BLOB).read_bytes()
    arrays = {}
    for entry in manifest["params"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=entry["offset"])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    return arrays, manifest["metadata"]


def load_into(obj: Any, arrays: dict[str, np.ndarray]) -> None:
    """Overwrite parameters of ``obj`` in place; names and shapes must match exactly."""
    names = dict(named_parameters(obj))
    if set(names) != set(arrays):
        missing = sorted(set(names) - set(arrays))
        extra = sorted(set(arrays) - set(names))
        raise ValueError(f"checkpoint mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, t in names.items():
        if arrays[name].shape != t.shape:
            raise ValueError(f"{name}: checkpoint shape {arrays[name].shape} vs model {t.shape}")
        t.data[...] = arrays[name]
