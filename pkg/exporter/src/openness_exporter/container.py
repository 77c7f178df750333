"""Writers for the embedding container, labels, and manifest formats.

Implemented here independently of the evaluation package on purpose: the
byte layout is the interface between the two tools, and the integration
tests prove both sides agree on it.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"EMBV0001"
_HEADER = struct.Struct("<8sQQB7x")  # magic, rows u64, dim u64, normalized u8, pad


def container_bytes(matrix: np.ndarray, normalized: bool = True) -> bytes:
    if matrix.ndim != 2:
        raise ValueError(f"expected a 2d matrix, got shape {matrix.shape}")
    if matrix.shape[1] == 0:
        raise ValueError("dim must be positive")
    data = np.ascontiguousarray(matrix, dtype="<f4")
    header = _HEADER.pack(MAGIC, data.shape[0], data.shape[1], int(bool(normalized)))
    return header + data.tobytes()


def labels_bytes(labels) -> bytes:
    arr = np.asarray(labels)
    if arr.ndim != 1:
        raise ValueError(f"labels must be 1d, got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() > np.iinfo(np.uint32).max):
        raise ValueError("labels out of u32 range")
    return arr.astype("<u4").tobytes()


def atomic_write_bytes(path, payload: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def write_container(matrix: np.ndarray, path, normalized: bool = True) -> Path:
    return atomic_write_bytes(path, container_bytes(matrix, normalized))


def write_labels(labels, path) -> Path:
    return atomic_write_bytes(path, labels_bytes(labels))


def load_manifest(path) -> dict:
    """Existing manifest, or a fresh skeleton when the file is absent."""
    path = Path(path)
    if path.exists():
        doc = json.loads(path.read_text(encoding="utf-8"))
        if doc.get("version") != 1:
            raise ValueError(f"{path}: unsupported manifest version {doc.get('version')!r}")
        return doc
    return {"version": 1}


def save_manifest(doc: dict, path) -> Path:
    return atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def manifest_relative(target, manifest_path) -> str:
    """How the manifest should refer to target: relative when possible."""
    target = Path(target).resolve()
    base = Path(manifest_path).resolve().parent
    try:
        return target.relative_to(base).as_posix()
    except ValueError:
        return os.path.relpath(target, base).replace(os.sep, "/")
