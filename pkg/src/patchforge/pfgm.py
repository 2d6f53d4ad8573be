"""PFGM binary matrix files and checkpoint/manifest plumbing.

A PFGM file is: magic ``PFGM0001``, little-endian u32 row count, u32
column count, then rows*cols little-endian f32 values in row-major order.
Vectors are stored as single-row matrices. Checkpoints are directories of
one PFGM file per named parameter plus a ``manifest.txt`` of
``key = value`` lines.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"PFGM0001"


class PfgmError(ValueError):
    pass


def write_matrix(path: str | Path, mat: np.ndarray) -> None:
    arr = np.asarray(mat, dtype=np.float32)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise PfgmError(f"PFGM stores rank-1/2 arrays, got shape {mat.shape}")
    rows, cols = arr.shape
    payload = MAGIC + struct.pack("<II", rows, cols) + arr.astype("<f4").tobytes(order="C")
    atomic_write_bytes(path, payload)


def read_matrix(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise PfgmError(f"{path}: bad magic {blob[:8]!r}")
    rows, cols = struct.unpack("<II", blob[8:16])
    data = np.frombuffer(blob[16:], dtype="<f4")
    if data.size != rows * cols:
        raise PfgmError(f"{path}: expected {rows * cols} values, found {data.size}")
    return data.reshape(rows, cols).copy()


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_manifest_kv(path: str | Path, entries: dict) -> None:
    lines = [f"{k} = {v}" for k, v in entries.items()]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_manifest_kv(path: str | Path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise PfgmError(f"{path}: malformed manifest line {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def save_params(dirpath: str | Path, params: dict, meta: dict | None = None) -> None:
    """Write named parameter matrices plus a manifest of names/shapes."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    entries = dict(meta or {})
    for name in sorted(params):
        arr = np.asarray(params[name])
        write_matrix(dirpath / f"{name}.pfgm", arr)
        entries[f"param.{name}"] = "x".join(str(s) for s in (arr.shape or (1,)))
    write_manifest_kv(dirpath / "manifest.txt", entries)


def load_params(dirpath: str | Path) -> tuple[dict, dict]:
    """Read a checkpoint directory; returns (params, meta)."""
    dirpath = Path(dirpath)
    manifest = read_manifest_kv(dirpath / "manifest.txt")
    params, meta = {}, {}
    for key, value in manifest.items():
        if key.startswith("param."):
            name = key[len("param.") :]
            arr = read_matrix(dirpath / f"{name}.pfgm")
            shape = tuple(int(s) for s in value.split("x"))
            params[name] = arr.reshape(shape)
        else:
            meta[key] = value
    return params, meta


def write_run_manifest(dirpath: str | Path, manifest: dict) -> None:
    atomic_write_text(Path(dirpath) / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
