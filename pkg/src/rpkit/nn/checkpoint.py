"""Checkpoint container: named tensors in a small binary file plus a JSON sidecar.

Layout (little endian)::

    b"RPKCKPT\\0"  u32 version  u32 count
    count x { u16 name_len, name, u8 dtype_len, dtype, u8 ndim, ndim x u64, u64 nbytes, raw }

The sidecar ``<path>.json`` holds ``{"format_version", "config", "tensors"}``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RPKCKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ModelNotTrained(RuntimeError):
    pass


def save_checkpoint(path, tensors, config=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr)
            dt = arr.dtype.newbyteorder("<").str.encode()
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)) + nb)
            f.write(struct.pack("<B", len(dt)) + dt)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
            f.write(struct.pack("<Q", len(raw)))
            f.write(raw)
    side = {"format_version": VERSION, "config": config or {},
            "tensors": {k: list(np.shape(v)) for k, v in tensors.items()}}
    Path(str(path) + ".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path):
    """Return ``(tensors, config)``."""
    path = Path(path)
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    off = 16
    out = {}
    for _ in range(count):
        (nl,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nl].decode()
        off += nl
        (dl,) = struct.unpack_from("<B", data, off)
        off += 1
        dtype = np.dtype(data[off:off + dl].decode())
        off += dl
        (nd,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{nd}Q", data, off)
        off += 8 * nd
        (nbytes,) = struct.unpack_from("<Q", data, off)
        off += 8
        out[name] = np.frombuffer(data[off:off + nbytes], dtype=dtype).reshape(shape).copy()
        off += nbytes
    side = Path(str(path) + ".json")
    config = json.loads(side.read_text())["config"] if side.exists() else {}
    return out, config


def save_module(path, module, config=None):
    save_checkpoint(path, module.state_dict(), config)


def read_config(path):
    """Config stored next to a checkpoint; raises ``ModelNotTrained`` if absent."""
    path = Path(path)
    side = Path(str(path) + ".json")
    if not path.exists() or not side.exists():
        raise ModelNotTrained(f"no trained checkpoint at {path}")
    return json.loads(side.read_text())["config"]
