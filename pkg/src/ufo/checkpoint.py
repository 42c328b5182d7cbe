"""Versioned binary checkpoints.

Layout: magic, format version, config as JSON, then named float32 tensors.
Loading rebuilds the parameter tree from the stored config and fills it,
so every tensor's name and shape is validated against what the
architecture actually expects; stray, missing, or misshapen entries fail
loudly instead of producing a silently broken model.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import tempfile

import numpy as np

from . import model
from . import tensorops as T
from .errors import FormatError

MAGIC = b"UFOCKPT1"
VERSION = 1


def save(path: str, cfg: model.ModelConfig, params) -> None:
    flat = model.flatten_params(params)
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True).encode()
    # write-then-rename so a crash cannot leave a torn checkpoint behind
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)),
                               suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<II", VERSION, len(blob)))
            f.write(blob)
            f.write(struct.pack("<I", len(flat)))
            for name in sorted(flat):
                data = np.ascontiguousarray(flat[name].data,
                                            dtype="<f4")
                enc = name.encode()
                f.write(struct.pack("<H", len(enc)))
                f.write(enc)
                f.write(struct.pack("<B", data.ndim))
                f.write(struct.pack(f"<{data.ndim}I", *data.shape))
                f.write(data.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"checkpoint truncated while reading {what}")
    return buf


def load(path: str):
    """-> (ModelConfig, params) with every tensor shape-checked."""
    with open(path, "rb") as f:
        if _read(f, len(MAGIC), "magic") != MAGIC:
            raise FormatError("bad checkpoint header (magic mismatch)")
        version, blob_len = struct.unpack("<II", _read(f, 8, "header"))
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        try:
            cfg = model.ModelConfig(**json.loads(_read(f, blob_len, "config")))
        except (ValueError, TypeError, json.JSONDecodeError) as e:
            raise FormatError(f"bad config block: {e}") from None
        params = model.init_params(cfg, seed=0)
        flat = model.flatten_params(params)
        (count,) = struct.unpack("<I", _read(f, 4, "tensor count"))
        if count != len(flat):
            raise FormatError(f"checkpoint has {count} tensors; config "
                              f"implies {len(flat)}")
        seen = set()
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read(f, 2, "name length"))
            name = _read(f, name_len, "name").decode()
            if name not in flat:
                raise FormatError(f"unexpected tensor {name!r}")
            if name in seen:
                raise FormatError(f"duplicate tensor {name!r}")
            seen.add(name)
            (ndim,) = struct.unpack("<B", _read(f, 1, "rank"))
            shape = struct.unpack(f"<{ndim}I", _read(f, 4 * ndim, "shape"))
            want = flat[name].data.shape
            if tuple(shape) != want:
                raise FormatError(f"tensor {name!r} has shape {shape}; "
                                  f"expected {want}")
            size = int(np.prod(shape, dtype=np.int64)) * 4
            arr = np.frombuffer(_read(f, size, name), dtype="<f4")
            flat[name].data = arr.reshape(shape).astype(T.default_dtype())
        if f.read(1):
            raise FormatError("trailing bytes after final tensor")
    return cfg, params
