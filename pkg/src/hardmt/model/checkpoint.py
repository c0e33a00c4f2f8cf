"""Binary checkpoint format.

Layout (little-endian)::

    b"DSQC"                 magic
    u32 version             currently 1
    u32 meta_len            length of the UTF-8 JSON block
    meta_len bytes          {"config": ModelConfig dict, "meta": {...}}
    u32 n_tensors
    n_tensors times:
        u16 name_len, name (UTF-8)
        u8  dtype           0 = float32
        u8  ndim, ndim x u32 shape
        prod(shape) x f32   row-major payload

``meta`` holds free-form run information (iteration, validation loss,
frozen tensor names, vocabularies).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

from ..errors import FormatError, TruncationError
from .config import ModelConfig

MAGIC = b"DSQC"
VERSION = 1
DTYPE_F32 = 0


def _write_atomic(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(config: ModelConfig, tensors: dict, meta: dict | None = None) -> bytes:
    head = json.dumps({"config": config.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(head)), head, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.detach().cpu().to(torch.float32).numpy(), dtype="<f4")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(path, model, meta: dict | None = None):
    meta = dict(meta or {})
    meta.setdefault("frozen", sorted(model.frozen))
    meta.setdefault("vocabs", getattr(model, "vocabs", {}))
    _write_atomic(Path(path), encode_checkpoint(model.cfg, model.state_dict(), meta))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncationError(f"{self.path}: truncated checkpoint at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path):
    """Returns ``(ModelConfig, {name: float32 tensor}, meta)``."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, head_len = r.unpack("<II")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    head = json.loads(r.take(head_len).decode())
    (n,) = r.unpack("<I")
    tensors = {}
    for _ in range(n):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        dtype, ndim = r.unpack("<BB")
        if dtype != DTYPE_F32:
            raise FormatError(f"{path}: unknown dtype code {dtype} for {name}")
        shape = r.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        tensors[name] = torch.from_numpy(arr.copy())
    if r.pos != len(r.data):
        raise FormatError(f"{path}: trailing bytes after tensor table")
    return ModelConfig.from_dict(head["config"]), tensors, head["meta"]


def load_model(path):
    from .network import Seq2Seq

    cfg, tensors, meta = load_checkpoint(path)
    model = Seq2Seq(cfg)
    model.load_state_dict(tensors)
    model.vocabs = meta.get("vocabs", {})
    if meta.get("frozen"):
        model.freeze(meta["frozen"])
    return model, meta
