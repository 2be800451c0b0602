"""Binary checkpoint files.

Layout, all integers little-endian::

    b"SLMB"  u32 version (=1)
    u32 config length, config JSON (UTF-8)
    u32 tensor count
    per tensor: u16 name length, name (UTF-8), u8 rank, rank x u32 dims,
                float32 values (row-major)
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError
from .network import ModelConfig, SliceScanNet

MAGIC = b"SLMB"
VERSION = 1


def encode_checkpoint(config: ModelConfig, state: dict, meta: dict | None = None) -> bytes:
    text = json.dumps({"model": config.to_dict(), "meta": meta or {}}, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    buf.write(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy() if isinstance(tensor, torch.Tensor) else np.asarray(tensor)
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def decode_checkpoint(data: bytes):
    """Return ``(config, state, meta)``; ``state`` maps names to float32 tensors."""
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("checkpoint is truncated")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n_text,) = struct.unpack("<I", take(4))
    header = json.loads(bytes(take(n_text)).decode("utf-8"))
    config = ModelConfig.from_dict(header["model"])
    (count,) = struct.unpack("<I", take(4))
    state = {}
    for _ in range(count):
        (n_name,) = struct.unpack("<H", take(2))
        name = bytes(take(n_name)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims, dtype=np.int64))
        values = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims)
        state[name] = torch.from_numpy(values.astype(np.float32))
    if pos != len(view):
        raise CheckpointError("trailing bytes after the last tensor")
    return config, state, header.get("meta", {})


def save_checkpoint(path, config: ModelConfig, model: torch.nn.Module, meta: dict | None = None) -> str:
    """Write the checkpoint and return its SHA-256."""
    data = encode_checkpoint(config, model.state_dict(), meta)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path):
    """Rebuild the model stored at ``path``; returns ``(model, meta)``."""
    config, state, meta = decode_checkpoint(Path(path).read_bytes())
    model = SliceScanNet(config)
    expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
    got = {k: tuple(v.shape) for k, v in state.items()}
    if expected != got:
        missing = sorted(set(expected) ^ set(got)) or [k for k in expected if expected[k] != got[k]]
        raise CheckpointError(f"checkpoint tensors do not match the config: {missing[:5]}")
    for name, t in state.items():
        if not torch.isfinite(t).all():
            raise CheckpointError(f"tensor {name} holds non-finite values")
    model.load_state_dict(state)
    return model, meta
