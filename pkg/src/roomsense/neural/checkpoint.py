"""Named-tensor checkpoint container.

Binary layout: 8-byte magic, u32 format version, u32-length canonical
JSON (config + metadata), u32 tensor count, then per tensor a u16 name
length, the utf-8 name, a u8 dtype code, u8 rank, u32 dims, and the
little-endian payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"RSCKPT01"
VERSION = 1
_DTYPES = {0: "<f4", 1: "<f8"}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


@dataclass
class Checkpoint:
    params: dict
    config: dict
    metadata: dict = field(default_factory=dict)


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(path, ckpt: Checkpoint):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _canonical_json({"config": ckpt.config, "metadata": ckpt.metadata})
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(ckpt.params)))
        for name in sorted(ckpt.params):
            arr = np.asarray(ckpt.params[name])
            code = _DTYPE_CODES.get(arr.dtype)
            if code is None:
                raise ValueError(f"{name}: unsupported checkpoint dtype {arr.dtype}")
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype(_DTYPES[code]).tobytes(order="C"))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen))
        (count,) = struct.unpack("<I", fh.read(4))
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode()
            code, ndim = struct.unpack("<BB", fh.read(2))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n_items = int(np.prod(shape)) if ndim else 1
            dtype = np.dtype(_DTYPES[code])
            data = np.frombuffer(fh.read(n_items * dtype.itemsize), dtype=dtype)
            if data.size != n_items:
                raise ValueError(f"{path}: truncated tensor {name}")
            params[name] = data.reshape(shape).copy()
    return Checkpoint(params=params, config=header["config"],
                      metadata=header["metadata"])


def checkpoint_from_model(model, metadata=None) -> Checkpoint:
    params = {k: np.asarray(t.data) for k, t in model.params.items()}
    metadata = dict(metadata or {})
    if getattr(model, "input_norm", None) is not None:
        mean, std = model.input_norm
        metadata["input_norm"] = {"mean": mean.ravel().tolist(),
                                  "std": std.ravel().tolist()}
    return Checkpoint(params=params, config=model.config.to_dict(),
                      metadata=metadata)


def model_from_checkpoint(ckpt: Checkpoint, dtype=np.float32):
    from .models import build_model
    model = build_model(ckpt.config, seed=0, dtype=dtype)
    expected = set(model.params)
    got = set(ckpt.params)
    if expected != got:
        missing, extra = expected - got, got - expected
        raise ValueError(f"checkpoint schema mismatch: missing {sorted(missing)}, "
                         f"unexpected {sorted(extra)}")
    for name, tensor in model.params.items():
        arr = ckpt.params[name].astype(dtype)
        if arr.shape != tensor.data.shape:
            raise ValueError(f"{name}: shape {arr.shape} != {tensor.data.shape}")
        tensor.data = arr
    norm = ckpt.metadata.get("input_norm")
    if norm is not None:
        model.input_norm = (np.asarray(norm["mean"], dtype=dtype)[:, None],
                            np.asarray(norm["std"], dtype=dtype)[:, None])
    return model
