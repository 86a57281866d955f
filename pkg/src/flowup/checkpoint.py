"""Binary checkpoint format with a JSON sidecar.

Layout (all little-endian): ``u8 version``, ``u32 tensor count``, then per
tensor ``u16 name length``, UTF-8 name, ``u8 ndim``, ``ndim x u32`` dims and
the float32 payload in C order. Model and training configuration live in
``<path>.json`` next to the binary.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping, Tuple

import numpy as np

from .errors import CheckpointError

VERSION = 1


def sidecar_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".json")


def write_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    chunks = [struct.pack("<BI", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise CheckpointError(f"{name}: checkpoints store float32 only, got {arr.dtype}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_tensors(path) -> "OrderedDict[str, np.ndarray]":
    raw = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<BI", take(5))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    out = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return out


def save_checkpoint(path, model, meta: dict | None = None) -> None:
    """Write ``model``'s parameters and a sidecar with its description plus ``meta``."""
    write_tensors(path, model.state_dict())
    info = {"model": model.describe(), "meta": meta or {}}
    sidecar_path(path).write_text(json.dumps(info, indent=2, sort_keys=True))


def load_checkpoint(path) -> Tuple[object, dict]:
    """Rebuild the model recorded in the sidecar and load its weights; returns ``(model, meta)``."""
    from .pipeline import FlowModel

    side = sidecar_path(path)
    if not side.exists():
        raise CheckpointError(f"missing sidecar {side}")
    info = json.loads(side.read_text())
    model = FlowModel.from_description(info["model"])
    model.load_state_dict(read_tensors(path))
    return model, info.get("meta", {})
