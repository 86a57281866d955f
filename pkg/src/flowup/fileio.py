"""Middlebury .flo files, binary PPM images and the synthetic dataset directory layout."""
from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Iterable, List, Tuple

import numpy as np

from .errors import FloDimensionError, FloMagicError, FloTruncatedError

FLO_MAGIC = 202021.25
MAX_FLO_PIXELS = 1 << 28
INDEX_NAME = "index.txt"


def flo_write(path, flow: np.ndarray) -> None:
    """Write a ``(2, H, W)`` field as little-endian float32 interleaved (u, v)."""
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError(f"flow must be (2,H,W), got {flow.shape}")
    _, h, w = flow.shape
    payload = np.ascontiguousarray(flow.transpose(1, 2, 0), dtype="<f4")
    with open(path, "wb") as f:
        f.write(struct.pack("<fii", FLO_MAGIC, w, h))
        f.write(payload.tobytes())


def flo_read(path) -> np.ndarray:
    """Read a .flo file into a float32 ``(2, H, W)`` array."""
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FloTruncatedError(f"{path}: header needs 12 bytes, file has {len(raw)}")
    magic, w, h = struct.unpack("<fii", raw[:12])
    if magic != FLO_MAGIC:
        raise FloMagicError(f"{path}: bad magic {magic!r}, expected {FLO_MAGIC}")
    if w <= 0 or h <= 0 or w * h > MAX_FLO_PIXELS:
        raise FloDimensionError(f"{path}: implausible size {w}x{h}")
    need = 12 + 8 * w * h
    if len(raw) < need:
        raise FloTruncatedError(f"{path}: expected {need} bytes for {w}x{h}, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", count=2 * w * h, offset=12)
    return data.reshape(h, w, 2).transpose(2, 0, 1).astype(np.float32)


def ppm_write(path, image: np.ndarray) -> None:
    """Write a ``(3, H, W)`` image in [0, 1] as 8-bit binary PPM."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"image must be (3,H,W), got {image.shape}")
    _, h, w = image.shape
    pixels = np.clip(np.rint(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def _ppm_tokens(raw: bytes, count: int) -> Tuple[list, int]:
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(int(raw[start:pos]))
    return tokens, pos + 1


def ppm_read(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:2] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    (w, h, maxval), offset = _ppm_tokens(raw, 3)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=3 * w * h, offset=offset)
    return (pixels.reshape(h, w, 3).transpose(2, 0, 1) / 255.0).astype(np.float32)


def sample_names(index: int) -> Tuple[str, str]:
    return f"{index:05d}.img.ppm", f"{index:05d}.flo"


def write_dataset(out_dir, samples: Iterable[Tuple[np.ndarray, np.ndarray]]) -> List[Tuple[str, str]]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pairs = []
    for i, (image, flow) in enumerate(samples):
        img_name, flo_name = sample_names(i)
        ppm_write(out / img_name, image)
        flo_write(out / flo_name, flow)
        pairs.append((img_name, flo_name))
    (out / INDEX_NAME).write_text("".join(f"{a} {b}\n" for a, b in pairs))
    return pairs


def read_index(data_dir) -> List[Tuple[str, str]]:
    lines = (Path(data_dir) / INDEX_NAME).read_text().split("\n")
    return [tuple(line.split()) for line in lines if line.strip()]


def read_dataset(data_dir) -> List[Tuple[np.ndarray, np.ndarray]]:
    root = Path(data_dir)
    return [(ppm_read(root / a), flo_read(root / b)) for a, b in read_index(root)]


def list_flo(dir_path) -> List[str]:
    return sorted(n for n in os.listdir(dir_path) if n.endswith(".flo"))
