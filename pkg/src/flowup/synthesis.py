"""Synthetic scenes with piecewise-constant motion and the training-time augmentation.

Each scene is a textured background with a global motion plus textured
rectangles and ellipses, each moving with its own constant flow. Object
masks are hard-edged, so motion boundaries coincide with intensity edges.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from . import ops
from .tensor import Tensor, no_grad

MAX_MOTION = 8.0


@dataclass
class SyntheticSample:
    image: np.ndarray  # (3, H, W) in [0, 1]
    flow: np.ndarray  # (2, H, W), pixels per frame
    meta: dict = field(default_factory=dict)


@dataclass
class AugmentConfig:
    crop: Tuple[int, int] = (96, 96)
    scale_range: Tuple[float, float] = (0.8, 1.5)
    max_stretch: float = 0.2
    stretch_prob: float = 0.8
    spatial_prob: float = 0.8
    hflip_prob: float = 0.5
    vflip_prob: float = 0.1
    interpolation_enabled: bool = True


def _texture(rng: np.random.Generator, h: int, w: int, octaves=(4, 8, 16)) -> np.ndarray:
    """Band-limited noise in [0, 1]: coarse random grids upsampled bilinearly and summed."""
    acc = np.zeros((h, w))
    for i, cell in enumerate(octaves):
        gh, gw = max(2, h // cell + 2), max(2, w // cell + 2)
        grid = rng.random((gh, gw))
        acc += ops.resize_matrix(gh, h) @ grid @ ops.resize_matrix(gw, w).T / (i + 1)
    acc -= acc.min()
    return acc / max(acc.max(), 1e-12)


def _colored(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = rng.uniform(0.15, 0.85, size=3)
    tint = rng.uniform(-0.35, 0.35, size=3)
    tex = _texture(rng, h, w) - 0.5
    return np.clip(base[:, None, None] + tint[:, None, None] * 2 * tex[None], 0.0, 1.0)


def _shape_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    lo, hi = 5.0, max(6.0, min(h, w) / 4)
    ry, rx = rng.uniform(lo, hi), rng.uniform(lo, hi)
    if rng.random() < 0.5:
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def gen_sample(seed: int, h: int, w: int, n_shapes: int) -> SyntheticSample:
    """Deterministic scene for ``seed``; later shapes occlude earlier ones."""
    if h % 8 or w % 8:
        raise ValueError(f"size {h}x{w} must be divisible by 8")
    rng = np.random.default_rng(seed)
    image = _colored(rng, h, w)
    flow = np.empty((2, h, w))
    flow[:] = rng.uniform(-MAX_MOTION, MAX_MOTION, size=2)[:, None, None]
    for _ in range(n_shapes):
        mask = _shape_mask(rng, h, w)
        image = np.where(mask[None], _colored(rng, h, w), image)
        flow = np.where(mask[None], rng.uniform(-MAX_MOTION, MAX_MOTION, size=2)[:, None, None], flow)
    return SyntheticSample(image.astype(np.float32), flow.astype(np.float32),
                           {"seed": int(seed), "n_shapes": int(n_shapes)})


def resize_field(x: np.ndarray, size: Tuple[int, int], flow: bool = False) -> np.ndarray:
    with no_grad():
        return ops.bilinear_resize(Tensor(x, dtype=np.float32), size, flow=flow).data


def augment(sample: SyntheticSample, cfg: AugmentConfig, seed: int) -> SyntheticSample:
    """Random resize (if enabled), crop and flips. ``meta['ops']`` records what ran."""
    rng = np.random.default_rng(seed)
    image, flow = sample.image, sample.flow
    applied = []
    # crops larger than the source shrink to it, kept divisible by 8
    ch, cw = (min(c, n) // 8 * 8 for c, n in zip(cfg.crop, image.shape[1:]))
    if ch == 0 or cw == 0:
        raise ValueError(f"sample {image.shape[1:]} too small for an 8-divisible crop")
    if cfg.interpolation_enabled and rng.random() < cfg.spatial_prob:
        lo, hi = np.log2(cfg.scale_range[0]), np.log2(cfg.scale_range[1])
        scale = 2.0 ** rng.uniform(lo, hi)
        sx = sy = scale
        if rng.random() < cfg.stretch_prob:
            sx *= 2.0 ** rng.uniform(-cfg.max_stretch, cfg.max_stretch)
            sy *= 2.0 ** rng.uniform(-cfg.max_stretch, cfg.max_stretch)
        _, h, w = image.shape
        nh = max(ch, int(round(h * sy)))
        nw = max(cw, int(round(w * sx)))
        image = np.clip(resize_field(image, (nh, nw)), 0.0, 1.0)
        flow = resize_field(flow, (nh, nw), flow=True)
        applied.append("resize")
    _, h, w = image.shape
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    image = image[:, y0 : y0 + ch, x0 : x0 + cw]
    flow = flow[:, y0 : y0 + ch, x0 : x0 + cw]
    applied.append("crop")
    if rng.random() < cfg.hflip_prob:
        image = image[:, :, ::-1]
        flow = flow[:, :, ::-1] * np.array([-1.0, 1.0], dtype=np.float32)[:, None, None]
        applied.append("hflip")
    if rng.random() < cfg.vflip_prob:
        image = image[:, ::-1, :]
        flow = flow[:, ::-1, :] * np.array([1.0, -1.0], dtype=np.float32)[:, None, None]
        applied.append("vflip")
    meta = dict(sample.meta, ops=applied)
    return SyntheticSample(np.ascontiguousarray(image, dtype=np.float32),
                           np.ascontiguousarray(flow, dtype=np.float32), meta)


def two_region_flow(h: int, w: int, left=(3.0, -1.0), right=(-5.0, 2.0), boundary: Optional[int] = None) -> np.ndarray:
    """Flow with one straight vertical motion boundary."""
    boundary = w // 2 if boundary is None else boundary
    flow = np.empty((2, h, w), dtype=np.float32)
    flow[:, :, :boundary] = np.asarray(left, dtype=np.float32)[:, None, None]
    flow[:, :, boundary:] = np.asarray(right, dtype=np.float32)[:, None, None]
    return flow
