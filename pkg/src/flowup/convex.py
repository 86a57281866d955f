"""Baseline convex upsampling: learned softmax masks over an m x m flow neighborhood."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .nn import Conv1x1, Conv2d, Module
from .tensor import Tensor
from .windows import PADDING_POLICIES, check_window, window_index

MASK_HIDDEN = 256


@dataclass
class LocalAttentionMaps:
    """Stack of convex masks shaped ``(f*f, m, m, h, w)``.

    Slot ``i`` is the mask of sub-pixel ``i`` (row-major inside the f x f
    block); each ``(m, m)`` slice is non-negative and sums to one. ``f`` is
    None for plain multi-head attention maps that are not sub-pixel stacks.
    """

    weights: Tensor
    f: Optional[int]
    m: int
    padding: str = "clamp"

    def __post_init__(self):
        check_window(self.m)
        if self.padding not in PADDING_POLICIES:
            raise ConfigError(f"unknown padding policy {self.padding!r}")
        shape = self.weights.shape
        heads_ok = self.f is None or shape[0] == self.f * self.f
        if len(shape) != 5 or not heads_ok or shape[1:3] != (self.m, self.m):
            raise DimensionError(f"weights shape {shape} does not match (f^2, m, m, h, w) with f={self.f}, m={self.m}")

    @property
    def spatial(self) -> tuple:
        return self.weights.shape[3:]

    def max_sum_error(self) -> float:
        w = self.weights.data
        return float(np.abs(w.sum(axis=(1, 2)) - 1.0).max())

    def is_convex(self, tol: float = 1e-6) -> bool:
        return bool((self.weights.data >= 0).all()) and self.max_sum_error() <= tol


def masks_from_logits(logits: Tensor, f: int, m: int, padding: str = "clamp") -> LocalAttentionMaps:
    """Reshape ``(f^2 m^2, h, w)`` logits to ``(f^2, m, m, h, w)`` and softmax over each m*m window."""
    check_window(m)
    c, h, w = logits.shape
    if c != f * f * m * m:
        raise DimensionError(f"expected {f * f * m * m} mask channels for f={f}, m={m}; got {c}")
    flat = ops.softmax(ops.reshape(logits, (f * f, m * m, h, w)), axis=1)
    return LocalAttentionMaps(ops.reshape(flat, (f * f, m, m, h, w)), f, m, padding)


class MaskPredictor(Module):
    """conv3x3 -> ReLU -> conv1x1 producing f^2 m^2 mask logits per pixel."""

    def __init__(self, cin: int, f: int, m: int, rng: np.random.Generator, hidden: int = MASK_HIDDEN,
                 zero_init: bool = False):
        super().__init__()
        check_window(m)
        self.f, self.m = f, m
        self.conv1 = Conv2d(cin, hidden, 3, rng)
        self.conv2 = Conv1x1(hidden, f * f * m * m, rng, zero_init=zero_init)

    def forward(self, h: Tensor) -> Tensor:
        return self.conv2(ops.relu(self.conv1(h)))


def predict_masks(h_j: Tensor, predictor: MaskPredictor, padding: str = "clamp") -> LocalAttentionMaps:
    return masks_from_logits(predictor(h_j), predictor.f, predictor.m, padding)


def _neighborhood_taps(weights: Tensor, field: Tensor, padding: str) -> Tensor:
    """``out[i, c, y, x] = sum_t weights[i, t, y, x] * field[c, tap_t(y, x)]`` as one graph node."""
    ff, m, _, h, w = weights.shape
    c = field.shape[0]
    rows, pad = window_index(h, m, padding)
    cols, _ = window_index(w, m, padding)
    src = np.pad(field.data, ((0, 0), (pad, pad), (pad, pad))) if pad else field.data
    wd = weights.data
    out = np.zeros((ff, c, h, w), dtype=field.dtype)
    taps = {}
    for a in range(m):
        for b in range(m):
            tap = src[:, rows[:, a][:, None], cols[:, b][None, :]]
            taps[a, b] = tap
            out += wd[:, a, b][:, None] * tap[None]

    def backward(g):
        gw = np.empty_like(wd)
        gsrc = np.zeros_like(src)
        for (a, b), tap in taps.items():
            gw[:, a, b] = np.einsum("icyx,cyx->iyx", g, tap)
            gtap = np.einsum("iyx,icyx->cyx", wd[:, a, b], g)
            np.add.at(gsrc, (slice(None), rows[:, a][:, None], cols[:, b][None, :]), gtap)
        gfield = gsrc[:, pad : pad + h, pad : pad + w] if pad else gsrc
        return gw, gfield

    return Tensor._make(out, (weights, field), backward, "convex_taps")


def convex_aggregate(masks: LocalAttentionMaps, field: Tensor) -> Tensor:
    """Upsample ``field (C, h, w)`` by ``masks.f``.

    Output pixel ``(f*y + i // f, f*x + i % f)`` is the dot product of mask ``i``
    at ``(y, x)`` with the m x m neighborhood of ``(y, x)``.
    """
    if masks.f is None:
        raise ConfigError("maps carry no upsampling factor")
    if field.ndim != 3 or field.shape[1:] != masks.spatial:
        raise DimensionError(f"field {field.shape} not aligned with masks of spatial size {masks.spatial}")
    return ops.pixel_shuffle(_neighborhood_taps(masks.weights, field, masks.padding), masks.f)


class ConvexUpsampler(Module):
    """The single-shot baseline upsampler (factor 8, 3x3 masks by default)."""

    def __init__(self, hidden_dim: int = 128, f: int = 8, m: int = 3, padding: str = "zero",
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.f, self.m, self.padding = f, m, padding
        self.mask = MaskPredictor(hidden_dim, f, m, rng)

    def forward(self, flow: Tensor, h: Tensor, image_feats=None) -> Tensor:
        return convex_aggregate(predict_masks(h, self.mask, self.padding), flow)
