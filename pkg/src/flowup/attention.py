"""Neighborhood attention: query-centred local attention maps, aggregation and NAT blocks."""
from __future__ import annotations

import numpy as np

from . import ops
from .convex import LocalAttentionMaps
from .errors import ConfigError, DimensionError
from .nn import Conv1x1, LayerNorm, Module, parameter
from .tensor import Tensor
from .windows import check_window, relative_index, window_index

HEAD_DIM = 32


def _clamped_index(h: int, w: int, m: int):
    check_window(m)
    if m > min(h, w):
        raise ConfigError(f"window {m} exceeds spatial extent {h}x{w}")
    rows, _ = window_index(h, m, "clamp")
    cols, _ = window_index(w, m, "clamp")
    return rows, cols


class _Band:
    """Clamped-window geometry for the row-banded formulation.

    Internally maps live as ``(n, h, m_row, w, m_col)``: for each query row and
    window row offset, a dense query-row x key-row product is formed with one
    matmul and the ``m``-wide band of clamped columns is read off it.
    """

    def __init__(self, h: int, w: int, m: int):
        self.rows, self.cols = _clamped_index(h, w, m)
        self.h, self.w, self.m = h, w, m
        self.xi = np.arange(w)[:, None]
        self._rs = {}

    def row_scatter(self, dtype) -> np.ndarray:
        """``(h, h*m)`` one-hot matrix summing per-(row, offset) slices onto source rows."""
        key = np.dtype(dtype)
        if key not in self._rs:
            s = np.zeros((self.h, self.h * self.m), dtype=dtype)
            s[self.rows.ravel(), np.arange(self.h * self.m)] = 1
            self._rs[key] = s
        return self._rs[key]

    def key_rows(self, x: np.ndarray) -> np.ndarray:
        """``(n, d, h, w) -> (n, h, m, d, w)``: the clamped window rows for every query row."""
        return x[:, :, self.rows, :].transpose(0, 2, 3, 1, 4)

    def band(self, full: np.ndarray) -> np.ndarray:
        """``(..., w, w) -> (..., w, m)`` entries at the clamped key columns."""
        return full[..., self.xi, self.cols]

    def unband(self, band: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`band`; columns within one window are distinct, so plain assignment suffices."""
        full = np.zeros(band.shape[:-1] + (self.w,), dtype=band.dtype)
        full[..., self.xi, self.cols] = band
        return full

    def scatter_rows(self, g: np.ndarray, d: int) -> np.ndarray:
        """Adjoint of :meth:`key_rows` for ``g`` shaped ``(n, h, m, d, w)``."""
        n = g.shape[0]
        flat = g.reshape(n, self.h * self.m, d * self.w)
        out = self.row_scatter(g.dtype) @ flat
        return np.ascontiguousarray(out.reshape(n, self.h, d, self.w).transpose(0, 2, 1, 3))


def na_maps(m: int, q: Tensor, k: Tensor, rel_bias: Tensor | None = None, scale: float | None = None,
            f: int | None = None) -> LocalAttentionMaps:
    """Softmax attention over the clamped m x m window around each query.

    ``q`` and ``k`` are ``(heads, d, h, w)``; ``rel_bias`` is ``(heads, 2m-1, 2m-1)``.
    Returns maps shaped ``(heads, m, m, h, w)``. Pass ``f`` when the heads are
    the f*f sub-pixels of an upsampling step.
    """
    if q.ndim != 4 or q.shape != k.shape:
        raise DimensionError(f"na_maps: q {q.shape} and k {k.shape} must share shape (heads, d, h, w)")
    n, d, h, w = q.shape
    geo = _Band(h, w, m)
    if rel_bias is not None and rel_bias.shape != (n, 2 * m - 1, 2 * m - 1):
        raise DimensionError(f"rel_bias shape {rel_bias.shape} != {(n, 2 * m - 1, 2 * m - 1)}")
    scale = 1.0 / np.sqrt(d) if scale is None else scale
    qt = q.data.transpose(0, 2, 3, 1)[:, :, None]  # (n, h, 1, w, d)
    kr = geo.key_rows(k.data)  # (n, h, m, d, w)
    logits = geo.band(qt @ kr)  # (n, h, m, w, m)
    logits *= scale
    if rel_bias is not None:
        span = 2 * m - 1
        rr, rc = relative_index(h, m), relative_index(w, m)
        bias_idx = rr[:, :, None, None] * span + rc[None, None, :, :]  # (h, m, w, m)
        logits += rel_bias.data.reshape(n, -1)[:, bias_idx]
    z = np.exp(logits - logits.max(axis=(2, 4), keepdims=True))
    attn = z / z.sum(axis=(2, 4), keepdims=True)
    out = np.ascontiguousarray(attn.transpose(0, 2, 4, 1, 3))  # (n, m, m, h, w)

    def backward(g):
        g = g.transpose(0, 3, 1, 4, 2)  # -> (n, h, m, w, m)
        gl = attn * (g - (g * attn).sum(axis=(2, 4), keepdims=True))
        gfull = geo.unband(gl * scale)  # (n, h, m, w, w)
        grads = [None, None]
        if q.requires_grad:
            gq = (gfull @ kr.swapaxes(-1, -2)).sum(axis=2)  # (n, h, w, d)
            grads[0] = np.ascontiguousarray(gq.transpose(0, 3, 1, 2))
        if k.requires_grad:
            grads[1] = geo.scatter_rows(qt.swapaxes(-1, -2) @ gfull, d)
        if rel_bias is not None:
            gb = np.stack([np.bincount(bias_idx.ravel(), weights=gl[i].ravel(), minlength=span * span)
                           for i in range(n)])
            grads.append(gb.reshape(rel_bias.shape))
        return grads

    parents = (q, k) if rel_bias is None else (q, k, rel_bias)
    return LocalAttentionMaps(Tensor._make(out, parents, backward, "na_maps"), f=f, m=m, padding="clamp")


def na_aggregate(lam: LocalAttentionMaps, v: Tensor) -> Tensor:
    """Per head and position, the LAM-weighted sum over the clamped window of ``v``.

    ``v`` is ``(heads, d, h, w)`` or ``(1, d, h, w)`` (shared across heads).
    """
    weights = lam.weights
    n, m, _, h, w = weights.shape
    if v.ndim != 4 or v.shape[2:] != (h, w) or v.shape[0] not in (1, n):
        raise DimensionError(f"na_aggregate: values {v.shape} not aligned with maps {weights.shape}")
    geo = _Band(h, w, m)
    nv, d = v.shape[:2]
    shared = nv == 1 and n > 1
    # dense banded weights: (n, h, w, m*w), rows indexed by query column
    full = geo.unband(weights.data.transpose(0, 3, 1, 4, 2))  # (n, h, m, w, w)
    bmat = full.transpose(0, 1, 3, 2, 4).reshape(n, h, w, m * w)
    vr = geo.key_rows(v.data).swapaxes(-1, -2).reshape(nv, h, m * w, d)  # (nv, h, m*w, d)
    if shared:
        # fold heads into the row axis so one matmul serves all of them
        out = (bmat.transpose(1, 0, 2, 3).reshape(h, n * w, m * w) @ vr[0]).reshape(h, n, w, d)
        out = out.transpose(1, 3, 0, 2)
    else:
        out = (bmat @ vr).transpose(0, 3, 1, 2)  # (n, d, h, w)
    out = np.ascontiguousarray(out)

    def backward(g):
        gt = g.transpose(0, 2, 3, 1)  # (n, h, w, d)
        gb = gt @ vr.swapaxes(-1, -2)  # (n, h, w, m*w)
        gb = gb.reshape(n, h, w, m, w).transpose(0, 1, 3, 2, 4)  # (n, h, m, w, w)
        ga = np.ascontiguousarray(geo.band(gb).transpose(0, 2, 4, 1, 3))
        gv = None
        if v.requires_grad:
            if shared:
                gvr = bmat.transpose(1, 0, 2, 3).reshape(h, n * w, m * w).swapaxes(-1, -2) \
                    @ gt.transpose(1, 0, 2, 3).reshape(h, n * w, d)
                gvr = gvr[None]
            else:
                gvr = bmat.swapaxes(-1, -2) @ gt  # (n, h, m*w, d)
            gvr = gvr.reshape(nv, h, m, w, d).swapaxes(-1, -2)  # (nv, h, m, d, w)
            gv = geo.scatter_rows(gvr, d)
        return ga, gv

    return Tensor._make(out, (weights, v), backward, "na_aggregate")


def split_heads(x: Tensor, heads: int) -> Tensor:
    c, h, w = x.shape
    if c % heads:
        raise DimensionError(f"{c} channels do not split into {heads} heads")
    return ops.reshape(x, (heads, c // heads, h, w))


def merge_heads(x: Tensor) -> Tensor:
    n, d, h, w = x.shape
    return ops.reshape(x, (n * d, h, w))


class NeighborhoodAttention(Module):
    """Multi-head NA layer: qkv projection, clamped-window attention, output projection."""

    def __init__(self, dim: int, heads: int, m: int, rng: np.random.Generator, rel_bias: bool = True,
                 zero_init_proj: bool = False):
        super().__init__()
        check_window(m)
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.heads, self.m = dim, heads, m
        self.qkv = Conv1x1(dim, 3 * dim, rng)
        self.rel_bias = parameter(np.zeros((heads, 2 * m - 1, 2 * m - 1))) if rel_bias else None
        self.proj = Conv1x1(dim, dim, rng, zero_init=zero_init_proj)

    def forward(self, x: Tensor, m: int | None = None) -> Tensor:
        m = m or self.m
        qkv = self.qkv(x)
        d = self.dim
        q = split_heads(qkv[:d], self.heads)
        k = split_heads(qkv[d : 2 * d], self.heads)
        v = split_heads(qkv[2 * d :], self.heads)
        lam = na_maps(m, q, k, crop_bias(self.rel_bias, m))
        return self.proj(merge_heads(na_aggregate(lam, v)))


def crop_bias(table: Tensor | None, m: int) -> Tensor | None:
    """Centre crop of a relative-bias table to window ``m`` (identity when it already fits)."""
    if table is None:
        return None
    span = table.shape[1]
    want = 2 * m - 1
    if want == span:
        return table
    if want > span:
        raise ConfigError(f"bias table for span {span} cannot serve window {m}")
    off = (span - want) // 2
    return table[:, off : off + want, off : off + want]


class NATBlock(Module):
    """Pre-norm transformer block with neighborhood attention and a 4x MLP.

    Heads are ``dim // head_dim`` wide; a block narrower than one head gets a
    single head spanning all channels.
    """

    def __init__(self, dim: int, m: int, rng: np.random.Generator, head_dim: int = HEAD_DIM,
                 rel_bias: bool = True, zero_init_proj: bool = False, mlp_ratio: int = 4):
        super().__init__()
        heads = max(1, dim // head_dim)
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible into heads of width {head_dim}")
        self.dim, self.m = dim, m
        self.norm1 = LayerNorm(dim)
        self.attn = NeighborhoodAttention(dim, heads, m, rng, rel_bias, zero_init_proj)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Conv1x1(dim, mlp_ratio * dim, rng)
        self.fc2 = Conv1x1(mlp_ratio * dim, dim, rng, zero_init=zero_init_proj)

    def forward(self, x: Tensor, m: int | None = None) -> Tensor:
        if x.ndim != 3 or x.shape[0] != self.dim:
            raise DimensionError(f"NAT block of dim {self.dim} got input {x.shape}")
        x = x + self.attn(self.norm1(x), m)
        return x + self.fc2(ops.gelu(self.fc1(self.norm2(x))))


def nat_block_forward(x: Tensor, block: NATBlock) -> Tensor:
    return block(x)


class QKVProjection(Module):
    """Three 1x1 projections to f^2 * D/2 channels, reshaped to f^2 heads of width D/2."""

    def __init__(self, dim: int, f: int, rng: np.random.Generator):
        super().__init__()
        if dim % 2:
            raise ConfigError(f"embedding dim {dim} must be even")
        self.heads, self.head_dim = f * f, dim // 2
        width = self.heads * self.head_dim
        self.q = Conv1x1(dim, width, rng)
        self.k = Conv1x1(dim, width, rng)
        self.v = Conv1x1(dim, width, rng)

    def forward(self, e: Tensor) -> tuple:
        return tuple(split_heads(p(e), self.heads) for p in (self.q, self.k, self.v))
