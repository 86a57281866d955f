"""Differentiable operators over :class:`~flowup.tensor.Tensor`.

Spatial operators take channel-first ``(C, H, W)`` arrays; there is no batch
axis, callers loop over samples.
"""
from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionError
from .tensor import Tensor, get_default_dtype

__all__ = [
    "add", "sub", "mul", "div", "neg", "power", "matmul", "exp", "log", "sqrt", "abs",
    "tanh", "relu", "gelu", "sum", "mean", "reshape", "transpose", "getitem", "concat",
    "broadcast_to", "softmax", "layer_norm", "instance_norm", "conv2d", "linear_1x1",
    "bilinear_resize", "avg_downsample", "pixel_shuffle", "resize_matrix",
]


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else get_default_dtype()
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data - b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._make(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return Tensor._make(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    out = ad ** exponent
    return Tensor._make(out, (a,), lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    ad = a.data
    return Tensor._make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return Tensor._make(out, (a,), backward, "gelu")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


# reductions and shape ---------------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return Tensor._make(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype
    basic = _is_basic(index)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._make(np.array(a.data[index]), (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat: empty input")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)):
            raise DimensionError(f"concat on axis {axis}: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    out = np.ascontiguousarray(np.broadcast_to(a.data, tuple(shape)))
    return Tensor._make(out, (a,), lambda g: (_unbroadcast(g, src),), "broadcast_to")


# normalisation ----------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax with max subtraction; NaN inputs propagate to NaN outputs."""
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax: axis {axis} out of range for shape {a.shape}")
    x = a.data
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (a,), backward, "softmax")


def _normalize(x: np.ndarray, axes, eps: float):
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv


def _normalize_backward(g: np.ndarray, xhat: np.ndarray, inv: np.ndarray, axes) -> np.ndarray:
    return inv * (g - g.mean(axis=axes, keepdims=True) - xhat * (g * xhat).mean(axis=axes, keepdims=True))


def layer_norm(x: Tensor, weight: Optional[Tensor] = None, bias: Optional[Tensor] = None,
               eps: float = 1e-5) -> Tensor:
    """Normalise a ``(C, H, W)`` map across channels at every pixel."""
    if x.ndim != 3:
        raise DimensionError(f"layer_norm expects (C,H,W), got {x.shape}")
    c = x.shape[0]
    xhat, inv = _normalize(x.data, 0, eps)
    w = weight.data.reshape(c, 1, 1) if weight is not None else None
    b = bias.data.reshape(c, 1, 1) if bias is not None else None
    out = xhat * w if w is not None else xhat
    if b is not None:
        out = out + b
    parents = [x] + [p for p in (weight, bias) if p is not None]

    def backward(g):
        gx = _normalize_backward(g * w if w is not None else g, xhat, inv, 0)
        grads = [gx]
        if weight is not None:
            grads.append((g * xhat).sum(axis=(1, 2)).reshape(weight.shape))
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)).reshape(bias.shape))
        return grads

    return Tensor._make(out, parents, backward, "layer_norm")


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over the spatial axes, no affine terms."""
    if x.ndim != 3:
        raise DimensionError(f"instance_norm expects (C,H,W), got {x.shape}")
    xhat, inv = _normalize(x.data, (1, 2), eps)
    return Tensor._make(xhat, (x,), lambda g: (_normalize_backward(g, xhat, inv, (1, 2)),), "instance_norm")


# convolution ------------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    c = xp.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    # (C, oh, ow, k, k) -> (C, k, k, oh, ow)
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * k * k, oh * ow)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation of a ``(C, H, W)`` map."""
    if x.ndim != 3 or weight.ndim != 4:
        raise DimensionError(f"conv2d: expected input (C,H,W) and weight (O,C,k,k), got {x.shape} and {weight.shape}")
    c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if wc != c:
        raise DimensionError(f"conv2d: input channels (axis 0) = {c} but weight channels (axis 1) = {wc}")
    if kh != kw or kh % 2 == 0:
        raise DimensionError(f"conv2d: kernel must be square and odd, got {kh}x{kw}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({o},)")
    if pad < 0 or stride < 1:
        raise ValueError("conv2d: pad must be >= 0 and stride >= 1")
    k = kh
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    if oh < 1 or ow < 1:
        raise DimensionError(f"conv2d: kernel {k} larger than padded input {h}x{w}")

    if k == 1 and pad == 0:
        xs = x.data[:, ::stride, ::stride] if stride > 1 else x.data
        cols = np.ascontiguousarray(xs).reshape(c, oh * ow)
    else:
        xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
        cols = _im2col(xp, k, stride, oh, ow)
    wmat = weight.data.reshape(o, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(o, oh, ow)
    parents = (x, weight) if bias is None else (x, weight, bias)
    dtype = x.dtype

    def backward(g):
        g2 = g.reshape(o, oh * ow)
        gw = (g2 @ cols.T).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(c, k, k, oh, ow)
            gxp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, i : i + (oh - 1) * stride + 1 : stride, j : j + (ow - 1) * stride + 1 : stride] += gcols[:, i, j]
            gx = gxp[:, pad : pad + h, pad : pad + w] if pad else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return grads

    return Tensor._make(out, parents, backward, "conv2d")


def linear_1x1(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Per-pixel linear map; ``weight`` is ``(O, C)``."""
    if x.ndim != 3 or weight.ndim != 2 or weight.shape[1] != x.shape[0]:
        raise DimensionError(f"linear_1x1: weight {weight.shape} incompatible with input {x.shape}")
    c, h, w = x.shape
    o = weight.shape[0]
    xm = x.data.reshape(c, h * w)
    out = weight.data @ xm
    if bias is not None:
        out += bias.data[:, None]
    wd = weight.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(o, h * w)
        grads = [(wd.T @ g2).reshape(c, h, w) if x.requires_grad else None, g2 @ xm.T]
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return grads

    return Tensor._make(out.reshape(o, h, w), parents, backward, "linear_1x1")


# resampling -------------------------------------------------------------------

def resize_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Half-pixel-centred linear interpolation matrix of shape ``(n_out, n_in)``."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_resize(x: Tensor, size: tuple, flow: bool = False) -> Tensor:
    """Bilinear resize of a ``(C, H, W)`` map to ``size = (H', W')``.

    With ``flow=True`` the input must be a 2-channel flow field and the u/v
    channels are multiplied by the horizontal/vertical resize ratios.
    """
    if x.ndim != 3:
        raise DimensionError(f"bilinear_resize expects (C,H,W), got {x.shape}")
    c, h, w = x.shape
    oh, ow = int(size[0]), int(size[1])
    ry = resize_matrix(h, oh, x.dtype)
    rx = resize_matrix(w, ow, x.dtype)
    out = np.einsum("ih,chw,jw->cij", ry, x.data, rx, optimize=True)
    gain = None
    if flow:
        if c != 2:
            raise DimensionError(f"flow resize needs 2 channels, got {c}")
        gain = np.array([ow / w, oh / h], dtype=x.dtype).reshape(2, 1, 1)
        out = out * gain

    def backward(g):
        if gain is not None:
            g = g * gain
        return (np.einsum("ih,cij,jw->chw", ry, g, rx, optimize=True),)

    return Tensor._make(np.ascontiguousarray(out), (x,), backward, "bilinear_resize")


def avg_downsample(x: Tensor, factor: int) -> Tensor:
    """Mean over non-overlapping ``factor x factor`` blocks."""
    c, h, w = x.shape
    if h % factor or w % factor:
        raise DimensionError(f"avg_downsample: {h}x{w} not divisible by {factor}")
    out = x.data.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))
    scale = 1.0 / (factor * factor)

    def backward(g):
        return (np.repeat(np.repeat(g, factor, axis=1), factor, axis=2) * scale,)

    return Tensor._make(out, (x,), backward, "avg_downsample")


def pixel_shuffle(x: Tensor, factor: int) -> Tensor:
    """``(f*f, C, h, w) -> (C, f*h, f*w)``; slot ``i`` lands at row offset ``i // f``, column offset ``i % f``."""
    ff, c, h, w = x.shape
    if ff != factor * factor:
        raise DimensionError(f"pixel_shuffle: leading axis {ff} != {factor}^2")
    y = reshape(x, (factor, factor, c, h, w))
    y = transpose(y, (2, 3, 0, 4, 1))
    return reshape(y, (c, h * factor, w * factor))
