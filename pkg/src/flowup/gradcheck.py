"""Central finite-difference gradient checking in 64-bit precision."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor

DEFAULT_EPS = 1e-5
DEFAULT_TOL = 1e-5


@dataclass
class GradcheckResult:
    name: str
    max_rel_error: float
    checked: int

    def passed(self, tol: float = DEFAULT_TOL) -> bool:
        return self.max_rel_error <= tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float | None = None) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` defaults to 1e-3 of the largest analytic magnitude (at least
    1e-8), so entries whose true gradient is ~0 are compared on the gradient's
    overall scale instead of dividing finite-difference round-off by zero.
    """
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    if analytic.size == 0:
        return 0.0
    if floor is None:
        floor = max(1e-8, 1e-3 * float(np.abs(analytic).max()))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = DEFAULT_EPS,
              max_samples=None, rng: np.random.Generator | None = None,
              name: str = "") -> GradcheckResult:
    """Compare backward() of the scalar ``fn()`` against central differences.

    ``inputs`` must be float64 leaves with ``requires_grad``; they are perturbed
    in place. ``max_samples`` (an int, or one entry per input with ``None``
    meaning all) limits how many random coordinates are probed. The relative
    error floor is 1e-3 of the largest analytic entry over all inputs.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradcheck requires 64-bit inputs")
        t.grad = None
    out = fn()
    if out.size != 1:
        raise ValueError(f"gradcheck needs a scalar function, got shape {out.shape}")
    out.backward()
    limits = list(max_samples) if isinstance(max_samples, (list, tuple)) else [max_samples] * len(inputs)
    rng = rng if rng is not None else np.random.default_rng(0)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    scale = max((float(np.abs(a).max()) for a in analytic if a.size), default=0.0)
    floor = max(1e-8, 1e-3 * scale)
    worst, checked = 0.0, 0
    for t, a, limit in zip(inputs, analytic, limits):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if limit is not None and flat.size > limit:
            coords = rng.choice(flat.size, size=limit, replace=False)
        numeric = np.empty(coords.size)
        for j, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + eps
            plus = fn().item()
            flat[i] = orig - eps
            minus = fn().item()
            flat[i] = orig
            numeric[j] = (plus - minus) / (2 * eps)
        worst = max(worst, relative_error(a.reshape(-1)[coords], numeric, floor))
        checked += coords.size
    return GradcheckResult(name, worst, checked)


def weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    """Reduce to a scalar with fixed random weights so every output entry matters."""
    return (out * Tensor(weights, dtype=out.dtype)).sum()


# named suite ---------------------------------------------------------------------

def _leaf(rng: np.random.Generator, shape, low: float | None = None, high: float | None = None) -> Tensor:
    data = rng.standard_normal(shape) if low is None else rng.uniform(low, high, size=shape)
    return Tensor(data, requires_grad=True, dtype=np.float64)


def _away_from_zero(rng, shape, margin=0.1):
    """Values with |x| >= margin, so kinks at 0 stay outside the difference stencil."""
    x = rng.uniform(margin, 2.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(x, requires_grad=True, dtype=np.float64)


def _check_fn(op, *shapes, positive=False, kink=False):
    def run(rng, name):
        if kink:
            xs = [_away_from_zero(rng, s) for s in shapes]
        elif positive:
            xs = [_leaf(rng, s, 0.5, 2.0) for s in shapes]
        else:
            xs = [_leaf(rng, s) for s in shapes]
        out = op(*xs)
        w = rng.standard_normal(out.shape)
        return gradcheck(lambda: weighted_sum(op(*xs), w), xs, name=name)
    return run


def _module_check(build, make_inputs, max_samples=12, input_samples=None):
    """Check a module's inputs (all coordinates unless ``input_samples``) and its parameters (sampled)."""
    def run(rng, name):
        from .tensor import default_dtype

        with default_dtype(np.float64):
            module = build(rng)
            inputs = make_inputs(rng)
        for n, p in module.named_parameters():
            if n.endswith("rel_bias"):
                p.data = rng.standard_normal(p.shape)
        out = module(*inputs)
        out = out[0] if isinstance(out, tuple) else out
        w = rng.standard_normal(out.shape)

        def fn():
            o = module(*inputs)
            return weighted_sum(o[0] if isinstance(o, tuple) else o, w)

        leaves = [t for x in inputs for t in (x if isinstance(x, list) else [x]) if t.requires_grad]
        params = module.parameters()
        limits = [input_samples] * len(leaves) + [max_samples] * len(params)
        return gradcheck(fn, leaves + params, max_samples=limits, rng=rng, name=name)
    return run


def _suite() -> dict:
    from . import ops
    from .attention import NATBlock, na_aggregate, na_maps
    from .convex import convex_aggregate, masks_from_logits
    from .tcu import TCU, ContextEncoder, TCUStep, UpsamplerConfig

    def convex(padding):
        def op(logits, field):
            return convex_aggregate(masks_from_logits(logits, 2, 3, padding), field)
        return _check_fn(op, (2 * 2 * 3 * 3, 4, 5), (2, 4, 5))

    def na(shared):
        def op(q, k, bias, v):
            return na_aggregate(na_maps(3, q, k, bias), v)
        return _check_fn(op, (2, 3, 5, 6), (2, 3, 5, 6), (2, 5, 5), ((1, 2, 5, 6) if shared else (2, 3, 5, 6)))

    def na_maps_only(q, k, bias):
        return na_maps(5, q, k, bias).weights

    suite = {
        "add": _check_fn(lambda a, b: a + b, (3, 4), (4,)),
        "sub": _check_fn(lambda a, b: a - b, (3, 1), (3, 4)),
        "mul": _check_fn(lambda a, b: a * b, (2, 3, 4), (3, 1)),
        "div": _check_fn(lambda a, b: a / b, (3, 4), (3, 4), positive=True),
        "neg": _check_fn(ops.neg, (3, 4)),
        "power": _check_fn(lambda a: ops.power(a, 2.5), (3, 4), positive=True),
        "exp": _check_fn(ops.exp, (3, 4)),
        "log": _check_fn(ops.log, (3, 4), positive=True),
        "sqrt": _check_fn(ops.sqrt, (3, 4), positive=True),
        "abs": _check_fn(ops.abs, (3, 4), kink=True),
        "tanh": _check_fn(ops.tanh, (3, 4)),
        "relu": _check_fn(ops.relu, (3, 4), kink=True),
        "gelu": _check_fn(ops.gelu, (3, 4)),
        "matmul": _check_fn(ops.matmul, (3, 4), (4, 5)),
        "sum": _check_fn(lambda a: ops.sum(a, axis=1, keepdims=True), (3, 4, 2)),
        "mean": _check_fn(lambda a: ops.mean(a, axis=(0, 2)), (3, 4, 2)),
        "reshape": _check_fn(lambda a: ops.reshape(a, (4, 6)), (2, 3, 4)),
        "transpose": _check_fn(lambda a: ops.transpose(a, (2, 0, 1)), (2, 3, 4)),
        "getitem": _check_fn(lambda a: a[1:, ::2] + a[np.array([0, 2])][:, 1:3], (3, 4)),
        "concat": _check_fn(lambda a, b: ops.concat([a, b], axis=0), (2, 4, 4), (3, 4, 4)),
        "broadcast_to": _check_fn(lambda a: ops.broadcast_to(a, (3, 2, 4)), (2, 1)),
        "softmax": _check_fn(lambda a: ops.softmax(a, axis=1), (3, 5)),
        "layer_norm": _check_fn(lambda x, g, b: ops.layer_norm(x, g, b), (4, 3, 3), (4,), (4,)),
        "instance_norm": _check_fn(ops.instance_norm, (3, 4, 5)),
        "conv2d": _check_fn(lambda x, w, b: ops.conv2d(x, w, b, stride=1, pad=1), (2, 5, 6), (3, 2, 3, 3), (3,)),
        "conv2d_stride2": _check_fn(lambda x, w: ops.conv2d(x, w, None, stride=2, pad=3), (2, 9, 8), (3, 2, 7, 7)),
        "linear_1x1": _check_fn(ops.linear_1x1, (3, 4, 5), (2, 3), (2,)),
        "bilinear_resize": _check_fn(lambda x: ops.bilinear_resize(x, (7, 5), flow=True), (2, 4, 6)),
        "avg_downsample": _check_fn(lambda x: ops.avg_downsample(x, 2), (2, 4, 6)),
        "pixel_shuffle": _check_fn(lambda x: ops.pixel_shuffle(x, 2), (4, 3, 2, 5)),
        "convex_aggregate_zero": convex("zero"),
        "convex_aggregate_clamp": convex("clamp"),
        "na_maps": _check_fn(na_maps_only, (4, 3, 6, 7), (4, 3, 6, 7), (4, 9, 9)),
        "na_aggregate": na(shared=False),
        "na_aggregate_shared": na(shared=True),
        "nat_block": _module_check(lambda rng: NATBlock(8, 3, rng, head_dim=4),
                                   lambda rng: [_leaf(rng, (8, 5, 6))]),
        "tcu_step": _module_check(lambda rng: TCUStep(16, 8, 16, 5, rng, head_dim=8),
                                  lambda rng: [_leaf(rng, (2, 6, 6)), _leaf(rng, (16, 6, 6)), _leaf(rng, (8, 6, 6))]),
        "tcu_reduced": _module_check(lambda rng: TCU(UpsamplerConfig.reduced(), rng),
                                     lambda rng: [_leaf(rng, (2, 4, 4)), _leaf(rng, (16, 4, 4)),
                                                  [_leaf(rng, (8, 16, 16)), _leaf(rng, (12, 8, 8)),
                                                   _leaf(rng, (16, 4, 4))]], max_samples=6, input_samples=48),
        "context_encoder": _module_check(lambda rng: ContextEncoder(rng),
                                         lambda rng: [_leaf(rng, (3, 16, 16))], max_samples=6),
    }
    return suite


def suite_names() -> list:
    return list(_suite())


def run_suite(names: Sequence[str] | None = None, seed: int = 0) -> list:
    """Run the named checks (all by default); each gets its own seeded generator."""
    suite = _suite()
    names = list(suite) if names is None else list(names)
    unknown = [n for n in names if n not in suite]
    if unknown:
        raise KeyError(f"unknown gradcheck op(s) {unknown}; known: {sorted(suite)}")
    return [suite[n](np.random.default_rng([seed, i]), n) for i, n in enumerate(names)]
