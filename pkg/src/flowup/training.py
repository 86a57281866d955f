"""Toy-scale trainer: sequence loss, two learning-rate groups and the no-interpolation continuation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DimensionError, TrainingDivergedError
from .evaluation import epe
from .pipeline import DEFAULT_SIGMAS, FlowModel, canonical_mode
from .synthesis import AugmentConfig, SyntheticSample, augment
from .tcu import UpsamplerConfig
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

# reference-scale schedule; desk runs override both
REFERENCE_ITERATIONS = 100_000
REFERENCE_BATCH = 3
NOAUG_FRACTION = 0.4
METRIC_COLUMNS = ("step", "loss", "epe_val", "lr_group0", "lr_group1")

Pair = Tuple[np.ndarray, np.ndarray]


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 4
    base_lr: float = 1e-4
    fresh_lr: float = 2e-4
    gamma: float = 0.8
    seed: int = 0
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    mode: str = "dc-tcu"
    upsampler: UpsamplerConfig = field(default_factory=UpsamplerConfig)
    sigmas: tuple = DEFAULT_SIGMAS
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-5
    warmup_fraction: float = 0.05
    eval_every: int = 100
    val_fraction: float = 0.1
    max_val: int = 16

    def __post_init__(self):
        self.mode = canonical_mode(self.mode)
        if self.iterations < 1 or self.batch_size < 1:
            raise ConfigError("iterations and batch_size must be positive")
        if self.base_lr < 0 or self.fresh_lr < 0:
            raise ConfigError("learning rates must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aug"]["crop"] = list(self.aug.crop)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        aug = dict(d.pop("aug"))
        aug["crop"] = tuple(aug["crop"])
        aug["scale_range"] = tuple(aug["scale_range"])
        return cls(aug=AugmentConfig(**aug), upsampler=UpsamplerConfig(**d.pop("upsampler")), **d)


def sequence_loss(preds: Sequence[Tensor], gt, gamma: float = 0.8) -> Tensor:
    """``sum_i gamma^(I-1-i) * mean|preds_i - gt|``."""
    if not preds:
        raise ValueError("sequence_loss needs at least one prediction")
    target = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    n = len(preds)
    total = None
    for i, p in enumerate(preds):
        if p.shape != target.shape:
            raise DimensionError(f"prediction {i} has shape {p.shape}, ground truth {target.shape}")
        term = ops.abs(p - Tensor(target, dtype=p.dtype)).mean() * (gamma ** (n - 1 - i))
        total = term if total is None else total + term
    return total


def one_cycle(step: int, total: int, warmup_fraction: float = 0.05) -> float:
    """LR multiplier for 0-based ``step``: linear warmup, then linear decay to zero."""
    warm = max(1, int(round(warmup_fraction * total)))
    if step < warm:
        return (step + 1) / warm
    return max(0.0, (total - step) / max(1, total - warm))


class AdamW:
    """Adam with decoupled weight decay over named parameter groups."""

    def __init__(self, groups: Sequence[dict], betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.groups = [dict(g, params=list(g["params"])) for g in groups]
        seen = set()
        for g in self.groups:
            for p in g["params"]:
                if id(p) in seen:
                    raise ConfigError("a parameter appears in more than one group")
                seen.add(id(p))
        self.betas, self.eps, self.weight_decay = betas, eps, weight_decay
        self.t = 0
        self.state = {}

    def current_lrs(self, scale: float = 1.0) -> List[float]:
        return [g["lr"] * scale for g in self.groups]

    def step(self, scale: float = 1.0) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for g in self.groups:
            lr = g["lr"] * scale
            for p in g["params"]:
                if p.grad is None:
                    continue
                m, v = self.state.get(id(p), (None, None))
                if m is None:
                    m, v = np.zeros_like(p.data), np.zeros_like(p.data)
                grad = p.grad.astype(p.data.dtype, copy=False)
                m = b1 * m + (1 - b1) * grad
                v = b2 * v + (1 - b2) * grad * grad
                self.state[id(p)] = (m, v)
                if lr == 0:
                    continue
                p.data = p.data * (1 - lr * self.weight_decay) - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for g in self.groups:
            for p in g["params"]:
                p.grad = None


def build_optimizer(model: FlowModel, cfg: TrainConfig) -> AdamW:
    """Group 0: pre-trained (everything else); group 1: the last-iteration upsampler's own parameters."""
    fresh = model.fresh_parameters()
    fresh_ids = {id(p) for p in fresh}
    base = [p for p in model.parameters() if id(p) not in fresh_ids]
    assert len(base) + len(fresh) == len(model.parameters())
    log.info("lr groups: base=%d tensors @ %g, fresh=%d tensors @ %g", len(base), cfg.base_lr, len(fresh), cfg.fresh_lr)
    return AdamW([{"name": "base", "lr": cfg.base_lr, "params": base},
                  {"name": "fresh", "lr": cfg.fresh_lr, "params": fresh}],
                 betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)


def split_dataset(dataset: Sequence[Pair], fraction: float) -> Tuple[list, list]:
    data = list(dataset)
    if not data:
        raise ConfigError("dataset is empty")
    if len(data) == 1:
        return data, data
    n_val = min(len(data) - 1, max(1, int(round(fraction * len(data)))))
    return data[:-n_val], data[-n_val:]


def validation_epe(model: FlowModel, pairs: Sequence[Pair], seed: int = 0) -> float:
    """Mean EPE of the last-iteration prediction, noise-free emulator schedule endpoint."""
    errs = []
    with no_grad():
        for i, (image, flow) in enumerate(pairs):
            pred = model.forward_all(image, flow, seed=seed + i, train=False)[-1]
            errs.append(epe(pred.data, flow)[0])
    return float(np.mean(errs))


def predict(model: FlowModel, pairs: Sequence[Pair], seed: int = 0) -> List[np.ndarray]:
    with no_grad():
        return [model.forward_all(img, flo, seed=seed + i, train=False)[-1].data for i, (img, flo) in enumerate(pairs)]


def _grad_norms(model: FlowModel) -> dict:
    out = {}
    for name, p in model.named_parameters():
        if p.grad is not None:
            out[name] = float(np.sqrt(np.sum(p.grad.astype(np.float64) ** 2)))
    return out


@dataclass
class TrainResult:
    model: FlowModel
    losses: List[float]
    metrics: List[dict]
    resize_calls: int = 0

    @property
    def final_val_epe(self) -> float:
        vals = [m["epe_val"] for m in self.metrics if m["epe_val"] is not None]
        return vals[-1] if vals else float("nan")


def write_metrics(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: ("" if r[k] is None else r[k]) for k in METRIC_COLUMNS})


def train(cfg: TrainConfig, dataset: Sequence[Pair], val: Optional[Sequence[Pair]] = None,
          model: Optional[FlowModel] = None, metrics_path=None,
          callback: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Optimise ``model`` (fresh if omitted) for ``cfg.iterations`` steps.

    Every step draws ``batch_size`` samples, augments each, and accumulates
    gradients of the per-sample sequence loss in batch order. Validation EPE is
    logged every ``eval_every`` steps and at the end.
    """
    if val is None:
        train_set, val = split_dataset(dataset, cfg.val_fraction)
    else:
        train_set = list(dataset)
    if not train_set:
        raise ConfigError("dataset is empty")
    val = list(val)[: cfg.max_val]
    if model is None:
        model = FlowModel(cfg.mode, cfg.upsampler, cfg.sigmas, seed=cfg.seed)
    opt = build_optimizer(model, cfg)
    rng = np.random.default_rng([cfg.seed, 17])
    losses, metrics, window = [], [], []
    resize_calls = 0
    for step in range(cfg.iterations):
        scale = one_cycle(step, cfg.iterations, cfg.warmup_fraction)
        opt.zero_grad()
        picks = rng.integers(0, len(train_set), size=cfg.batch_size)
        step_loss = 0.0
        for b, idx in enumerate(picks):
            image, flow = train_set[int(idx)]
            sample = augment(SyntheticSample(image, flow), cfg.aug, seed=int(rng.integers(2**31)))
            resize_calls += "resize" in sample.meta["ops"]
            preds = model.forward_all(sample.image, sample.flow, seed=int(rng.integers(2**31)))
            loss = sequence_loss(preds, sample.flow, cfg.gamma) * (1.0 / cfg.batch_size)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss {value} at step {step + 1} (sample {b}); "
                    f"lrs={opt.current_lrs(scale)}; grad norms={_grad_norms(model)}")
            loss.backward()
            step_loss += value
        opt.step(scale)
        losses.append(step_loss)
        window.append(step_loss)
        if callback is not None:
            callback(step + 1, step_loss)
        done = step + 1
        if done % cfg.eval_every == 0 or done == cfg.iterations:
            ev = validation_epe(model, val) if val else None
            lr0, lr1 = opt.current_lrs(scale)
            metrics.append({"step": done, "loss": float(np.mean(window)), "epe_val": ev,
                            "lr_group0": lr0, "lr_group1": lr1})
            log.info("step %d loss %.4f val epe %s", done, metrics[-1]["loss"], ev)
            window = []
    if metrics_path is not None:
        write_metrics(metrics_path, metrics)
    return TrainResult(model, losses, metrics, resize_calls)


def continue_without_interpolation(checkpoint, cfg: TrainConfig, dataset: Sequence[Pair],
                                   steps: Optional[int] = None, val: Optional[Sequence[Pair]] = None,
                                   out=None, metrics_path=None) -> TrainResult:
    """Resume from ``checkpoint`` (a path or a model) with resize augmentation off.

    ``steps`` defaults to 40% of ``cfg.iterations``. The optimizer restarts
    with a fresh one-cycle schedule over the continuation.
    """
    if isinstance(checkpoint, FlowModel):
        model = checkpoint
    else:
        model, _ = load_checkpoint(checkpoint)
    n = steps if steps is not None else max(1, int(round(NOAUG_FRACTION * cfg.iterations)))
    cont = replace(cfg, iterations=n, aug=replace(cfg.aug, interpolation_enabled=False),
                   seed=cfg.seed + 1, mode=model.mode)
    result = train(cont, dataset, val=val, model=model, metrics_path=metrics_path)
    if out is not None:
        save_checkpoint(out, result.model, {"train": cont.to_dict(), "continued_from": str(checkpoint)
                                            if not isinstance(checkpoint, FlowModel) else None})
    return result


def save_run(path, result: TrainResult, cfg: TrainConfig, extra: Optional[dict] = None) -> None:
    meta = {"train": cfg.to_dict()}
    meta.update(extra or {})
    save_checkpoint(Path(path), result.model, meta)
