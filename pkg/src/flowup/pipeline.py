"""Stand-in for the recurrent flow predictor, and the shared / decoupled upsampler wiring.

The emulator produces ``I`` low-resolution flows by block-averaging the ground
truth and adding Gaussian noise that shrinks with the iteration index. A small
learned conv net turns (context features, flow) into the hidden state each
upsampler consumes.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import ops
from .convex import ConvexUpsampler
from .errors import ConfigError
from .nn import Conv2d, Module
from .tcu import ENCODER_CHANNELS, TCU, ContextEncoder, UpsamplerConfig
from .tensor import Tensor

LOW_RES_FACTOR = 8
DEFAULT_SIGMAS = (2.0, 1.0, 0.5, 0.0)

MODES = ("shared", "dc", "dc-tcu")
_MODE_ALIASES = {"decoupled-baseline": "dc", "decoupled-tcu": "dc-tcu"}


def canonical_mode(mode: str) -> str:
    mode = _MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ConfigError(f"unknown wiring mode {mode!r}; expected one of {MODES}")
    return mode


@dataclass
class RefinementEmulator:
    sigmas: Sequence[float] = DEFAULT_SIGMAS

    def __post_init__(self):
        self.sigmas = tuple(float(s) for s in self.sigmas)
        if not self.sigmas:
            raise ConfigError("need at least one iteration")
        if any(s < 0 for s in self.sigmas) or any(b > a for a, b in zip(self.sigmas, self.sigmas[1:])):
            raise ConfigError(f"noise schedule must be non-negative and non-increasing, got {self.sigmas}")

    @property
    def iterations(self) -> int:
        return len(self.sigmas)

    def emulate(self, flow_gt_hr: np.ndarray, seed: int) -> List[np.ndarray]:
        return emulate_refinement(flow_gt_hr, self.iterations, self.sigmas, seed)


def emulate_refinement(flow_gt_hr: np.ndarray, iterations: int, sigmas: Sequence[float], seed: int) -> List[np.ndarray]:
    """``iterations`` noisy 1/8-scale copies of the block-averaged ground truth."""
    if len(sigmas) != iterations:
        raise ConfigError(f"{len(sigmas)} noise levels for {iterations} iterations")
    flow = np.asarray(flow_gt_hr, dtype=np.float64)
    c, h, w = flow.shape
    if h % LOW_RES_FACTOR or w % LOW_RES_FACTOR:
        raise ConfigError(f"flow size {h}x{w} must be divisible by {LOW_RES_FACTOR}")
    f = LOW_RES_FACTOR
    low = flow.reshape(c, h // f, f, w // f, f).mean(axis=(2, 4))
    rng = np.random.default_rng(seed)
    return [(low + s * rng.standard_normal(low.shape)).astype(np.float32) if s > 0 else low.astype(np.float32)
            for s in sigmas]


class HiddenNet(Module):
    """Two 3x3 convs mapping (1/8 context features, flow) to the 128-d hidden state."""

    def __init__(self, context_dim: int, hidden_dim: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(context_dim + 2, hidden_dim, 3, rng)
        self.conv2 = Conv2d(hidden_dim, hidden_dim, 3, rng)

    def forward(self, context: Tensor, flow: Tensor) -> Tensor:
        x = ops.relu(self.conv1(ops.concat([context, flow], axis=0)))
        return ops.tanh(self.conv2(x))


class FlowModel(Module):
    """Encoder + hidden-state net + shared baseline upsampler + last-iteration upsampler.

    ``mode``: ``shared`` reuses the baseline for every iteration; ``dc`` gives
    the last iteration its own baseline; ``dc-tcu`` uses a TCU for it.
    """

    def __init__(self, mode: str = "dc-tcu", cfg: Optional[UpsamplerConfig] = None,
                 sigmas: Sequence[float] = DEFAULT_SIGMAS, seed: int = 0, baseline_m: int = 3,
                 encoder_channels: Sequence[int] = ENCODER_CHANNELS):
        super().__init__()
        self.mode = canonical_mode(mode)
        self.cfg = cfg or UpsamplerConfig()
        self.emulator = RefinementEmulator(sigmas)
        self.baseline_m = baseline_m
        hidden = self.cfg.hidden_dim
        if self.cfg.inject_features and tuple(self.cfg.image_channels) != tuple(encoder_channels)[::-1]:
            raise ConfigError(f"upsampler expects image channels {self.cfg.image_channels}, "
                              f"encoder produces {tuple(encoder_channels)}")
        rng = np.random.default_rng(seed)
        self.encoder = ContextEncoder(rng, encoder_channels)
        self.hidden = HiddenNet(encoder_channels[-1], hidden, rng)
        self.shared = ConvexUpsampler(hidden, f=LOW_RES_FACTOR, m=baseline_m, rng=rng)
        # the decoupled upsampler draws from its own stream so both modes share the rest of the init
        fresh = np.random.default_rng([seed, 1])
        if self.mode == "dc":
            self.last_upsampler = ConvexUpsampler(hidden, f=LOW_RES_FACTOR, m=baseline_m, rng=fresh)
        elif self.mode == "dc-tcu":
            self.last_upsampler = TCU(self.cfg, fresh)

    @property
    def iterations(self) -> int:
        return self.emulator.iterations

    @property
    def last(self) -> Module:
        return self.shared if self.mode == "shared" else self.last_upsampler

    def fresh_parameters(self) -> list:
        return [] if self.mode == "shared" else self.last_upsampler.parameters()

    def upsample(self, flow_lr: Tensor, context: Tensor, image_feats: Sequence[Tensor], last: bool) -> Tensor:
        h = self.hidden(context, flow_lr)
        return (self.last if last else self.shared)(flow_lr, h, image_feats)

    def forward_all(self, image: np.ndarray, flow_gt: np.ndarray, seed: int, train: bool = True) -> List[Tensor]:
        """High-resolution flow per iteration; with ``train=False`` only the last one."""
        feats = self.encoder(Tensor(image))
        flows = self.emulator.emulate(flow_gt, seed)
        n = len(flows)
        outs = []
        for i, fl in enumerate(flows):
            if not train and i < n - 1:
                continue
            outs.append(self.upsample(Tensor(fl), feats[-1], feats, last=i == n - 1))
        return outs

    def forward(self, image: np.ndarray, flow_lr: np.ndarray) -> Tensor:
        """Test-time path: only the last-iteration upsampler runs."""
        feats = self.encoder(Tensor(image))
        return self.upsample(Tensor(flow_lr), feats[-1], feats, last=True)

    def describe(self) -> dict:
        return {
            "mode": self.mode,
            "upsampler": self.cfg.to_dict(),
            "sigmas": list(self.emulator.sigmas),
            "baseline_m": self.baseline_m,
            "encoder_channels": list(self.encoder.channels),
        }

    @classmethod
    def from_description(cls, desc: dict) -> "FlowModel":
        return cls(mode=desc["mode"], cfg=UpsamplerConfig(**desc["upsampler"]), sigmas=desc["sigmas"],
                   baseline_m=desc.get("baseline_m", 3),
                   encoder_channels=tuple(desc.get("encoder_channels", ENCODER_CHANNELS)))
