"""Transformer convex upsampler: three x2 attention steps with image-feature injection."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import ops
from .attention import HEAD_DIM, NATBlock, QKVProjection, crop_bias, na_aggregate, na_maps
from .errors import ConfigError, DimensionError
from .nn import Conv1x1, Conv2d, Module, parameter
from .tensor import Tensor
from .windows import check_window

ENCODER_CHANNELS = (64, 96, 128)
STEP_FACTOR = 2


# context encoder ---------------------------------------------------------------

class ResidualBlock(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, stride: int = 1):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, 3, rng, stride=stride)
        self.conv2 = Conv2d(cout, cout, 3, rng)
        self.down = Conv2d(cin, cout, 1, rng, stride=stride) if stride != 1 or cin != cout else None

    def forward(self, x: Tensor) -> Tensor:
        y = ops.relu(ops.instance_norm(self.conv1(x)))
        y = ops.relu(ops.instance_norm(self.conv2(y)))
        if self.down is not None:
            x = ops.instance_norm(self.down(x))
        return ops.relu(x + y)


class ContextEncoder(Module):
    """Three stages, each halving resolution; returns features at 1/2, 1/4 and 1/8."""

    def __init__(self, rng: np.random.Generator, channels: Sequence[int] = ENCODER_CHANNELS,
                 zero_init_proj: bool = False):
        super().__init__()
        c0, c1, c2 = channels
        self.channels = tuple(channels)
        self.stem = Conv2d(3, c0, 7, rng, stride=2)
        self.r0 = [ResidualBlock(c0, c0, rng), ResidualBlock(c0, c0, rng)]
        self.r1 = [ResidualBlock(c0, c1, rng, stride=2), ResidualBlock(c1, c1, rng)]
        self.r2 = [ResidualBlock(c1, c2, rng, stride=2), ResidualBlock(c2, c2, rng)]
        self.proj = [Conv1x1(c, c, rng, zero_init=zero_init_proj) for c in channels]

    def forward(self, image: Tensor) -> tuple:
        if image.ndim != 3 or image.shape[0] != 3:
            raise DimensionError(f"context encoder expects a (3,H,W) image, got {image.shape}")
        _, h, w = image.shape
        if h % 8 or w % 8:
            raise ConfigError(f"image size {h}x{w} must be divisible by 8")
        x = ops.relu(ops.instance_norm(self.stem(image)))
        feats = []
        for stage, proj in zip((self.r0, self.r1, self.r2), self.proj):
            for block in stage:
                x = block(x)
            feats.append(proj(x))
        return tuple(feats)


def context_encode(image: Tensor, encoder: ContextEncoder) -> tuple:
    return encoder(image)


# upsampler ---------------------------------------------------------------------

@dataclass
class UpsamplerConfig:
    """Hyper-parameters of the hierarchical upsampler; lists run low -> high resolution."""

    steps: int = 3
    mask_sizes: tuple = (9, 7, 5)
    dims: tuple = (128, 64, 32)
    head_dim: int = HEAD_DIM
    inject_features: bool = True
    padding: str = "clamp"
    rel_bias: bool = True
    hidden_dim: int = 128
    image_channels: tuple = (128, 96, 64)

    def __post_init__(self):
        self.mask_sizes = tuple(int(m) for m in self.mask_sizes)
        self.dims = tuple(int(d) for d in self.dims)
        self.image_channels = tuple(int(c) for c in self.image_channels)
        if len(self.mask_sizes) != self.steps or len(self.dims) != self.steps:
            raise ConfigError(f"need {self.steps} mask sizes and dims, got {self.mask_sizes} and {self.dims}")
        if self.inject_features and len(self.image_channels) != self.steps:
            raise ConfigError("need one image channel count per step")
        for m in self.mask_sizes:
            check_window(m)
        for a, b in zip(self.dims, self.dims[1:]):
            if b * 2 != a:
                raise ConfigError(f"dims must halve per step, got {self.dims}")
        if self.padding != "clamp":
            raise ConfigError("attention upsampling only supports clamped windows")

    @classmethod
    def reduced(cls, **overrides) -> "UpsamplerConfig":
        """Narrow variant (D=16, head width 8) for fast 64-bit gradient checks."""
        base = dict(dims=(16, 8, 4), head_dim=8, hidden_dim=16, image_channels=(16, 12, 8))
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


def effective_window(m: int, h: int, w: int) -> int:
    """Largest odd window <= m that fits a ``h x w`` map."""
    e = min(m, h, w)
    return e if e % 2 else e - 1


class TCUStep(Module):
    """One x2 step: embed, two NAT blocks, 4-head attention maps, aggregate flow and values."""

    def __init__(self, feat_dim: int, image_dim: int, dim: int, m: int, rng: np.random.Generator,
                 head_dim: int = HEAD_DIM, rel_bias: bool = True):
        super().__init__()
        check_window(m)
        self.m, self.dim = m, dim
        self.in_channels = feat_dim + image_dim + 2
        self.image_dim = image_dim
        self.embed = Conv1x1(self.in_channels, dim, rng)
        self.blocks = [NATBlock(dim, m, rng, head_dim, rel_bias=rel_bias) for _ in range(2)]
        self.qkv = QKVProjection(dim, STEP_FACTOR, rng)
        heads = STEP_FACTOR * STEP_FACTOR
        self.rel_bias = parameter(np.zeros((heads, 2 * m - 1, 2 * m - 1))) if rel_bias else None

    def attention_maps(self, flow_in: Tensor, feat_in: Tensor, image_feat: Optional[Tensor] = None):
        """Return ``(lam, v)`` for this step's inputs."""
        _, h, w = flow_in.shape
        parts = [feat_in]
        if self.image_dim:
            if image_feat is None:
                raise DimensionError("this step was built with feature injection but got no image features")
            parts.append(image_feat)
        parts.append(flow_in)
        for p in parts:
            if p.shape[1:] != (h, w):
                raise DimensionError(f"input {p.shape} not aligned with flow {flow_in.shape}")
        cat = ops.concat(parts, axis=0)
        if cat.shape[0] != self.in_channels:
            raise DimensionError(f"embedding expects {self.in_channels} channels, got {cat.shape[0]}")
        m = effective_window(self.m, h, w)
        e = self.embed(cat)
        for block in self.blocks:
            e = block(e, m)
        q, k, v = self.qkv(e)
        lam = na_maps(m, q, k, crop_bias(self.rel_bias, m), f=STEP_FACTOR)
        return lam, v

    def forward(self, flow_in: Tensor, feat_in: Tensor, image_feat: Optional[Tensor] = None) -> tuple:
        _, h, w = flow_in.shape
        lam, v = self.attention_maps(flow_in, feat_in, image_feat)
        flow_heads = na_aggregate(lam, ops.reshape(flow_in, (1, 2, h, w)))
        flow_up = ops.pixel_shuffle(flow_heads, STEP_FACTOR)
        h_up = ops.pixel_shuffle(na_aggregate(lam, v), STEP_FACTOR)
        return flow_up, h_up


def tcu_step(flow_in: Tensor, feat_in: Tensor, image_feat: Optional[Tensor], step: TCUStep) -> tuple:
    return step(flow_in, feat_in, image_feat)


class TCU(Module):
    """Hierarchical upsampler taking 1/8-scale flow to full resolution in x2 steps."""

    def __init__(self, cfg: UpsamplerConfig | None = None, rng: np.random.Generator | None = None):
        super().__init__()
        self.cfg = cfg = cfg or UpsamplerConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        steps = []
        for i in range(cfg.steps):
            feat_dim = cfg.hidden_dim if i == 0 else cfg.dims[i - 1] // 2
            image_dim = cfg.image_channels[i] if cfg.inject_features else 0
            steps.append(TCUStep(feat_dim, image_dim, cfg.dims[i], cfg.mask_sizes[i], rng,
                                 cfg.head_dim, cfg.rel_bias))
        self.steps = steps

    @property
    def factor(self) -> int:
        return STEP_FACTOR ** self.cfg.steps

    def forward(self, flow: Tensor, h: Tensor, image_feats: Optional[Sequence[Tensor]] = None) -> Tensor:
        """``image_feats`` is ordered high -> low resolution, as the encoder returns it."""
        if self.cfg.inject_features:
            if image_feats is None or len(image_feats) < self.cfg.steps:
                raise DimensionError(f"feature injection needs {self.cfg.steps} image feature maps")
            scales = list(image_feats)[::-1]
        feat = h
        for i, step in enumerate(self.steps):
            img = scales[i] if self.cfg.inject_features else None
            flow, feat = step(flow, feat, img)
        return flow

    def relbias_parameter_count(self) -> int:
        return int(sum(p.size for n, p in self.named_parameters() if n.endswith("rel_bias")))

    def parameter_count(self, include_relbias: bool = False) -> int:
        total = self.num_parameters()
        return total if include_relbias else total - self.relbias_parameter_count()


def tcu_upsample(flow_lr: Tensor, h_final: Tensor, image_feats: Sequence[Tensor], model: TCU) -> Tensor:
    return model(flow_lr, h_final, image_feats)
