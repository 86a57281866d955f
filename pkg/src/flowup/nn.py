"""Parameter containers and the handful of layers the upsamplers are built from."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import Tensor, get_default_dtype


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=get_default_dtype())


class Module:
    """Attribute-registered tree of parameters and submodules."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            for i, v in enumerate(value):
                self._modules[f"{name}.{i}"] = v
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = own.keys() - state.keys()
            extra = state.keys() - own.keys()
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, value in state.items():
            if name not in own:
                continue
            p = own[name]
            if tuple(value.shape) != p.shape:
                raise ValueError(f"{name}: shape {tuple(value.shape)} != {p.shape}")
            p.data = np.ascontiguousarray(value, dtype=p.dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 bias: bool = True, zero_init: bool = False):
        super().__init__()
        shape = (cout, cin, k, k)
        self.weight = parameter(np.zeros(shape) if zero_init else _he(rng, shape, cin * k * k))
        self.bias = parameter(np.zeros(cout)) if bias else None
        self.stride = stride
        self.pad = k // 2

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class Conv1x1(Module):
    """Pointwise projection stored as an ``(out, in)`` matrix."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, bias: bool = True,
                 zero_init: bool = False, gain: float = 1.0):
        super().__init__()
        w = np.zeros((cout, cin)) if zero_init else rng.normal(0.0, gain / np.sqrt(cin), size=(cout, cin))
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear_1x1(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.weight = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias)


def lookup(module: Module, name: str) -> Optional[Tensor]:
    return dict(module.named_parameters()).get(name)
