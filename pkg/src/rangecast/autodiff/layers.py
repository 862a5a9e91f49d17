"""Parameter-holding layers built on the functional ops."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import functional as fn
from .tensor import Tensor


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int] = (1, 1, 1)
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple = fn.NO_PAD
    transposed: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kernel", fn._as_triple(self.kernel))
        object.__setattr__(self, "stride", fn._as_triple(self.stride))
        object.__setattr__(self, "padding", fn.normalize_padding(self.padding))
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ValueError(f"kernel and stride entries must be >= 1: {self.kernel}, {self.stride}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.transposed:
            return (self.in_channels, self.out_channels) + self.kernel
        return (self.out_channels, self.in_channels) + self.kernel

    def output_shape(self, in_shape: tuple[int, int, int]) -> tuple[int, int, int]:
        out = []
        for n, k, s, (mode, p) in zip(in_shape, self.kernel, self.stride, self.padding):
            if self.transposed:
                out.append((n - 1) * s + k - 2 * p)
            else:
                out.append((n + 2 * p - k) // s + 1)
        return tuple(out)


class Module:
    """Minimal container: named parameters, named buffers, train/eval flag."""

    training = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield f"{name}.{i}", v

    def _own_params(self) -> dict[str, Tensor]:
        return {}

    def _own_buffers(self) -> dict[str, np.ndarray]:
        return {}

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._own_params().items():
            yield prefix + name, p
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._own_buffers().items():
            yield prefix + name, b
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Conv3d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator, slope: float = 0.2, dtype=np.float32,
                 bias: bool = True):
        self.spec = spec
        # Kaiming-style fan-in scaling for a leaky ReLU with the given slope
        fan_in = spec.in_channels * math.prod(spec.kernel)
        if spec.transposed:
            fan_in = max(1, fan_in // math.prod(spec.stride))
        std = math.sqrt(2.0 / (1.0 + slope ** 2)) / math.sqrt(fan_in)
        self.weight = Tensor(rng.normal(0.0, std, size=spec.weight_shape).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(spec.out_channels, dtype=dtype), requires_grad=True) if bias else None

    def _own_params(self):
        if self.bias is None:
            return {"weight": self.weight}
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        s = self.spec
        if s.transposed:
            return fn.conv3d_transposed(x, self.weight, self.bias, s.stride, s.padding)
        return fn.conv3d(x, self.weight, self.bias, s.stride, s.padding)


class BatchNorm3d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float32):
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def _own_params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def _own_buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def __call__(self, x: Tensor) -> Tensor:
        return fn.batchnorm3d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              self.training, self.momentum, self.eps)


class ConvBlock(Module):
    """conv -> BN -> leaky ReLU. The conv has no bias: BN's mean subtraction would cancel it."""

    def __init__(self, spec: ConvSpec, rng: np.random.Generator, slope: float = 0.2, dtype=np.float32):
        self.conv = Conv3d(spec, rng, slope, dtype, bias=False)
        self.bn = BatchNorm3d(spec.out_channels, dtype=dtype)
        self.slope = slope

    def __call__(self, x: Tensor) -> Tensor:
        return fn.leaky_relu(self.bn(self.conv(x)), self.slope)
