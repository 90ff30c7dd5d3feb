"""Parameterized layers built on the functional ops in :mod:`semflow.tensor`."""
from __future__ import annotations

import zlib
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import BatchNormState, Parameter, Tensor

NORMS = ("batchnorm", "none")


class Module:
    """Container that discovers parameters and children from its attributes.

    Attribute insertion order fixes parameter order, which in turn fixes the
    checkpoint layout.
    """

    def __init__(self):
        self.training = True

    def children(self) -> Iterator[tuple]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
        for key, child in self.children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        """Non-trainable state (batch-norm running statistics) as (name, owner, attr)."""
        for key, value in vars(self).items():
            if isinstance(value, BatchNormState):
                yield f"{prefix}{key}.running_mean", value, "running_mean"
                yield f"{prefix}{key}.running_var", value, "running_var"
        for key, child in self.children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        """Cast every parameter and buffer in place (float64 for gradcheck)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.momentum_buf = p.momentum_buf.astype(dtype)
            p.grad = None
        for _, owner, attr in self.named_buffers():
            setattr(owner, attr, getattr(owner, attr).astype(dtype))
        return self

    def finalize(self, seed: int) -> "Module":
        """Name every parameter by its dotted path and initialize it.

        Each parameter draws from its own stream keyed by (seed, name), so two
        models that share a parameter name start from identical values.
        """
        for name, p in self.named_parameters():
            p.name = name
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            kind = getattr(p, "_init", "zeros")
            if kind == "fan_in":
                fan_in = int(np.prod(p.shape[1:]))
                bound = np.sqrt(6.0 / fan_in)
                p.data[...] = rng.uniform(-bound, bound, size=p.shape)
            elif kind == "ones":
                p.data[...] = 1
            else:
                p.data[...] = 0
            p.momentum_buf[...] = 0
        return self


class _Param(Parameter):
    __slots__ = ("_init",)

    def __init__(self, shape, init: str):
        super().__init__(np.zeros(shape, dtype=np.float32))
        self._init = init


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, bias: bool = True, zero_init: bool = False):
        super().__init__()
        self.stride = stride
        self.padding = k // 2
        self.weight = _Param((cout, cin, k, k), "zeros" if zero_init else "fan_in")
        self.bias = _Param((cout,), "zeros") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int):
        super().__init__()
        self.gamma = _Param((channels,), "ones")
        self.beta = _Param((channels,), "zeros")
        self.state = BatchNormState(channels)

    def __call__(self, x: Tensor) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.state, self.training)


class ConvNormAct(Module):
    """conv -> (batch norm) -> (relu). The conv carries a bias only without norm."""

    def __init__(self, cin: int, cout: int, k: int, norm: str = "batchnorm", act: bool = True):
        super().__init__()
        if norm not in NORMS:
            raise ConfigError(f"norm must be one of {NORMS}, got {norm!r}")
        self.conv = Conv2d(cin, cout, k, bias=norm == "none")
        self.bn = BatchNorm2d(cout) if norm == "batchnorm" else None
        self.act = act

    def __call__(self, x: Tensor) -> Tensor:
        y = self.conv(x)
        if self.bn is not None:
            y = self.bn(y)
        return T.relu(y) if self.act else y
