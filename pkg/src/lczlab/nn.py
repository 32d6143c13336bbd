"""Stateful layers wrapping :mod:`lczlab.ops` with their parameters.

Parameters are discovered in attribute-assignment order, which fixes the
order used by checkpoints.
"""

from __future__ import annotations

import math

import numpy as np

from . import ops
from .tensor import Parameter, Tensor


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        seen: set[int] = set()
        for _, p in self.named_parameters():
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
        return out

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            yield from _walk(value, f"{prefix}{name}")

    def named_buffers(self, prefix: str = ""):
        for name, value in vars(self).items():
            yield from _walk_buffers(value, f"{prefix}{name}")


def _walk(value, name):
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk(v, f"{name}.{k}")


def _walk_buffers(value, name):
    if isinstance(value, BatchNorm2d):
        yield f"{name}.running_mean", value.running_mean
        yield f"{name}.running_var", value.running_var
    elif isinstance(value, Module):
        yield from value.named_buffers(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk_buffers(v, f"{name}.{i}")


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, rng, dtype=np.float32, bias: bool = True):
        fan_in = in_ch * k * k
        self.weight = Parameter(kaiming_uniform(rng, (out_ch, in_ch, k, k), fan_in, dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype)) if bias else None
        self.out_channels = out_ch

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, padding="same")


class Dense(Module):
    def __init__(self, d_in: int, d_out: int, rng, dtype=np.float32):
        self.weight = Parameter(kaiming_uniform(rng, (d_in, d_out), d_in, dtype))
        self.bias = Parameter(np.zeros(d_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.dense(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return ops.batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var, mode, self.momentum, self.eps
        )


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng, dtype=np.float32):
        self.heads = heads
        self.params = {}
        for name in ("q", "k", "v", "o"):
            self.params["w" + name] = Parameter(kaiming_uniform(rng, (dim, dim), dim, dtype))
            self.params["b" + name] = Parameter(np.zeros(dim, dtype=dtype))

    def __call__(self, query_src: Tensor, kv_src: Tensor) -> Tensor:
        return ops.multi_head_attention(query_src, kv_src, self.heads, self.params)
