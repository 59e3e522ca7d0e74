"""Small neural-net layer zoo on top of the autodiff Tensor.

Modules own Parameters and register submodules by attribute assignment;
named_parameters() walks the tree with dotted names, which is also the
naming scheme used in checkpoints.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}" if not prefix else f"{prefix}.{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}")
                    elif isinstance(item, Tensor):
                        yield f"{full}.{i}", item

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _param(rng: np.random.Generator, shape, scale: float, dtype) -> Tensor:
    t = Tensor(rng.normal(0.0, scale, size=shape).astype(dtype), requires_grad=True)
    return t


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, rng, in_dim: int, out_dim: int, bias: bool = True,
                 dtype=np.float32):
        self.w = _param(rng, (in_dim, out_dim), 1.0 / np.sqrt(in_dim), dtype)
        self.b = _zeros((out_dim,), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.w)
        if self.b is not None:
            y = ad.add(y, self.b)
        return y


class Conv2d(Module):
    def __init__(self, rng, in_ch: int, out_ch: int, k: int, stride: int = 1,
                 padding: int = 0, dtype=np.float32):
        fan_in = in_ch * k * k
        self.w = _param(rng, (out_ch, in_ch, k, k), 1.0 / np.sqrt(fan_in), dtype)
        self.b = _zeros((out_ch,), dtype)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int, eps: float = 1e-5, dtype=np.float32):
        self.gamma = _ones((channels,), dtype)
        self.beta = _zeros((channels,), dtype)
        self.groups = groups
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.group_norm(x, self.groups, self.gamma, self.beta, self.eps)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float32):
        self.gamma = _ones((dim,), dtype)
        self.beta = _zeros((dim,), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, rng, vocab: int, dim: int, dtype=np.float32):
        self.w = _param(rng, (vocab, dim), 0.02, dtype)

    def __call__(self, ids) -> Tensor:
        return ad.embedding(self.w, ids)
