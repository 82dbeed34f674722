"""Parameter containers and the small layer zoo shared by encoder and decoder."""

from __future__ import annotations

from typing import Iterator, Optional, Tuple

import numpy as np

from .tensor import (
    Parameter,
    Rng,
    Tensor,
    conv2d,
    depthwise_conv1d,
    layer_norm,
    matmul,
)


def xavier_uniform(rng: Rng, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Minimal parameter container; names come from attribute paths."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> Iterator[Parameter]:
        for _, p in self.named_parameters():
            yield p

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    """Affine map ``x @ W + b`` with ``W`` of shape (d_in, d_out)."""

    def __init__(self, d_in: int, d_out: int, rng: Rng, bias: bool = True):
        self.weight = Parameter(xavier_uniform(rng, (d_in, d_out), d_in, d_out))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-12):
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, num_embeddings: int, d: int, rng: Rng):
        self.weight = Parameter(xavier_uniform(rng, (num_embeddings, d), num_embeddings, d))

    def forward(self, ids: np.ndarray) -> Tensor:
        return self.weight[np.asarray(ids, dtype=np.intp)]


class DepthwiseConv1d(Module):
    """Same-padded per-channel convolution over time."""

    def __init__(self, channels: int, kernel_size: int, rng: Rng):
        self.weight = Parameter(xavier_uniform(rng, (channels, kernel_size), kernel_size, kernel_size))
        self.bias = Parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return depthwise_conv1d(x, self.weight, self.bias)


class Conv2d(Module):
    """Valid 2-D convolution used by the subsampling frontend."""

    def __init__(self, c_in: int, c_out: int, rng: Rng, kernel_size: int = 3, stride: int = 2):
        k = kernel_size
        self.weight = Parameter(xavier_uniform(rng, (c_out, c_in, k, k), c_in * k * k, c_out * k * k))
        self.bias = Parameter(np.zeros(c_out))
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride)


def set_parameters(module: Module, values: dict, strict: bool = True) -> None:
    """Load a ``name -> array`` mapping into a module's parameters."""
    params = dict(module.named_parameters())
    if strict and set(params) != set(values):
        missing = sorted(set(params) - set(values))
        extra = sorted(set(values) - set(params))
        raise KeyError(f"parameter name sets differ; missing={missing[:5]} extra={extra[:5]}")
    for name, p in params.items():
        if name in values:
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()


def get_parameters(module: Module) -> dict:
    return {name: p.data.copy() for name, p in module.named_parameters()}
