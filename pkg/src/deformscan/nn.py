"""Parameter containers and the handful of layers shared across the model."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal draw re-sampled into (-2 std, 2 std)."""
    vals = rng.normal(0.0, std, size=shape)
    bad = np.abs(vals) > 2 * std
    while bad.any():
        vals[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(vals) > 2 * std
    return vals.astype(dtype)


class Module:
    """Base class: parameters are Tensor attributes with requires_grad set.

    Submodules are discovered through attributes (including lists of
    modules), in insertion order, so parameter naming is deterministic.
    """

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}" if prefix else key
            yield from _walk_params(name, val)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in own.items():
            arr = state[name]
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _walk_params(name: str, val):
    if isinstance(val, Tensor) and val.requires_grad:
        yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(prefix=f"{name}.")
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk_params(f"{name}.{i}", item)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True, *,
                 rng: np.random.Generator, dtype=np.float32):
        self.weight = Tensor(trunc_normal(rng, (out_features, in_features), dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0,
                 dilation: int = 1, groups: int = 1, bias: bool = True, *,
                 rng: np.random.Generator, dtype=np.float32):
        self.stride, self.padding, self.dilation, self.groups = stride, padding, dilation, groups
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.weight = Tensor(
            trunc_normal(rng, (out_ch, in_ch // groups, kernel, kernel), dtype=dtype), requires_grad=True
        )
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding,
                        dilation=self.dilation, groups=self.groups)


class LayerNorm(Module):
    """Normalization over the last axis (use :func:`channel_norm` for BCHW)."""

    def __init__(self, dim: int, eps: float = 1e-6, *, dtype=np.float32):
        self.eps = eps
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        inv = (var + self.eps) ** -0.5
        return centered * inv * self.gamma + self.beta


def channel_norm(ln: LayerNorm, x: Tensor) -> Tensor:
    """Apply a LayerNorm over the channel axis of a (B, C, H, W) tensor."""
    b, c, h, w = x.shape
    xl = x.transpose(0, 2, 3, 1)
    return ln(xl).transpose(0, 3, 1, 2)


def linear_channels(lin: Linear, x: Tensor) -> Tensor:
    """Apply a Linear over the channel axis of a (B, C, H, W) tensor (1x1 projection)."""
    xl = x.transpose(0, 2, 3, 1)
    return lin(xl).transpose(0, 3, 1, 2)


def softplus_inverse(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


def count_tensor_params(module: Module) -> int:
    """Brute-force element tally over every learnable tensor."""
    return sum(int(math.prod(p.shape)) for p in module.parameters())
