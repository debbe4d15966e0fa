"""Desk-scale hierarchical encoders producing the four-level feature pyramid.

Any backbone that emits features at 1/4, 1/8, 1/16 and 1/32 resolution with
the configured widths satisfies the decoder's input contract; a residual
convolutional encoder and a scan-block encoder are provided to exercise it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, LayerNorm, Module, channel_norm
from .ssm_scan import SS2D
from .tensor import Tensor

ENCODER_KINDS = ("conv", "ss2d")


@dataclass
class FeaturePyramid:
    """Encoder outputs E1..E4 at resolutions H/4, H/8, H/16, H/32."""

    e1: Tensor
    e2: Tensor
    e3: Tensor
    e4: Tensor

    def as_tuple(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return (self.e1, self.e2, self.e3, self.e4)


class Stem(Module):
    """Two stride-2 convs patchifying the image to 1/4 resolution."""

    def __init__(self, out_channels: int, *, rng, dtype=np.float32):
        mid = max(1, out_channels // 2)
        self.conv1 = Conv2d(3, mid, 3, stride=2, padding=1, bias=True, rng=rng, dtype=dtype)
        self.norm1 = LayerNorm(mid, dtype=dtype)
        self.conv2 = Conv2d(mid, out_channels, 3, stride=2, padding=1, bias=True, rng=rng, dtype=dtype)
        self.norm2 = LayerNorm(out_channels, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        y = T.silu(channel_norm(self.norm1, self.conv1(x)))
        return channel_norm(self.norm2, self.conv2(y))


def stem(image: Tensor, module: Stem) -> Tensor:
    """Functional alias; checks the divisibility precondition."""
    _check_input(image)
    return module(image)


def _check_input(image: Tensor) -> None:
    if image.ndim != 4 or image.shape[1] != 3:
        raise ValueError(f"expected (B, 3, H, W) image, got {image.shape}")
    _, _, h, w = image.shape
    if h % 32 or w % 32:
        raise ValueError(f"input extents must be divisible by 32, got {h}x{w}")


class ResBlock(Module):
    def __init__(self, channels: int, *, rng, dtype=np.float32):
        self.conv1 = Conv2d(channels, channels, 3, padding=1, bias=True, rng=rng, dtype=dtype)
        self.norm1 = LayerNorm(channels, dtype=dtype)
        self.conv2 = Conv2d(channels, channels, 3, padding=1, bias=True, rng=rng, dtype=dtype)
        self.norm2 = LayerNorm(channels, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        y = T.silu(channel_norm(self.norm1, self.conv1(x)))
        y = channel_norm(self.norm2, self.conv2(y))
        return x + y


class ScanBlock(Module):
    """Pre-norm residual wrapper around a quadri-directional scan layer."""

    def __init__(self, channels: int, d_state: int, *, rng, dtype=np.float32):
        self.norm = LayerNorm(channels, dtype=dtype)
        self.mixer = SS2D(channels, d_state=d_state, rng=rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.mixer(channel_norm(self.norm, x))


class Encoder(Module):
    """Stem plus four stages of blocks with stride-2 transitions."""

    def __init__(self, channels=(96, 192, 384, 768), depths=(2, 2, 4, 2), kind: str = "conv",
                 d_state: int = 16, *, rng, dtype=np.float32):
        if kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {kind!r}")
        self.kind = kind
        self.channels = tuple(channels)
        self.depths = tuple(depths)
        self.stem = Stem(channels[0], rng=rng, dtype=dtype)
        self.stages = []
        self.transitions = []
        for level, (ch, depth) in enumerate(zip(channels, depths)):
            if kind == "conv":
                blocks = [ResBlock(ch, rng=rng, dtype=dtype) for _ in range(depth)]
            else:
                blocks = [ScanBlock(ch, d_state, rng=rng, dtype=dtype) for _ in range(depth)]
            self.stages.append(blocks)
            if level < 3:
                self.transitions.append(
                    Conv2d(ch, channels[level + 1], 3, stride=2, padding=1, bias=True,
                           rng=rng, dtype=dtype)
                )

    def __call__(self, image: Tensor) -> FeaturePyramid:
        _check_input(image)
        x = self.stem(image)
        outs = []
        for level, blocks in enumerate(self.stages):
            for block in blocks:
                x = block(x)
            outs.append(x)
            if level < 3:
                x = self.transitions[level](x)
        return FeaturePyramid(*outs)


def encoder_forward(image: Tensor, encoder: Encoder) -> FeaturePyramid:
    """Functional alias for running an encoder."""
    return encoder(image)
