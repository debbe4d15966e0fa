"""Fusion decoder: per stage, a scanned decoder feature and a deformably
convolved encoder feature are concatenated, mixed by lightweight grouped
3x3 convolutions, upsampled by periodic channel-to-space shuffling, and
linearly projected to the next stage's width. The final stage fuses at full
resolution without shuffling.

Stage pairing follows i + j = 4: (E4, D0), (E3, D1), (E2, D2), (E1, D3)
with D0 aliased to E4.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .deform_conv import DeformConv2d
from .nn import Conv2d, LayerNorm, Linear, Module, channel_norm, linear_channels
from .ssm_scan import SS2D
from .tensor import Tensor

UPSAMPLE_KINDS = ("pixelshuffle", "bilinear", "bicubic")


@dataclass
class DecoderConfig:
    """Widths and switches for the four-stage decoder."""

    channels: tuple[int, int, int, int] = (96, 192, 384, 768)
    num_classes: int = 13
    fusion_depth: int = 2
    fusion_group: int = 8  # channels per group in the fusion convs
    scan_directions: int = 4
    deformable: bool = True
    upsample: str = "pixelshuffle"
    d_state: int = 16
    expand: float = 1.0
    scan_impl: str = "fast"
    project_final: bool = True

    def __post_init__(self):
        if len(self.channels) != 4:
            raise ValueError("decoder expects a 4-stage channel schedule")
        if self.upsample not in UPSAMPLE_KINDS:
            raise ValueError(f"upsample must be one of {UPSAMPLE_KINDS}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")


@dataclass
class DecoderState:
    """Fused features D0..D4; D0 aliases the deepest encoder feature."""

    stages: list = field(default_factory=list)


def pixel_shuffle(x: Tensor) -> Tensor:
    """Periodic rearrangement (B, C, H, W) -> (B, C/4, 2H, 2W), factor fixed at 2.

    out[b, c, 2i+di, 2j+dj] = in[b, 4c + 2di + dj, i, j]; bijective, no values
    created or lost.
    """
    b, c, h, w = x.shape
    if c % 4:
        raise ValueError(f"pixel_shuffle needs channels divisible by 4, got {c}")
    return (
        x.reshape(b, c // 4, 2, 2, h, w)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(b, c // 4, 2 * h, 2 * w)
    )


def pixel_unshuffle(x: Tensor) -> Tensor:
    """Exact inverse of :func:`pixel_shuffle`."""
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError("pixel_unshuffle needs even spatial extents")
    return (
        x.reshape(b, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(b, 4 * c, h // 2, w // 2)
    )


def _interleave(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two equal-width maps with alternating channels.

    Keeps both branches represented inside every group of the grouped
    fusion convs that follow.
    """
    bs, c, h, w = a.shape
    stacked = T.concat([a.reshape(bs, 1, c, h, w), b.reshape(bs, 1, c, h, w)], axis=1)
    return stacked.transpose(0, 2, 1, 3, 4).reshape(bs, 2 * c, h, w)


class FusionConv(Module):
    """Grouped 3x3 conv + channel LayerNorm + SiLU at constant width."""

    def __init__(self, channels: int, group_size: int, *, rng, dtype=np.float32):
        groups = max(1, channels // group_size)
        while channels % groups:
            groups -= 1
        self.conv = Conv2d(channels, channels, 3, padding=1, groups=groups, bias=True,
                           rng=rng, dtype=dtype)
        self.norm = LayerNorm(channels, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.silu(channel_norm(self.norm, self.conv(x)))


class DMFBlock(Module):
    """One fusion stage: scan branch on D_j, deformable branch on E_i."""

    def __init__(self, channels: int, out_channels: int, cfg: DecoderConfig, last: bool,
                 *, rng, dtype=np.float32):
        self.channels = channels
        self.out_channels = out_channels
        self.last = last
        self.cfg = cfg
        self.scan_block = SS2D(channels, d_state=cfg.d_state, expand=cfg.expand,
                               n_directions=cfg.scan_directions, scan_impl=cfg.scan_impl,
                               rng=rng, dtype=dtype)
        if cfg.deformable:
            self.spatial_block = DeformConv2d(channels, channels, rng=rng, dtype=dtype)
        else:
            self.spatial_block = Conv2d(channels, channels, 3, padding=1, bias=True,
                                        rng=rng, dtype=dtype)
        self.fusion = [FusionConv(2 * channels, cfg.fusion_group, rng=rng, dtype=dtype)
                       for _ in range(cfg.fusion_depth)]
        if last:
            self.project = Linear(2 * channels, out_channels, rng=rng, dtype=dtype) \
                if cfg.project_final else None
            self.halve = None
        elif cfg.upsample == "pixelshuffle":
            self.project = Linear(channels // 2, out_channels, rng=rng, dtype=dtype)
            self.halve = None
        else:
            self.halve = Conv2d(2 * channels, channels, 1, bias=True, rng=rng, dtype=dtype)
            self.project = Linear(channels, out_channels, rng=rng, dtype=dtype)

    def __call__(self, enc: Tensor, dec: Tensor) -> Tensor:
        if enc.shape != dec.shape:
            raise ValueError(f"stage inputs disagree: {enc.shape} vs {dec.shape}")
        if enc.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {enc.shape[1]}")
        scanned = self.scan_block(dec)
        spatial = self.spatial_block(enc)
        fused = _interleave(scanned, spatial)
        for layer in self.fusion:
            fused = layer(fused)
        if self.last:
            return linear_channels(self.project, fused) if self.project is not None else fused
        if self.cfg.upsample == "pixelshuffle":
            up = pixel_shuffle(fused)
        else:
            up = self.halve(T.upsample2d(fused, 2, self.cfg.upsample))
        return linear_channels(self.project, up)


class Decoder(Module):
    """Four fusion stages walking the pyramid from deepest to shallowest."""

    def __init__(self, cfg: DecoderConfig, *, rng, dtype=np.float32):
        self.cfg = cfg
        cs = cfg.channels
        stage_in = [cs[3], cs[2], cs[1], cs[0]]
        stage_out = [cs[2], cs[1], cs[0], cs[0]]
        self.blocks = [
            DMFBlock(stage_in[s], stage_out[s], cfg, last=(s == 3), rng=rng, dtype=dtype)
            for s in range(4)
        ]

    def __call__(self, pyramid) -> Tensor:
        feats = pyramid.as_tuple() if hasattr(pyramid, "as_tuple") else tuple(pyramid)
        if len(feats) != 4:
            raise ValueError(f"expected a 4-level pyramid, got {len(feats)}")
        e1, e2, e3, e4 = feats
        state = DecoderState(stages=[e4])
        d = e4
        for block, enc in zip(self.blocks, (e4, e3, e2, e1)):
            d = block(enc, d)
            state.stages.append(d)
        self._last_state = state
        return d


class SegHead(Module):
    """1x1 projection, SiLU, 3x3 conv to class logits, then x4 bilinear upsampling."""

    def __init__(self, in_channels: int, num_classes: int, *, rng, dtype=np.float32):
        if num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.proj = Linear(in_channels, in_channels, rng=rng, dtype=dtype)
        self.conv = Conv2d(in_channels, num_classes, 3, padding=1, bias=True, rng=rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        y = T.silu(linear_channels(self.proj, x))
        logits = self.conv(y)
        return T.upsample2d(logits, 4, "bilinear")


def dmf_block_forward(enc: Tensor, dec: Tensor, block: DMFBlock) -> Tensor:
    """Functional alias for one fusion stage."""
    return block(enc, dec)


def decoder_forward(pyramid, decoder: Decoder) -> Tensor:
    """Functional alias for the full decoder."""
    return decoder(pyramid)


def seg_head(features: Tensor, head: SegHead) -> Tensor:
    """Functional alias for the segmentation head."""
    return head(features)
