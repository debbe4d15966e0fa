"""Modulated deformable 3x3 convolution with bilinear fractional sampling.

Each output location p sums over the K = 9 taps of the dilation-1 grid:

    out(p) = sum_k w_k * m_k * in(p + p_k + dp_k)

where the per-pixel offsets dp_k and modulation m_k are predicted from the
input by a zero-initialized 3x3 conv, so a fresh block behaves like an
ordinary convolution scaled by m = 0.5. Fractional positions are read with
bilinear interpolation and zero padding outside the feature map.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Conv2d, Module, trunc_normal
from .tensor import Tensor

Array = np.ndarray

KERNEL_TAPS = 9
# tap k = 3*(dy+1) + (dx+1), matching the (kh, kw) layout of conv weights
BASE_OFFSETS = np.array([(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)], dtype=np.float64)


def bilinear_sample(feature: Array, x: float, y: float) -> Array:
    """Interpolate a (C, H, W) map at fractional column x, row y; zero outside."""
    c, h, w = feature.shape
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    fx, fy = x - x0, y - y0
    out = np.zeros(c, dtype=feature.dtype)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            if 0 <= yy < h and 0 <= xx < w and wy * wx != 0.0:
                out += wy * wx * feature[:, yy, xx]
    return out


def _gather_taps(x: Tensor, iy: Array, ix: Array) -> Tensor:
    """Read x[b, :, iy, ix] for per-tap integer index maps.

    ``iy``/``ix`` are (B, K, H, W) integer arrays; entries outside the map
    contribute zeros. Returns (B, K, H, W, C).
    """
    b, c, h, w = x.shape
    valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
    iyc = np.clip(iy, 0, h - 1)
    ixc = np.clip(ix, 0, w - 1)
    bi = np.arange(b)[:, None, None, None]
    xt = x.data.transpose(0, 2, 3, 1)
    out = xt[bi, iyc, ixc] * valid[..., None]

    def backward(g: Array) -> None:
        if not x.requires_grad:
            return
        # scatter-add via per-channel bincount on flattened pixel indices
        flat_idx = ((bi * h + iyc) * w + ixc).reshape(-1)
        gv = (g * valid[..., None]).reshape(-1, c)
        buf = np.empty((c, b * h * w), dtype=g.dtype)
        for ch in range(c):
            buf[ch] = np.bincount(flat_idx, weights=gv[:, ch], minlength=b * h * w)
        x.accumulate(buf.reshape(c, b, h, w).transpose(1, 0, 2, 3))

    return Tensor.from_op(out, (x,), backward, "gather_taps")


def dcn_apply(x: Tensor, weight: Tensor, bias: Tensor | None, offsets: Tensor,
              modulation: Tensor) -> Tensor:
    """Deformable convolution given predicted offsets and modulation.

    ``offsets`` is (B, 2K, H, W) with (dy, dx) interleaved per tap;
    ``modulation`` is (B, K, H, W). Stride 1, padding 1, dilation 1.
    """
    b, c, h, w = x.shape
    cout = weight.shape[0]
    if offsets.shape[1] != 2 * KERNEL_TAPS or modulation.shape[1] != KERNEL_TAPS:
        raise ValueError(
            f"expected {2 * KERNEL_TAPS} offset and {KERNEL_TAPS} modulation channels, "
            f"got {offsets.shape[1]} and {modulation.shape[1]}"
        )
    if weight.shape[1] != c:
        raise ValueError(f"weight expects {weight.shape[1]} input channels, got {c}")

    grid_y, grid_x = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    base_y = grid_y[None, None] + BASE_OFFSETS[:, 0][None, :, None, None]
    base_x = grid_x[None, None] + BASE_OFFSETS[:, 1][None, :, None, None]
    pos_y = offsets[:, 0::2] + Tensor(base_y.astype(x.data.dtype))
    pos_x = offsets[:, 1::2] + Tensor(base_x.astype(x.data.dtype))

    y0 = np.floor(pos_y.data).astype(np.int64)
    x0 = np.floor(pos_x.data).astype(np.int64)
    fy = (pos_y - Tensor(y0.astype(x.data.dtype))).reshape(b, KERNEL_TAPS, h, w, 1)
    fx = (pos_x - Tensor(x0.astype(x.data.dtype))).reshape(b, KERNEL_TAPS, h, w, 1)
    one = Tensor(np.ones((), dtype=x.data.dtype))

    g00 = _gather_taps(x, y0, x0)
    g01 = _gather_taps(x, y0, x0 + 1)
    g10 = _gather_taps(x, y0 + 1, x0)
    g11 = _gather_taps(x, y0 + 1, x0 + 1)
    sampled = (
        (one - fy) * (one - fx) * g00
        + (one - fy) * fx * g01
        + fy * (one - fx) * g10
        + fy * fx * g11
    )
    sampled = sampled * modulation.reshape(b, KERNEL_TAPS, h, w, 1)

    flat = sampled.transpose(0, 2, 3, 1, 4).reshape(b * h * w, KERNEL_TAPS * c)
    wmat = weight.reshape(cout, c, KERNEL_TAPS).transpose(2, 1, 0).reshape(KERNEL_TAPS * c, cout)
    out = T.matmul(flat, wmat).reshape(b, h, w, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.reshape(1, cout, 1, 1)
    return out


class DeformConv2d(Module):
    """3x3 modulated deformable convolution with a learned offset predictor."""

    def __init__(self, in_ch: int, out_ch: int, sigmoid_modulation: bool = True, *,
                 rng: np.random.Generator, dtype=np.float32):
        self.in_ch, self.out_ch = in_ch, out_ch
        self.sigmoid_modulation = sigmoid_modulation
        self.predictor = Conv2d(in_ch, 3 * KERNEL_TAPS, 3, padding=1, bias=True, rng=rng, dtype=dtype)
        self.predictor.weight.data[:] = 0.0  # start as a plain conv with m = 0.5
        self.weight = Tensor(trunc_normal(rng, (out_ch, in_ch, 3, 3), dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    def predict_offsets(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """(offsets (B, 2K, H, W), modulation (B, K, H, W)) from the input."""
        raw = self.predictor(x)
        offsets = raw[:, : 2 * KERNEL_TAPS]
        mod = raw[:, 2 * KERNEL_TAPS :]
        if self.sigmoid_modulation:
            mod = T.sigmoid(mod)
        return offsets, mod

    def __call__(self, x: Tensor) -> Tensor:
        offsets, modulation = self.predict_offsets(x)
        return dcn_apply(x, self.weight, self.bias, offsets, modulation)


def dcn_forward(x: Tensor, block: DeformConv2d) -> Tensor:
    """Functional alias for applying a :class:`DeformConv2d` block."""
    return block(x)


def perturb_predictors(module: Module, rng: np.random.Generator, scale: float = 0.05) -> None:
    """Move every offset predictor in a module tree off its zero init.

    Fresh predictors emit exactly-integer sampling positions, which sit on
    the kinks of the piecewise-linear interpolant; finite-difference checks
    need the offsets in general position.
    """
    seen: set[int] = set()
    stack: list[Module] = [module]
    while stack:
        m = stack.pop()
        if id(m) in seen:
            continue
        seen.add(id(m))
        if isinstance(m, DeformConv2d):
            m.predictor.weight.data += rng.normal(scale=scale, size=m.predictor.weight.shape)
            m.predictor.bias.data += rng.normal(scale=scale * 4, size=m.predictor.bias.shape)
        for val in vars(m).values():
            if isinstance(val, Module):
                stack.append(val)
            elif isinstance(val, (list, tuple)):
                stack.extend(v for v in val if isinstance(v, Module))
