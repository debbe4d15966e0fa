"""Selective-scan state-space recurrence and the 2-D multi-direction scan block.

The recurrence over a length-L sequence is

    h_t = A_bar_t * h_{t-1} + B_bar_t * x_t,    y_t = C_t . h_t + D_skip * x_t

with A_bar = exp(delta * A) (zero-order hold, A = -exp(A_log) diagonal) and
B_bar = delta * B. Two evaluation routes are provided: a strictly sequential
reference built from tape primitives (the correctness oracle) and a fused,
work-efficient chunked prefix combination with a hand-written backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Linear, LayerNorm, Conv2d, Module, channel_norm, softplus_inverse
from .tensor import Tensor

Array = np.ndarray


# -- 2D scan paths ---------------------------------------------------------------


@dataclass
class ScanPath:
    """A bijective traversal order of an H x W grid's flat indices."""

    direction: int
    perm: Array
    inv_perm: Array = field(init=False)

    def __post_init__(self):
        self.inv_perm = np.argsort(self.perm)


def scan_paths(h: int, w: int, direction: int) -> ScanPath:
    """Traversal orders: 1 row-major, 2 its reverse, 3 column-major, 4 its reverse."""
    if h < 1 or w < 1:
        raise ValueError("grid extents must be positive")
    if direction == 1:
        perm = np.arange(h * w)
    elif direction == 2:
        perm = np.arange(h * w)[::-1].copy()
    elif direction == 3:
        perm = np.arange(h * w).reshape(h, w).T.reshape(-1).copy()
    elif direction == 4:
        perm = np.arange(h * w).reshape(h, w).T.reshape(-1)[::-1].copy()
    else:
        raise ValueError(f"direction must be in 1..4, got {direction}")
    return ScanPath(direction, perm)


# -- parameters of one scan layer --------------------------------------------------


class ScanParams(Module):
    """State-space parameters plus the per-token projections for one direction.

    The diagonal state matrix is ``A = -exp(a_log)`` (strictly negative, so
    ``A_bar = exp(delta * A)`` stays inside (0, 1) for delta > 0). The step
    size is ``softplus(dt_up(dt_down(x)) + bias)`` with a low-rank inner
    projection. B and C are per-token linear projections of the input.
    """

    def __init__(self, d_inner: int, d_state: int = 16, dt_rank: int | None = None, *,
                 rng: np.random.Generator, dtype=np.float32):
        self.d_inner = d_inner
        self.d_state = d_state
        self.dt_rank = dt_rank if dt_rank is not None else max(1, math.ceil(d_inner / 16))
        self.b_proj = Linear(d_inner, d_state, bias=False, rng=rng, dtype=dtype)
        self.c_proj = Linear(d_inner, d_state, bias=False, rng=rng, dtype=dtype)
        self.dt_down = Linear(d_inner, self.dt_rank, bias=False, rng=rng, dtype=dtype)
        lim = self.dt_rank**-0.5
        self.dt_up = Linear(self.dt_rank, d_inner, bias=True, rng=rng, dtype=dtype)
        self.dt_up.weight.data = rng.uniform(-lim, lim, size=(d_inner, self.dt_rank)).astype(dtype)
        dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), size=d_inner)).clip(min=1e-4)
        self.dt_up.bias.data = softplus_inverse(dt).astype(dtype)
        a = np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_inner, 1))
        self.a_log = Tensor(np.log(a).astype(dtype), requires_grad=True)
        self.d_skip = Tensor(np.ones(d_inner, dtype=dtype), requires_grad=True)

    def project(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Per-token (delta, B, C) from a (batch, L, d_inner) sequence."""
        delta = T.softplus(self.dt_up(self.dt_down(x)))
        return delta, self.b_proj(x), self.c_proj(x)


# -- discretization ----------------------------------------------------------------


def discretize(a_log: Tensor, delta: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Zero-order hold on A and first-order simplification on B.

    ``a_log`` is (d_inner, d_state); ``delta`` (..., d_inner); ``b``
    (..., d_state). Returns A_bar and B_bar with shape (..., d_inner, d_state).
    Delta must be non-negative (the zero limit freezes the state).
    """
    if np.any(delta.data < 0):
        raise ValueError("delta must be non-negative")
    a = -T.exp(a_log)
    a_bar = T.exp(delta.reshape(*delta.shape, 1) * a)
    b_bar = delta.reshape(*delta.shape, 1) * b.reshape(*b.shape[:-1], 1, b.shape[-1])
    return a_bar, b_bar


# -- reference scan (sequential oracle) ----------------------------------------------


def scan_ref_raw(x: Tensor, delta: Tensor, a_log: Tensor, b: Tensor, c: Tensor,
                 d_skip: Tensor) -> Tensor:
    """Strictly sequential recurrence over explicit per-token quantities.

    Shapes: x, delta (B, L, D); b, c (B, L, N); a_log (D, N); d_skip (D,).
    """
    bsz, length, d = x.shape
    a_bar, b_bar = discretize(a_log, delta, b)
    bx = b_bar * x.reshape(bsz, length, d, 1)
    h = Tensor(np.zeros((bsz, d, a_log.shape[1]), dtype=x.data.dtype))
    ys = []
    for t in range(length):
        h = a_bar[:, t] * h + bx[:, t]
        y_t = (h * c[:, t].reshape(bsz, 1, -1)).sum(axis=-1)
        ys.append(y_t.reshape(bsz, 1, d))
    y = T.concat(ys, axis=1)
    return y + d_skip * x


def selective_scan_ref(x: Tensor, params: ScanParams) -> Tensor:
    """Project (delta, B, C) from the sequence, then run the sequential oracle."""
    delta, b, c = params.project(x)
    return scan_ref_raw(x, delta, params.a_log, b, c, params.d_skip)


# -- fast scan (chunked associative prefix combination) -------------------------------

_CHUNK = 64


def _combine_inclusive(a: Array, b: Array) -> Array:
    """Inclusive scan of h_t = a_t h_{t-1} + b_t over axis 1, h_{-1} = 0.

    Pairs (a, b) form a monoid under composition. Each chunk is combined by
    log-depth doubling in float64 and the carries are threaded sequentially,
    so total work is linear in L with a cache-resident working set. Returns
    the input dtype; reassociation happens only in the float64 interior.
    """
    bsz, length = a.shape[:2]
    out = np.empty(a.shape, dtype=a.dtype)
    carry = np.zeros((bsz,) + a.shape[2:], dtype=np.float64)
    for lo in range(0, length, _CHUNK):
        hi = min(lo + _CHUNK, length)
        ak = a[:, lo:hi].astype(np.float64)
        bk = b[:, lo:hi].astype(np.float64)
        d = 1
        while d < hi - lo:
            bk[:, d:] = ak[:, d:] * bk[:, :-d] + bk[:, d:]
            ak[:, d:] = ak[:, d:] * ak[:, :-d]
            d *= 2
        np.multiply(ak, carry[:, None], out=ak)  # reuse as the h buffer
        ak += bk
        out[:, lo:hi] = ak
        carry = ak[:, -1]
    return out


def scan_fast_raw(x: Tensor, delta: Tensor, a_log: Tensor, b: Tensor, c: Tensor,
                  d_skip: Tensor) -> Tensor:
    """Fused scan with the same contract as :func:`scan_ref_raw`."""
    if np.any(delta.data < 0):
        raise ValueError("delta must be non-negative")
    xd, dd, ald, bd, cd, skd = x.data, delta.data, a_log.data, b.data, c.data, d_skip.data
    bsz, length, d = xd.shape
    n = ald.shape[1]
    a_neg = -np.exp(ald)
    # per-step quantities in the input dtype, matching the reference element-wise;
    # the reassociated combination itself runs in a float64 interior
    a_bar = np.empty((bsz, length, d, n), dtype=xd.dtype)
    np.multiply(dd[..., None], a_neg, out=a_bar)
    np.exp(a_bar, out=a_bar)
    bx = np.empty_like(a_bar)
    np.multiply(dd[..., None], bd[:, :, None, :], out=bx)
    bx *= xd[..., None]
    h = _combine_inclusive(a_bar, bx)
    y = (h * cd[:, :, None, :]).sum(axis=-1) + skd * xd

    parents = (x, delta, a_log, b, c, d_skip)

    def backward(g: Array) -> None:
        # direct paths
        d_skip.accumulate((g * xd).sum(axis=(0, 1)))
        gx = g * skd
        c.accumulate(np.einsum("bld,bldn->bln", g, h, optimize=False))
        # adjoint state lam_t = q_t + a_bar_{t+1} * lam_{t+1}, run as a reversed scan
        q = g[..., None] * cd[:, :, None, :]
        a_shift = np.concatenate(
            [np.ones((bsz, 1, d, n), dtype=a_bar.dtype), a_bar[:, :0:-1]], axis=1
        )
        lam = _combine_inclusive(a_shift, np.ascontiguousarray(q[:, ::-1]))[:, ::-1]
        h_prev = np.concatenate([np.zeros((bsz, 1, d, n), dtype=h.dtype), h[:, :-1]], axis=1)
        ga_pre = lam * h_prev * a_bar  # gradient through exp folded in
        gb_pair = lam
        gdelta = np.einsum("bldn,dn->bld", ga_pre, a_neg, optimize=False)
        gdx = np.einsum("bldn,bln->bld", gb_pair, bd, optimize=False)
        gdelta += gdx * xd
        gx = gx + gdx * dd
        b.accumulate(np.einsum("bldn,bld->bln", gb_pair, dd * xd, optimize=False))
        ga_log = np.einsum("bldn,bld->dn", ga_pre, dd, optimize=False) * a_neg
        a_log.accumulate(ga_log)
        delta.accumulate(gdelta)
        x.accumulate(gx)

    return Tensor.from_op(y, parents, backward, "selective_scan")


def selective_scan_fast(x: Tensor, params: ScanParams) -> Tensor:
    """Project per-token quantities, then run the fused scan."""
    delta, b, c = params.project(x)
    return scan_fast_raw(x, delta, params.a_log, b, c, params.d_skip)


# -- 2D selective scan block ----------------------------------------------------------


class SS2D(Module):
    """Gated multi-direction selective scan over a feature map.

    Input projection splits into a scan branch and a gate; the scan branch
    passes through a depthwise 3x3 conv and SiLU, is traversed along each
    enabled direction by its own scan layer, and the directional outputs are
    summed, normalized, gated, and projected back to the input width.
    """

    def __init__(self, channels: int, d_state: int = 16, expand: float = 1.0,
                 n_directions: int = 4, dt_rank: int | None = None, scan_impl: str = "fast",
                 *, rng: np.random.Generator, dtype=np.float32):
        if n_directions not in (1, 2, 4):
            raise ValueError(f"direction count must be 1, 2 or 4, got {n_directions}")
        if scan_impl not in ("fast", "ref"):
            raise ValueError(f"unknown scan_impl {scan_impl!r}")
        self.channels = channels
        self.d_inner = max(1, int(round(expand * channels)))
        self.d_state = d_state
        self.n_directions = n_directions
        self.scan_impl = scan_impl
        self.dt_rank = dt_rank if dt_rank is not None else max(1, math.ceil(channels / 16))
        self.in_proj = Linear(channels, 2 * self.d_inner, bias=False, rng=rng, dtype=dtype)
        self.conv = Conv2d(self.d_inner, self.d_inner, 3, padding=1, groups=self.d_inner,
                           bias=True, rng=rng, dtype=dtype)
        self.scan = [
            ScanParams(self.d_inner, d_state, self.dt_rank, rng=rng, dtype=dtype)
            for _ in range(n_directions)
        ]
        self.out_norm = LayerNorm(self.d_inner, dtype=dtype)
        self.out_proj = Linear(self.d_inner, channels, bias=False, rng=rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        bsz, ch, h, w = x.shape
        if ch != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {ch}")
        length = h * w
        xz = self.in_proj(x.transpose(0, 2, 3, 1))  # (B, H, W, 2d)
        xb = xz[:, :, :, : self.d_inner]
        z = xz[:, :, :, self.d_inner :].reshape(bsz, length, self.d_inner)
        xb = T.silu(self.conv(xb.transpose(0, 3, 1, 2)))
        seq = xb.reshape(bsz, self.d_inner, length).transpose(0, 2, 1)  # (B, L, d)
        scan_fn = selective_scan_fast if self.scan_impl == "fast" else selective_scan_ref
        total: Tensor | None = None
        for k, params in enumerate(self.scan):
            path = scan_paths(h, w, k + 1)
            fwd = T.take(seq, path.perm, axis=1, inverse=path.inv_perm)
            out = scan_fn(fwd, params)
            back = T.take(out, path.inv_perm, axis=1, inverse=path.perm)
            total = back if total is None else total + back
        y = self.out_norm(total)
        y = y * T.silu(z)
        y = self.out_proj(y)
        return y.reshape(bsz, h, w, ch).transpose(0, 3, 1, 2)


def ss2d_forward(x: Tensor, block: SS2D) -> Tensor:
    """Functional alias for applying an :class:`SS2D` block."""
    return block(x)
