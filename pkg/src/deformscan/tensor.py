"""Minimal dense tensor with reverse-mode automatic differentiation.

Values are numpy arrays in float32 (training) or float64 (gradient
checking). Every differentiable operation records its parents and a
backward closure on a dynamic tape; ``backward`` replays the tape in
reverse topological order. Broadcasting is limited to numpy's size-1
expansion, and gradients of broadcast operands are reduced back to the
operand shape.

Canonical image layout is batch x channel x height x width.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

Array = np.ndarray

_FLOAT_DTYPES = (np.float32, np.float64)


def _as_array(data, dtype=None) -> Array:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return arr


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Reduce ``grad`` back to ``shape`` after size-1 broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A dense array plus an optional gradient and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data: Array = _as_array(data, dtype)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], None] | None = None
        self.op = "leaf"

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def from_op(data: Array, parents: Sequence["Tensor"], backward: Callable[[Array], None], op: str) -> "Tensor":
        """Wrap the result of a custom forward op as a tape node.

        ``backward`` receives the output gradient and must accumulate into
        the parents' ``.grad`` buffers (use :meth:`accumulate`).
        """
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out.op = op
        return out

    @staticmethod
    def zeros(shape, dtype=np.float32, requires_grad=False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, dtype=np.float32, requires_grad=False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)

    def accumulate(self, grad: Array) -> None:
        """Add ``grad`` into this tensor's gradient buffer (fan-out sums)."""
        if not self.requires_grad:
            return
        if self.grad is None:
            # copy: a backward closure may hand the same array to two parents
            self.grad = np.asarray(grad).astype(self.data.dtype)
        else:
            self.grad += grad

    # -- basic introspection --------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, op={self.op})"

    # -- arithmetic -----------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        out_data = self.data + other.data

        def backward(g: Array) -> None:
            self.accumulate(_unbroadcast(g, self.shape))
            other.accumulate(_unbroadcast(g, other.shape))

        return Tensor.from_op(out_data, (self, other), backward, "add")

    __radd__ = __add__

    def __mul__(self, other):
        other = self._coerce(other)
        out_data = self.data * other.data

        def backward(g: Array) -> None:
            self.accumulate(_unbroadcast(g * other.data, self.shape))
            other.accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor.from_op(out_data, (self, other), backward, "mul")

    __rmul__ = __mul__

    def __neg__(self):
        def backward(g: Array) -> None:
            self.accumulate(-g)

        return Tensor.from_op(-self.data, (self,), backward, "neg")

    def __sub__(self, other):
        other = self._coerce(other)
        out_data = self.data - other.data

        def backward(g: Array) -> None:
            self.accumulate(_unbroadcast(g, self.shape))
            other.accumulate(_unbroadcast(-g, other.shape))

        return Tensor.from_op(out_data, (self, other), backward, "sub")

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __truediv__(self, other):
        other = self._coerce(other)
        out_data = self.data / other.data

        def backward(g: Array) -> None:
            self.accumulate(_unbroadcast(g / other.data, self.shape))
            other.accumulate(_unbroadcast(-g * out_data / other.data, other.shape))

        return Tensor.from_op(out_data, (self, other), backward, "div")

    def pow(self, exponent: float):
        out_data = self.data ** exponent

        def backward(g: Array) -> None:
            self.accumulate(g * exponent * self.data ** (exponent - 1))

        return Tensor.from_op(out_data, (self,), backward, "pow")

    __pow__ = pow

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old_shape = self.shape
        out_data = self.data.reshape(shape)

        def backward(g: Array) -> None:
            self.accumulate(g.reshape(old_shape))

        return Tensor.from_op(out_data, (self,), backward, "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)

        def backward(g: Array) -> None:
            self.accumulate(g.transpose(inv))

        return Tensor.from_op(self.data.transpose(axes), (self,), backward, "transpose")

    def __getitem__(self, idx):
        out_data = self.data[idx]
        shape = self.shape
        parts = idx if isinstance(idx, tuple) else (idx,)
        basic = all(isinstance(p, (int, slice, type(None), type(Ellipsis))) for p in parts)

        def backward(g: Array) -> None:
            if not self.requires_grad:
                return
            buf = np.zeros(shape, dtype=g.dtype)
            if basic:
                buf[idx] += g
            else:
                np.add.at(buf, idx, g)
            self.accumulate(buf)

        return Tensor.from_op(np.ascontiguousarray(out_data), (self,), backward, "slice")

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.shape

        def backward(g: Array) -> None:
            if axis is not None and not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                g = np.expand_dims(g, tuple(a % len(shape) for a in axes))
            self.accumulate(np.broadcast_to(g, shape).copy())

        return Tensor.from_op(out_data, (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- backprop entry point ---------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar, filling ``.grad`` on the graph."""
        if self.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        order = Graph.trace(self).nodes
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


class Graph:
    """Topologically ordered view of the tape reachable from a root."""

    __slots__ = ("nodes",)

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @staticmethod
    def trace(root: Tensor) -> "Graph":
        """Iterative post-order DFS; parents always precede consumers."""
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return Graph(order)

    def __len__(self) -> int:
        return len(self.nodes)


# -- elementwise nonlinearities ------------------------------------------------


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def backward(g: Array) -> None:
        x.accumulate(g * out_data)

    return Tensor.from_op(out_data, (x,), backward, "exp")


def log(x: Tensor) -> Tensor:
    def backward(g: Array) -> None:
        x.accumulate(g / x.data)

    return Tensor.from_op(np.log(x.data), (x,), backward, "log")


def sigmoid(x: Tensor) -> Tensor:
    out_data = _sigmoid_arr(x.data)

    def backward(g: Array) -> None:
        x.accumulate(g * out_data * (1.0 - out_data))

    return Tensor.from_op(out_data, (x,), backward, "sigmoid")


def silu(x: Tensor) -> Tensor:
    s = _sigmoid_arr(x.data)
    out_data = x.data * s

    def backward(g: Array) -> None:
        x.accumulate(g * (s + x.data * s * (1.0 - s)))

    return Tensor.from_op(out_data, (x,), backward, "silu")


def softplus(x: Tensor) -> Tensor:
    out_data = _softplus_arr(x.data)

    def backward(g: Array) -> None:
        x.accumulate(g * _sigmoid_arr(x.data))

    return Tensor.from_op(out_data, (x,), backward, "softplus")


def _sigmoid_arr(x: Array) -> Array:
    return expit(x)


def _softplus_arr(x: Array) -> Array:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


ELEMENTWISE: dict[str, Callable[..., Tensor]] = {
    "add": lambda a, b: a + b,
    "mul": lambda a, b: a * b,
    "silu": silu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "exp": exp,
}


def elementwise(kind: str, *args: Tensor) -> Tensor:
    """Dispatch a pointwise op by name; shapes must broadcast by size-1 expansion."""
    if kind not in ELEMENTWISE:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    if kind in ("add", "mul"):
        a, b = args
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError as err:
            raise ValueError(f"incompatible shapes {a.shape} and {b.shape}") from err
    return ELEMENTWISE[kind](*args)


# -- linear algebra -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for stacks of matrices; ``b`` is at most 2-D here."""
    out_data = a.data @ b.data

    def backward(g: Array) -> None:
        a.accumulate(_unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape))
        b.accumulate(_unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape))

    return Tensor.from_op(out_data, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``y = x @ weight.T + bias``.

    ``weight`` is laid out (out_features, in_features).
    """
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input dim {x.shape[-1]} != weight in dim {weight.shape[1]}")
    out_data = x.data @ weight.data.T
    if bias is not None:
        out_data = out_data + bias.data

    parents = [x, weight] if bias is None else [x, weight, bias]

    def backward(g: Array) -> None:
        x.accumulate(g @ weight.data)
        gw = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
        weight.accumulate(gw)
        if bias is not None:
            bias.accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return Tensor.from_op(out_data, parents, backward, "linear")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g: Array) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t.accumulate(g[tuple(idx)])

    return Tensor.from_op(out_data, tuple(tensors), backward, "concat")


def take(x: Tensor, indices: Array, axis: int, inverse: Array | None = None) -> Tensor:
    """Index one axis with an integer vector (used for scan-path permutes).

    When ``indices`` is a permutation, pass its ``inverse`` so the backward
    pass is a plain gather instead of a scatter-add.
    """
    out_data = np.take(x.data, indices, axis=axis)
    shape = x.shape

    def backward(g: Array) -> None:
        if inverse is not None:
            x.accumulate(np.take(g, inverse, axis=axis))
            return
        buf = np.zeros(shape, dtype=g.dtype)
        idx = [slice(None)] * len(shape)
        idx[axis] = indices
        np.add.at(buf, tuple(idx), g)
        x.accumulate(buf)

    return Tensor.from_op(out_data, (x,), backward, "take")


# -- convolution ----------------------------------------------------------------


def _conv_out_size(n: int, k: int, s: int, p: int, d: int) -> int:
    return (n + 2 * p - d * (k - 1) - 1) // s + 1


def _im2col(xp: Array, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int) -> Array:
    """(B, C, Hp, Wp) -> (B, C, kh, kw, ho, wo) via strided slicing."""
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            hi = i * dilation
            wj = j * dilation
            cols[:, :, i, j] = xp[:, :, hi : hi + ho * stride : stride, wj : wj + wo * stride : stride]
    return cols


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation.

    ``x`` is (B, C_in, H, W); ``weight`` is (C_out, C_in/groups, kh, kw).
    """
    if stride < 1 or dilation < 1:
        raise ValueError("stride and dilation must be positive")
    b, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if cin % groups or cout % groups:
        raise ValueError("channels must be divisible by groups")
    if cin_g != cin // groups:
        raise ValueError(f"weight expects {cin_g * groups} input channels, got {cin}")
    ho = _conv_out_size(h, kh, stride, padding, dilation)
    wo = _conv_out_size(w, kw, stride, padding, dilation)
    if ho <= 0 or wo <= 0:
        raise ValueError("empty convolution output")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, dilation, ho, wo)
    # (B, G, cin_g*kh*kw, ho*wo) x (G, cout_g, cin_g*kh*kw), via BLAS matmul
    cols_g = cols.reshape(b, groups, cin_g * kh * kw, ho * wo)
    w_g = weight.data.reshape(groups, cout // groups, cin_g * kh * kw)
    out = np.matmul(w_g[None], cols_g)  # (B, G, cout_g, ho*wo)
    out_data = out.reshape(b, cout, ho, wo)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None]

    parents = [x, weight] if bias is None else [x, weight, bias]

    def backward(g: Array) -> None:
        g4 = g.reshape(b, groups, cout // groups, ho * wo)
        gw = np.matmul(g4, cols_g.swapaxes(-1, -2)).sum(axis=0)
        weight.accumulate(gw.reshape(weight.shape))
        if bias is not None:
            bias.accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = np.matmul(w_g.swapaxes(-1, -2)[None], g4)
            gcols = gcols.reshape(b, cin, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    hi = i * dilation
                    wj = j * dilation
                    gxp[:, :, hi : hi + ho * stride : stride, wj : wj + wo * stride : stride] += gcols[:, :, i, j]
            x.accumulate(gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp)

    return Tensor.from_op(out_data, parents, backward, "conv2d")


def upsample2d(x: Tensor, scale: int, kind: str = "bilinear") -> Tensor:
    """Separable bilinear or bicubic upsampling by an integer factor.

    Uses half-pixel source alignment; realized as fixed per-axis weight
    matrices so the backward pass is their transpose.
    """
    b, c, h, w = x.shape
    wh = _interp_matrix(h, scale, kind, x.data.dtype)
    ww = _interp_matrix(w, scale, kind, x.data.dtype)
    out_data = np.einsum("iH,bcHW,jW->bcij", wh, x.data, ww, optimize=True)

    def backward(g: Array) -> None:
        x.accumulate(np.einsum("iH,bcij,jW->bcHW", wh, g, ww, optimize=True))

    return Tensor.from_op(out_data, (x,), backward, f"upsample_{kind}")


def _interp_matrix(n: int, scale: int, kind: str, dtype) -> Array:
    """(n*scale, n) interpolation weights for one axis."""
    m = n * scale
    src = (np.arange(m) + 0.5) / scale - 0.5
    mat = np.zeros((m, n), dtype=np.float64)
    if kind == "bilinear":
        lo = np.floor(src).astype(int)
        frac = src - lo
        for i in range(m):
            for tap, wgt in ((lo[i], 1.0 - frac[i]), (lo[i] + 1, frac[i])):
                mat[i, np.clip(tap, 0, n - 1)] += wgt
    elif kind == "bicubic":
        lo = np.floor(src).astype(int)
        frac = src - lo
        for i in range(m):
            for k in range(-1, 3):
                wgt = _cubic_kernel(k - frac[i])
                mat[i, np.clip(lo[i] + k, 0, n - 1)] += wgt
    else:
        raise ValueError(f"unknown interpolation kind {kind!r}")
    return mat.astype(dtype)


def _cubic_kernel(t: float, a: float = -0.75) -> float:
    t = abs(t)
    if t <= 1.0:
        return (a + 2) * t**3 - (a + 3) * t**2 + 1
    if t < 2.0:
        return a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a
    return 0.0


# -- gradient checking -----------------------------------------------------------


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords_per_input: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients of a scalar-valued closure to central differences.

    Inputs must be float64 leaves with ``requires_grad=True``. Returns the
    maximum over checked coordinates of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        t.grad = None
    loss = fn(*inputs)
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError("non-finite loss in grad_check")
    loss.backward()
    worst = 0.0
    if rng is None:
        rng = np.random.default_rng(0)
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords_per_input is not None and flat.size > max_coords_per_input:
            coords = rng.choice(flat.size, size=max_coords_per_input, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            hi = fn(*inputs).item()
            flat[c] = orig - eps
            lo = fn(*inputs).item()
            flat[c] = orig
            numeric = (hi - lo) / (2 * eps)
            a = analytic.reshape(-1)[c]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst


# -- binary tensor files -----------------------------------------------------------

DMTS_MAGIC = b"DMTS"
DMTS_VERSION = 1
_DTYPE_CODES = {1: np.float32, 2: np.float64}
_DTYPE_TO_CODE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


def write_tensor(f, arr: Array) -> None:
    """Serialize one array: magic, version, dtype code, rank, dims, payload (LE)."""
    arr = np.ascontiguousarray(arr)
    code = _DTYPE_TO_CODE.get(arr.dtype)
    if code is None:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    f.write(DMTS_MAGIC)
    f.write(struct.pack("<II", DMTS_VERSION, code))
    f.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<Q", d))
    f.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def read_tensor(f) -> Array:
    magic = f.read(4)
    if magic != DMTS_MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    version, code = struct.unpack("<II", f.read(8))
    if version != DMTS_VERSION:
        raise ValueError(f"unsupported format version {version}")
    if code not in _DTYPE_CODES:
        raise ValueError(f"unknown dtype code {code}")
    (rank,) = struct.unpack("<I", f.read(4))
    dims = struct.unpack(f"<{rank}Q", f.read(8 * rank))
    dtype = np.dtype(_DTYPE_CODES[code]).newbyteorder("<")
    count = int(np.prod(dims)) if rank else 1
    arr = np.frombuffer(f.read(count * dtype.itemsize), dtype=dtype).reshape(dims)
    return arr.astype(_DTYPE_CODES[code])


def save_tensor(path, arr: Array) -> None:
    with open(path, "wb") as f:
        write_tensor(f, arr)


def load_tensor(path) -> Array:
    with open(path, "rb") as f:
        return read_tensor(f)


def save_archive(path, named: Iterable[tuple[str, Array]]) -> None:
    """Named-tensor archive: count, then (name length, name bytes, tensor record)."""
    entries = list(named)
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            write_tensor(f, arr)


def load_archive(path) -> dict[str, Array]:
    out: dict[str, Array] = {}
    with open(path, "rb") as f:
        (count,) = struct.unpack("<I", f.read(4))
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            out[name] = read_tensor(f)
    return out
