"""Minimal tape-based reverse-mode autodiff over dense numpy arrays.

Operations executed inside an active :class:`Tape` are recorded when any
input tracks gradients.  Outside a tape nothing is recorded, which doubles
as inference mode.

Shape rules are deliberately narrow:

* ``add``/``sub``: equal shapes, or the second operand matches the trailing
  dimensions of the first (bias broadcast).
* ``mul``: equal shapes.
* ``matmul``: ``[m, k] @ [k, n]`` or ``[m, k] @ [k]``.
* ``conv2d``: NHWC input, weight ``[k, k, in, out]``.
* ``conv_transpose2d``: NHWC input, weight ``[in, k, k, out]``.
* ``max_pool2x2``/``bilinear_upsample2x``: NHWC, spatial axes 1 and 2.
* ``sum``/``mean``/``l2_norm_squared``: full reduction to shape ``[1]``.
* ``concat``/``slice_rows``: along axis 0 only.
"""
from __future__ import annotations

import itertools
import threading
from typing import Callable, Sequence

import numpy as np

from . import kernels

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "UnknownOpError",
    "BatchNormState",
    "set_precision",
    "get_dtype",
    "tensor",
    "constant",
    "backward",
    "forward_primitive",
    "PRIMITIVES",
]

LEAKY_SLOPE = 0.2
BN_MOMENTUM = 0.1
BN_EPS = 1e-5

_dtype = np.float64


def set_precision(bits: int) -> None:
    """Select 32- or 64-bit floats for newly created tensors."""
    global _dtype
    if bits == 32:
        _dtype = np.float32
    elif bits == 64:
        _dtype = np.float64
    else:
        raise ValueError(f"precision must be 32 or 64, got {bits}")


def get_dtype():
    return _dtype


class ShapeError(ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes " + " vs ".join(str(tuple(s)) for s in shapes))


class UnknownOpError(ValueError):
    pass


_ids = itertools.count()


class Tensor:
    """Array value plus optional gradient.

    ``grad`` accumulates on leaves across backward passes until
    :meth:`zero_grad`.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, _leaf: bool = True):
        arr = np.asarray(data)
        if arr.dtype != _dtype:
            arr = arr.astype(_dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.is_leaf = _leaf
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(np.full(1, x))


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations.

    Used as a context manager; operations run inside the ``with`` block are
    appended in execution order, which is a topological order by
    construction.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        self.records.append(_Record(out, tuple(inputs), backward))

    def reset(self) -> None:
        self.records.clear()

    def backward(self, root: Tensor) -> None:
        if root.data.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
        if not self.records:
            raise ValueError("backward on an empty tape")
        grads: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.data)}
        for rec in reversed(self.records):
            g = grads.pop(rec.out.node_id, None)
            if g is None:
                continue
            if not rec.out.is_leaf:
                rec.out.grad = g
            in_grads = rec.backward(g)
            for inp, ig in zip(rec.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if ig.shape != inp.data.shape:
                    raise ShapeError("backward", ig.shape, inp.data.shape)
                prev = grads.get(inp.node_id)
                grads[inp.node_id] = ig if prev is None else prev + ig
        for rec in self.records:
            for inp in rec.inputs:
                g = grads.pop(inp.node_id, None)
                if g is not None and inp.is_leaf:
                    inp.grad = g.copy() if inp.grad is None else inp.grad + g


def backward(root: Tensor, tape: Tape | None = None) -> None:
    """Back-propagate from scalar ``root`` into every tracked leaf."""
    tape = tape or _active_tape()
    if tape is None:
        raise ValueError("backward called with no tape")
    tape.backward(root)


def _emit(data: np.ndarray, inputs: Sequence[Tensor], bw: Callable) -> Tensor:
    req = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req, _leaf=False)
    tape = _active_tape()
    if req and tape is not None:
        tape.record(out, inputs, bw)
    return out


# --------------------------------------------------------------------------
# elementwise and linear algebra


def _bias_axes(a_shape, b_shape, op):
    if a_shape == b_shape:
        return None
    if len(b_shape) <= len(a_shape) and tuple(a_shape[len(a_shape) - len(b_shape):]) == tuple(b_shape):
        return tuple(range(len(a_shape) - len(b_shape)))
    if b_shape == (1,):
        return tuple(range(len(a_shape)))
    raise ShapeError(op, a_shape, b_shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    axes = _bias_axes(a.shape, b.shape, "add")

    def bw(g):
        gb = g if axes is None else g.sum(axis=axes).reshape(b.shape)
        return g, gb

    return _emit(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    axes = _bias_axes(a.shape, b.shape, "sub")

    def bw(g):
        gb = -g if axes is None else -g.sum(axis=axes).reshape(b.shape)
        return g, gb

    return _emit(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        if bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g @ bd.T, ad.T @ g

    return _emit(ad @ bd, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)
    return _emit(y, (x,), lambda g: (g * (y > 0),))


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)
    return _emit(x.data * scale, (x,), lambda g: (g * scale,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit(y, (x,), lambda g: (g * (1 - y * y),))


def abs_(x: Tensor) -> Tensor:
    s = np.sign(x.data)
    return _emit(np.abs(x.data), (x,), lambda g: (g * s,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _emit(xd * xd, (x,), lambda g: (2 * g * xd,))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    src = x.shape
    return _emit(out, (x,), lambda g: (g.reshape(src),))


def sum_(x: Tensor) -> Tensor:
    src = x.shape
    return _emit(np.array([x.data.sum()], dtype=x.data.dtype), (x,), lambda g: (np.full(src, g[0], dtype=g.dtype),))


def mean(x: Tensor) -> Tensor:
    src, n = x.shape, x.size
    return _emit(np.array([x.data.mean()], dtype=x.data.dtype), (x,), lambda g: (np.full(src, g[0] / n, dtype=g.dtype),))


def l2_norm_squared(x: Tensor) -> Tensor:
    xd = x.data
    return _emit(np.array([np.vdot(xd, xd)], dtype=xd.dtype), (x,), lambda g: (2 * g[0] * xd,))


def concat(xs: Sequence[Tensor]) -> Tensor:
    xs = list(xs)
    tail = xs[0].shape[1:]
    for t in xs[1:]:
        if t.shape[1:] != tail:
            raise ShapeError("concat", xs[0].shape, t.shape)
    bounds = np.cumsum([0] + [t.shape[0] for t in xs])

    def bw(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return _emit(np.concatenate([t.data for t in xs], axis=0), xs, bw)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start <= stop <= x.shape[0]:
        raise ShapeError("slice_rows", x.shape, (start, stop))
    src = x.shape

    def bw(g):
        full = np.zeros(src, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return _emit(x.data[start:stop], (x,), bw)


# --------------------------------------------------------------------------
# convolution family


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    if x.data.ndim != 4 or w.data.ndim != 4 or w.shape[2] != x.shape[3] or w.shape[0] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[3],):
        raise ShapeError("conv2d", w.shape, b.shape)
    n, h, wd, _ = x.shape
    k, o = w.shape[0], w.shape[3]
    ho = kernels.conv_out_size(h, k, stride, pad)
    wo = kernels.conv_out_size(wd, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", x.shape, w.shape)
    cols = kernels.im2col(x.data, k, stride, pad)
    wmat = w.data.reshape(-1, o)
    out = cols @ wmat
    if b is not None:
        out += b.data
    y = out.reshape(n, ho, wo, o)
    xshape = x.shape

    def bw(g):
        g2 = g.reshape(-1, o)
        dw = (cols.T @ g2).reshape(w.shape)
        dx = kernels.col2im(g2 @ wmat.T, xshape, k, stride, pad) if x.requires_grad else None
        if b is None:
            return dx, dw
        return dx, dw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _emit(y, inputs, bw)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    if x.data.ndim != 4 or w.data.ndim != 4 or w.shape[0] != x.shape[3] or w.shape[1] != w.shape[2]:
        raise ShapeError("transposed-conv2d", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[3],):
        raise ShapeError("transposed-conv2d", w.shape, b.shape)
    n, h, wd, c = x.shape
    k, o = w.shape[1], w.shape[3]
    ho = (h - 1) * stride - 2 * pad + k
    wo = (wd - 1) * stride - 2 * pad + k
    if ho < 1 or wo < 1 or kernels.conv_out_size(ho, k, stride, pad) != h:
        raise ShapeError("transposed-conv2d", x.shape, w.shape)
    rows = x.data.reshape(-1, c)
    wmat = w.data.reshape(c, -1)
    y = kernels.col2im(rows @ wmat, (n, ho, wo, o), k, stride, pad)
    if b is not None:
        y += b.data

    def bw(g):
        gcols = kernels.im2col(g, k, stride, pad)
        dw = (rows.T @ gcols).reshape(w.shape)
        dx = (gcols @ wmat.T).reshape(x.shape) if x.requires_grad else None
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 1, 2))

    inputs = (x, w) if b is None else (x, w, b)
    return _emit(y, inputs, bw)


def max_pool2x2(x: Tensor) -> Tensor:
    if x.data.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
        raise ShapeError("max-pool2x2", x.shape)
    out, arg = kernels.maxpool2x2(x.data)
    return _emit(out, (x,), lambda g: (kernels.maxpool2x2_backward(g, arg),))


_upsample_cache: dict = {}


def _upsample_matrix(n: int, dtype) -> np.ndarray:
    key = (n, np.dtype(dtype).str)
    m = _upsample_cache.get(key)
    if m is None:
        m = np.zeros((2 * n, n))
        for o in range(2 * n):
            src = max((o + 0.5) / 2 - 0.5, 0.0)
            i0 = int(np.floor(src))
            i1 = min(i0 + 1, n - 1)
            frac = src - i0
            m[o, i0] += 1 - frac
            m[o, i1] += frac
        m = m.astype(dtype)
        _upsample_cache[key] = m
    return m


def bilinear_upsample2x(x: Tensor) -> Tensor:
    """Half-pixel-centred bilinear 2x upsampling of the spatial axes."""
    if x.data.ndim != 4:
        raise ShapeError("bilinear-upsample2x", x.shape)
    uh = _upsample_matrix(x.shape[1], x.data.dtype)
    uw = _upsample_matrix(x.shape[2], x.data.dtype)
    y = np.einsum("ph,nhwc,qw->npqc", uh, x.data, uw, optimize=True)
    return _emit(y, (x,), lambda g: (np.einsum("ph,npqc,qw->nhwc", uh, g, uw, optimize=True),))


class BatchNormState:
    """Running statistics for one batch-norm layer (not trainable)."""

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        self.running_mean = np.zeros(channels, dtype=_dtype)
        self.running_var = np.ones(channels, dtype=_dtype)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel normalisation of ``[N, C]`` or ``[N, H, W, C]`` input.

    In training mode batch statistics are used and the running estimates
    are updated in place; otherwise the running estimates are used and the
    op is affine in ``x``.
    """
    ch = x.shape[-1]
    if x.data.ndim not in (2, 4) or gamma.shape != (ch,) or beta.shape != (ch,):
        raise ShapeError("batch-norm", x.shape, gamma.shape)
    axes = tuple(range(x.data.ndim - 1))
    bshape = (ch,)
    xd = x.data
    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        count = xd.size // ch
        unbiased = var * count / max(count - 1, 1)
        mom = state.momentum
        state.running_mean = ((1 - mom) * state.running_mean + mom * mu).astype(state.running_mean.dtype)
        state.running_var = ((1 - mom) * state.running_var + mom * unbiased).astype(state.running_var.dtype)
    else:
        mu = state.running_mean.astype(xd.dtype)
        var = state.running_var.astype(xd.dtype)
        count = None
    inv = (1.0 / np.sqrt(var + state.eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    y = xhat * gd + beta.data.reshape(bshape)

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gx = g * gd
        if training:
            m = count
            dx = (inv.reshape(bshape) / m) * (
                m * gx - gx.sum(axis=axes).reshape(bshape) - xhat * (gx * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            dx = gx * inv.reshape(bshape)
        return dx, dgamma, dbeta

    return _emit(y, (x, gamma, beta), bw)


# --------------------------------------------------------------------------

PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "conv2d": conv2d,
    "transposed-conv2d": conv_transpose2d,
    "max-pool2x2": max_pool2x2,
    "bilinear-upsample2x": bilinear_upsample2x,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar-mul": scalar_mul,
    "relu": relu,
    "leaky-relu": leaky_relu,
    "tanh": tanh,
    "reshape": reshape,
    "sum": sum_,
    "mean": mean,
    "abs": abs_,
    "square": square,
    "L2-norm-squared": l2_norm_squared,
    "batch-norm": batch_norm,
    "concat": lambda *xs: concat(xs),
    "slice-rows": slice_rows,
}


def forward_primitive(kind: str, *inputs, **attrs) -> Tensor:
    """Dispatch a primitive by its registry name."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise UnknownOpError(f"unknown op-kind {kind!r}") from None
    return fn(*inputs, **attrs)
