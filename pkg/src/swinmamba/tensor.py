"""Minimal N-d array engine with reverse-mode differentiation.

Only the primitives the segmentation network needs are provided. Every op
records a closure on its output; ``Tensor.backward`` orders the recorded graph
topologically and replays the adjoints in reverse, consuming the graph.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _scan
from .fft import fft2 as _fft2
from .fft import is_power_of_two

_state = threading.local()


def get_default_dtype():
    return getattr(_state, "dtype", np.float64)


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError("only float32 and float64 are supported")
    _state.dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    prev = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or get_default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
            # tape is consumed once
            node._backward = None
            node._parents = ()

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x, dtype=None) -> Tensor:
    return Tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward if track else None
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(a, dtype=b.dtype), b
    return as_tensor(a), as_tensor(b)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                   "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _result(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    """Elementwise a**p for a constant exponent."""
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data ** p
    return _result(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "power")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, (a,), lambda g: (g / a.data,), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return _result(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    sig = _sigmoid(x)
    out = x * sig
    return _result(out, (a,), lambda g: (g * (sig * (1.0 + x * (1.0 - sig))),), "silu")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0).astype(a.dtype), (a,),
                   lambda g: (g * mask,), "relu")


_UNARY = {"tanh": tanh, "sigmoid": sigmoid, "softplus": softplus, "silu": silu,
          "exp": exp, "relu": relu, "log": log, "neg": neg}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise_map(x, op: str, y=None) -> Tensor:
    if op in _BINARY:
        if y is None:
            raise ValueError(f"{op} needs a second operand")
        return _BINARY[op](x, y)
    if op in _UNARY:
        return _UNARY[op](x)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """a (..., m, k) @ b (k, n), or batched b with the same leading axes as a."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ValueError(f"batched matmul needs equal leading axes: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if b.ndim == 2:
            ga = g @ b.data.T
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


def _conv_windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x (C_in, H, W) or (B, C_in, H, W) with (C_out, C_in, k, k)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    if kernel.ndim != 4 or kernel.shape[1] != xd.shape[1] or kernel.shape[2] != kernel.shape[3]:
        raise ValueError(f"bad conv2d kernel {kernel.shape} for input {x.shape}")
    k = kernel.shape[2]
    nb, cin, h, w = xd.shape
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ValueError(f"kernel {k} larger than padded input {h}x{w} (pad {padding})")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = _conv_windows(xp, k, stride)  # (B, C_in, Ho, Wo, k, k)
    ho, wo = win.shape[2], win.shape[3]
    out = np.tensordot(win, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        parents.append(bias)
    out = np.ascontiguousarray(out if batched else out[0])

    def backward(g):
        gb4 = g if batched else g[None]
        gk = np.tensordot(gb4, win, axes=([0, 2, 3], [0, 2, 3]))
        gcols = np.tensordot(gb4, kernel.data, axes=([1], [0]))  # (B, Ho, Wo, C_in, k, k)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if padding:
            gxp = gxp[:, :, padding:padding + h, padding:padding + w]
        gx = gxp if batched else gxp[0]
        grads = [gx, gk]
        if bias is not None:
            grads.append(gb4.sum(axis=(0, 2, 3)))
        return grads

    return _result(out, parents, backward, "conv2d")


# ---------------------------------------------------------------- reductions / shape

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axes, keepdims) * (1.0 / n)


def tmax(a, axis=None, keepdims=False) -> Tensor:
    """Max reduction; ties share the gradient equally."""
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    full = a.data.max(axis=axes, keepdims=True)
    out = full if keepdims else np.squeeze(full, axis=axes)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        mask = (a.data == full)
        return (mask * (g / mask.sum(axis=axes, keepdims=True)),)

    return _result(np.asarray(out), (a,), backward, "max")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(out), (a,), backward, "getitem")


def narrow(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis (cheaper adjoint than generic indexing)."""
    a = as_tensor(a)
    axis %= a.ndim
    sl = (slice(None),) * axis + (slice(start, stop),)

    def backward(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        return (full,)

    return _result(a.data[sl].copy(), (a,), backward, "narrow")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return np.split(g, sizes, axis=axis)

    return _result(out, ts, backward, "concat")


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def backward(g):
        return [np.take(g, i, axis=axis) for i in range(len(ts))]

    return _result(out, ts, backward, "stack")


def flip(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return _result(np.flip(a.data, axis).copy(), (a,),
                   lambda g: (np.flip(g, axis).copy(),), "flip")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(np.broadcast_to(a.data, shape).copy(), (a,),
                   lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def cumulative_sum(a, axis: int) -> Tensor:
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"axis {axis} out of range for rank {a.ndim}")

    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _result(np.cumsum(a.data, axis=axis), (a,), backward, "cumsum")


# ---------------------------------------------------------------- sampling

def bilinear_sample(field, coords) -> Tensor:
    """Sample field (C, H, W) at fractional (row, col) coords (P, 2) -> (C, P).

    Coordinates are clamped to the image; the coordinate gradient is zero
    outside [0, H-1] x [0, W-1].
    """
    field, coords = as_tensor(field), as_tensor(coords)
    if np.isnan(coords.data).any():
        raise ValueError("NaN sample coordinates")
    f = field.data
    nc, h, w = f.shape
    r = np.clip(coords.data[:, 0], 0, h - 1)
    c = np.clip(coords.data[:, 1], 0, w - 1)
    r0 = np.clip(np.floor(r).astype(np.int64), 0, max(h - 2, 0))
    c0 = np.clip(np.floor(c).astype(np.int64), 0, max(w - 2, 0))
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (r - r0).astype(f.dtype)
    fc = (c - c0).astype(f.dtype)
    v00, v01 = f[:, r0, c0], f[:, r0, c1]
    v10, v11 = f[:, r1, c0], f[:, r1, c1]
    # weighted form (not nested lerps) keeps integer coordinates exact, clipped edges included
    out = v00 * ((1 - fr) * (1 - fc)) + v01 * ((1 - fr) * fc) + v10 * (fr * (1 - fc)) + v11 * (fr * fc)

    def backward(g):
        gf = None
        if field.requires_grad:
            hw = h * w
            base = (np.arange(nc) * hw)[:, None]
            idx = np.concatenate([base + r0 * w + c0, base + r0 * w + c1,
                                  base + r1 * w + c0, base + r1 * w + c1], axis=1)
            wts = np.concatenate([g * ((1 - fr) * (1 - fc)), g * ((1 - fr) * fc),
                                  g * (fr * (1 - fc)), g * (fr * fc)], axis=1)
            gf = np.bincount(idx.ravel(), weights=wts.ravel(), minlength=nc * hw)
            gf = gf.reshape(nc, h, w).astype(f.dtype)
        gcoord = None
        if coords.requires_grad:
            in_r = (coords.data[:, 0] >= 0) & (coords.data[:, 0] <= h - 1)
            in_c = (coords.data[:, 1] >= 0) & (coords.data[:, 1] <= w - 1)
            top = v00 + (v01 - v00) * fc
            bot = v10 + (v11 - v10) * fc
            dr = ((bot - top) * g).sum(axis=0) * in_r
            dc = (((v01 - v00) * (1 - fr) + (v11 - v10) * fr) * g).sum(axis=0) * in_c
            gcoord = np.stack([dr, dc], axis=1).astype(coords.dtype)
        return gf, gcoord

    return _result(out, (field, coords), backward, "bilinear_sample")


# ---------------------------------------------------------------- spectral

def fft2(x, inverse: bool = False) -> Tensor:
    """2-D DFT over the trailing s x s planes of x shaped (2, ..., s, s).

    x[0] holds real parts and x[1] imaginary parts. The inverse is normalized
    by 1/s^2; the adjoint of each direction is the conjugate transform.
    """
    x = as_tensor(x)
    if x.ndim < 3 or x.shape[0] != 2:
        raise ValueError(f"fft2 expects a (2, ..., s, s) real/imag pair, got {x.shape}")
    for n in x.shape[-2:]:
        if not is_power_of_two(n):
            raise ValueError(f"FFT extent must be a power of two, got {n}")
    npix = x.shape[-1] * x.shape[-2]
    z = _fft2(x.data[0] + 1j * x.data[1], inverse)
    out = np.stack([z.real, z.imag]).astype(x.dtype)

    def backward(g):
        gz = g[0] + 1j * g[1]
        if inverse:
            back = _fft2(gz, inverse=False) / npix
        else:
            back = _fft2(gz, inverse=True) * npix
        return (np.stack([back.real, back.imag]).astype(x.dtype),)

    return _result(out, (x,), backward, "fft2")


# ---------------------------------------------------------------- selective scan

def selective_scan(x, delta, A, Bm, Cm) -> Tensor:
    """Diagonal selective SSM recurrence, no skip term.

    h_t = exp(delta_t * A) * h_{t-1} + (delta_t * B_t) x_t, y_t = <C_t, h_t>,
    with h_0 = 0. x, delta: (batch, T, D); A: (D, N); Bm, Cm: (batch, T, N).
    """
    x, delta, A, Bm, Cm = (as_tensor(t) for t in (x, delta, A, Bm, Cm))
    nb, nt, nd = x.shape
    if delta.shape != x.shape or A.shape[0] != nd or Bm.shape != (nb, nt, A.shape[1]) \
            or Cm.shape != Bm.shape:
        raise ValueError("selective_scan shape mismatch: "
                         f"x {x.shape} delta {delta.shape} A {A.shape} B {Bm.shape} C {Cm.shape}")
    if nt < 1:
        raise ValueError("selective_scan needs at least one step")
    dt = x.dtype
    xd, dd, bd, cd = (np.ascontiguousarray(t.data, dtype=dt) for t in (x, delta, Bm, Cm))
    At = np.ascontiguousarray(A.data.T, dtype=dt)  # (N, D)
    decay = np.exp(dd[:, :, None, :] * At)  # (B, T, N, D)
    y, hs = _scan.scan_forward(xd, dd, decay, bd, cd)
    if not (np.isfinite(hs[:, -1]).all() and np.isfinite(y).all()):
        raise NonFiniteError("selective_scan state became non-finite")

    def backward(g):
        gx, gd, gA, gB, gC = _scan.scan_backward(
            np.ascontiguousarray(g, dtype=dt), xd, dd, decay, At, bd, cd, hs)
        return gx, gd, gA.T, gB, gC

    return _result(y, (x, delta, A, Bm, Cm), backward, "selective_scan")


# ---------------------------------------------------------------- verification

def grad_check(function: Callable[[Tensor], Tensor], point, eps: float = 1e-5) -> float:
    """Max relative error between the analytic gradient and central differences.

    Error per coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    base = np.array(point, dtype=np.float64)
    with default_dtype(np.float64):
        x = Tensor(base, requires_grad=True)
        out = function(x)
        if out.size != 1:
            raise ValueError("grad_check needs a scalar-valued function")
        out.backward()
        analytic = x.grad.copy()
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                fp = function(Tensor(base)).item()
            flat[i] = orig - eps
            with no_grad():
                fm = function(Tensor(base)).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
