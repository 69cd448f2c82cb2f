"""Small dense-tensor engine with reverse-mode automatic differentiation.

Everything downstream (scan kernels, backbone, training loop) is built on
this module. Tensors wrap contiguous numpy arrays (float32 by default,
float64 for gradient verification) and record executed operations on a
global tape; ``backward`` replays the tape in reverse to populate ``.grad``
buffers. Reductions use numpy's fixed left-to-right order, so two identical
forward+backward passes give bit-identical gradients.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigurationError(ValueError):
    """A structural hyperparameter is invalid (e.g. even conv kernel)."""


class UsageError(RuntimeError):
    """The autodiff API was used out of contract (e.g. double backward)."""


class _TapeRecord:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class GradTape:
    """Ordered record of executed ops, replayed in reverse by ``backward``."""

    def __init__(self):
        self.records: list[_TapeRecord] = []
        self.enabled = True

    def record(self, out: "Tensor", inputs: Sequence["Tensor"],
               backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        if self.enabled:
            self.records.append(_TapeRecord(out, inputs, backward_fn))

    def clear(self):
        self.records.clear()

    def __len__(self):
        return len(self.records)


_TAPE = GradTape()


def get_tape() -> GradTape:
    return _TAPE


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / optimizer math)."""
    prev = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = prev


class Tensor:
    """Dense N-d float array, optionally participating in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_in_graph")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._in_graph = False

    # ---- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=False)

    # ---- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _TAPE.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._in_graph = True
        _TAPE.record(out, tuple(inputs), backward_fn)
    return out


def record_op(data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Public hook for custom ops (used by the scan kernels)."""
    return _result(data, inputs, backward_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over axes that were broadcast up from ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---- elementwise arithmetic --------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _result(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _result(data, (a,), lambda g: (g * data,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)
    return _result(data, (a,), lambda g: (g * (0.5 / data),))


def power(a: Tensor, p: float) -> Tensor:
    data = a.data ** p
    return _result(data, (a,), lambda g: (g * p * a.data ** (p - 1),))


# ---- activations -------------------------------------------------------------

def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _softplus_np(x: np.ndarray) -> np.ndarray:
    # log(1+e^x) = max(x,0) + log1p(e^{-|x|}), safe for large |x|
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    return _result(s, (a,), lambda g: (g * s * (1 - s),))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    data = a.data * s

    def backward(g):
        return (g * (s + a.data * s * (1 - s)),)

    return _result(data, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    data = _softplus_np(a.data)
    s = _sigmoid_np(a.data)
    return _result(data, (a,), lambda g: (g * s,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    # tanh-form GELU; gradient is derived from the same approximation so
    # finite-difference checks are self-consistent
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        dt = (1.0 - t * t) * dinner
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _result(data, (a,), backward)


_ACTIVATIONS = {"silu": silu, "gelu": gelu, "sigmoid": sigmoid, "softplus": softplus}


def activation(a: Tensor, kind: str) -> Tensor:
    """Elementwise activation selected by name: silu, gelu, sigmoid, softplus."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown activation kind '{kind}'") from None
    return fn(a)


# ---- reductions & shape ops --------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _result(data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in ax]))
    s = tsum(a, axis=axis, keepdims=keepdims)
    return mul(s, Tensor(np.asarray(1.0 / n, dtype=a.dtype)))


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)
    return _result(data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    data = np.ascontiguousarray(np.transpose(a.data, axes))
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return _result(data, (a,), lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _result(data, tuple(tensors), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.moveaxis(g, axis, 0))

    return _result(data, tuple(tensors), backward)


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows (axis 0) by integer index; backward scatter-adds."""
    index = np.asarray(index, dtype=np.int64)
    data = a.data[index]

    def backward(g):
        out = np.zeros(a.shape, dtype=a.dtype)
        np.add.at(out, index, g)
        return (out,)

    return _result(data, (a,), backward)


# ---- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x[...,K] @ w[K,N] (+ b[N])."""
    y = matmul(x, w)
    if b is not None:
        y = add(y, b)
    return y


# ---- normalization -----------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    if x.shape[-1] != gamma.shape[-1] or gamma.shape != beta.shape:
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last axis of {x.shape}")
    mu = tmean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    inv = power(add(var, Tensor(np.asarray(eps, dtype=x.dtype))), -0.5)
    xn = mul(xc, inv)
    return add(mul(xn, gamma), beta)


# ---- depthwise convolution ---------------------------------------------------

def depthwise_conv2d(x: Tensor, k: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Per-channel 2D convolution with same (zero) padding.

    x: [C,H,W], k: [C,kh,kw] with odd kh/kw. No cross-channel mixing.
    """
    C, H, W = x.shape
    kc, kh, kw = k.shape
    if kc != C:
        raise ShapeError(f"kernel channels {kc} != input channels {C}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"depthwise kernel extents must be odd, got {kh}x{kw}")
    ph, pw = kh // 2, kw // 2

    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    data = np.einsum("chwij,cij->chw", win, k.data, optimize=True).astype(x.dtype)

    def backward(g):
        gk = np.einsum("chwij,chw->cij", win, g, optimize=True).astype(k.dtype)
        # dx: full correlation of g with the flipped kernel
        gp = np.pad(g, ((0, 0), (ph, ph), (pw, pw)))
        gwin = np.lib.stride_tricks.sliding_window_view(gp, (kh, kw), axis=(1, 2))
        kflip = k.data[:, ::-1, ::-1]
        gx = np.einsum("chwij,cij->chw", gwin, kflip, optimize=True).astype(x.dtype)
        return gx, gk

    out = _result(data, (x, k), backward)
    if bias is not None:
        out = add(out, reshape(bias, (C, 1, 1)))
    return out


# ---- backward driver ---------------------------------------------------------

def backward(loss: Tensor):
    """Reverse-replay the tape from a scalar loss, populating ``.grad``.

    The tape is cleared afterwards; calling again without a new forward pass
    raises UsageError.
    """
    if loss.size != 1:
        raise UsageError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not any(r.out is loss for r in _TAPE.records):
        raise UsageError("loss is not connected to the tape (already consumed, "
                         "or recorded under no_grad)")

    # Reverse replay: every consumer of a tensor appears later on the tape
    # than its producer, so walking records in reverse finishes accumulating
    # a tensor's adjoint before its producing record is visited.
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for rec in reversed(_TAPE.records):
        g = grads.get(id(rec.out))
        if g is None:
            continue
        input_grads = rec.backward_fn(g)
        for t, ig in zip(rec.inputs, input_grads):
            if ig is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = np.ascontiguousarray(ig)

    assigned: set[int] = set()
    for rec in _TAPE.records:
        for t in rec.inputs + (rec.out,):
            key = id(t)
            if t.requires_grad and key in grads and key not in assigned:
                assigned.add(key)
                g = grads[key]
                t.grad = g if t.grad is None else t.grad + g
    _TAPE.clear()


# ---- parameter helpers -------------------------------------------------------

def zeros(shape, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad=requires_grad)


def randn(rng: np.random.Generator, shape, scale=1.0, requires_grad=False, dtype=None) -> Tensor:
    return Tensor((rng.standard_normal(shape) * scale).astype(dtype or DEFAULT_DTYPE),
                  requires_grad=requires_grad)
