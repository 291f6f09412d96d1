"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation appends a node to a global, creation-ordered
tape; ``backward`` walks that tape once in reverse and accumulates gradients
into every tensor with ``requires_grad`` set. The tape is consumed by the
walk, so each training step rebuilds its graph from scratch.

Conventions:
  * values are float64 by default (float32 is an optional fast build mode
    for training runs; gradient tolerances are specified for float64),
  * binary ops broadcast with numpy's trailing-dimension rule,
  * "checked mode" rejects NaN/Inf at op boundaries (enabled in tests,
    left off in hot loops).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class TensorError(ValueError):
    """Shape or domain violation at an op boundary."""


class NonFiniteError(TensorError):
    """Checked mode saw a NaN or Inf crossing an op boundary."""


class TapeNode:
    """One recorded op: identifier, input refs, output ref, backward rule.

    Saved intermediate values live in the ``backward`` closure.
    """

    __slots__ = ("op", "inputs", "out", "backward")

    def __init__(self, op: str, inputs: tuple, out: "Tensor", backward: Callable[[Array], None]):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward = backward


_TAPE: list[TapeNode] = []
_GRAD_ENABLED = True
_CHECKED = False
_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Select the engine's working precision.

    "double"/float64 is the default and the only mode the gradient checks
    are specified for; "single"/float32 is a faster build mode for training
    runs. File formats stay float64 either way.
    """
    global _DTYPE
    if dtype in ("double", np.float64, "float64"):
        _DTYPE = np.float64
    elif dtype in ("single", np.float32, "float32"):
        _DTYPE = np.float32
    else:
        raise TensorError(f"unsupported dtype: {dtype!r}")


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    global _DTYPE
    prev = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DTYPE = prev


def tape_size() -> int:
    return len(_TAPE)


def reset_tape() -> None:
    _TAPE.clear()


@contextlib.contextmanager
def no_grad():
    """Disable taping inside the block (evaluation / finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def fresh_tape():
    """Run the block on an empty tape, restoring the outer tape afterwards."""
    global _TAPE
    saved = _TAPE
    _TAPE = []
    try:
        yield
    finally:
        _TAPE = saved


def set_checked(flag: bool) -> None:
    global _CHECKED
    _CHECKED = bool(flag)


def is_checked() -> bool:
    return _CHECKED


@contextlib.contextmanager
def checked_mode(flag: bool = True):
    global _CHECKED
    prev = _CHECKED
    _CHECKED = bool(flag)
    try:
        yield
    finally:
        _CHECKED = prev


class Tensor:
    """A dense float64 value, optionally participating in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_grad_owned")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_DTYPE)
        if _CHECKED and not np.all(np.isfinite(arr)):
            raise NonFiniteError("non-finite values in tensor constructor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._grad_owned = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # reductions / reshaping as methods keeps layer code readable
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, *arrays: Array) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite values at op boundary: {op}")


def _make(op: str, out_data: Array, inputs: tuple, backward_fn: Callable[[Array], None]) -> Tensor:
    if _CHECKED:
        _check_finite(op, out_data)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._grad_owned = False
    track = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out.requires_grad = track
    if track:
        _TAPE.append(TapeNode(op, inputs, out, backward_fn))
    return out


def _accum(t: Tensor, g: Array) -> None:
    if not t.requires_grad:
        return
    # the first buffer may be shared with another node, so it is only added
    # in place once this tensor owns a private accumulation buffer
    if t.grad is None:
        t.grad = g
        t._grad_owned = False
    elif t._grad_owned:
        np.add(t.grad, g, out=t.grad)
    else:
        t.grad = t.grad + g
        t._grad_owned = True


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient back down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate gradients of every requires_grad tensor reachable from loss.

    The tape is consumed: each node is visited exactly once in reverse
    creation order, then the tape is cleared.
    """
    if loss.data.size != 1:
        raise TensorError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not _TAPE:
        raise TensorError("backward called with an empty tape")
    loss.grad = np.ones_like(loss.data)
    loss._grad_owned = True
    tape = _TAPE[:]
    _TAPE.clear()
    for node in reversed(tape):
        g = node.out.grad
        if g is None:
            continue
        node.backward(g)


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if _CHECKED:
        _check_finite("add", a.data, b.data)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise TensorError(f"add: shapes {a.shape} and {b.shape} not broadcastable") from e

    def back(g: Array) -> None:
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make("add", out, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if _CHECKED:
        _check_finite("sub", a.data, b.data)
    try:
        out = a.data - b.data
    except ValueError as e:
        raise TensorError(f"sub: shapes {a.shape} and {b.shape} not broadcastable") from e

    def back(g: Array) -> None:
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make("sub", out, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if _CHECKED:
        _check_finite("mul", a.data, b.data)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise TensorError(f"mul: shapes {a.shape} and {b.shape} not broadcastable") from e

    def back(g: Array) -> None:
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make("mul", out, (a, b), back)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if _CHECKED:
        _check_finite("div", a.data, b.data)
    try:
        out = a.data / b.data
    except ValueError as e:
        raise TensorError(f"div: shapes {a.shape} and {b.shape} not broadcastable") from e

    def back(g: Array) -> None:
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make("div", out, (a, b), back)


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def back(g: Array) -> None:
        _accum(a, -g)

    return _make("neg", -a.data, (a,), back)


def scale(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)

    def back(g: Array) -> None:
        _accum(a, g * s)

    return _make("scale", a.data * s, (a,), back)


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if _CHECKED:
        _check_finite("exp", a.data)
    with np.errstate(over="ignore"):  # checked mode is the overflow guard
        out = np.exp(a.data)

    def back(g: Array) -> None:
        _accum(a, g * out)

    return _make("exp", out, (a,), back)


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if _CHECKED:
        _check_finite("sigmoid", a.data)
    x = a.data
    # overflow-free: exp of a nonpositive argument only
    t = np.exp(-np.abs(x))
    out = np.where(x >= 0.0, 1.0 / (1.0 + t), t / (1.0 + t))

    def back(g: Array) -> None:
        _accum(a, g * out * (1.0 - out))

    return _make("sigmoid", out, (a,), back)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if _CHECKED:
        _check_finite("relu", a.data)
    out = np.maximum(a.data, 0.0)

    def back(g: Array) -> None:
        _accum(a, g * (a.data > 0.0))

    return _make("relu", out, (a,), back)


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if _CHECKED:
        _check_finite("tanh", a.data)
    out = np.tanh(a.data)

    def back(g: Array) -> None:
        _accum(a, g * (1.0 - out * out))

    return _make("tanh", out, (a,), back)


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    a = _as_tensor(a)
    if _CHECKED:
        _check_finite("elu", a.data)
    x = a.data
    out = np.where(x > 0.0, x, alpha * np.expm1(x))

    def back(g: Array) -> None:
        _accum(a, g * np.where(x > 0.0, 1.0, out + alpha))

    return _make("elu", out, (a,), back)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    a = _as_tensor(a)
    if _CHECKED:
        _check_finite("leaky_relu", a.data)
    x = a.data
    out = np.where(x > 0.0, x, slope * x)

    def back(g: Array) -> None:
        _accum(a, g * np.where(x > 0.0, 1.0, slope))

    return _make("leaky_relu", out, (a,), back)


_EW_UNARY = {
    "sigmoid": sigmoid,
    "relu": relu,
    "tanh": tanh,
    "elu": elu,
    "exp": exp,
}
_EW_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, a: Tensor, b=None, slope: float = 0.01) -> Tensor:
    """Dispatch by op-kind; ``scale`` takes a scalar b, ``leaky_relu`` a slope."""
    if kind in _EW_BINARY:
        if b is None:
            raise TensorError(f"elementwise {kind} needs two operands")
        return _EW_BINARY[kind](a, b)
    if kind == "scale":
        if b is None:
            raise TensorError("elementwise scale needs a scalar factor")
        return scale(a, b)
    if kind == "leaky_relu":
        return leaky_relu(a, slope)
    if kind in _EW_UNARY:
        return _EW_UNARY[kind](a)
    raise TensorError(f"unknown elementwise op kind: {kind}")


# ---------------------------------------------------------------------------
# linear algebra / structure ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading dims broadcast, [..., m, k] @ [..., k, n]."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise TensorError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise TensorError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if _CHECKED:
        _check_finite("matmul", a.data, b.data)
    k, n = b.shape[-2], b.shape[-1]
    dense = b.ndim == 2 and a.ndim > 2   # shared weight matrix: one flat gemm
    mixing = a.ndim == 2 and b.ndim == 3  # small matrix applied across a batch
    try:
        if dense:
            out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (n,))
        elif mixing:
            m = a.shape[0]
            bt = b.data.transpose(1, 0, 2).reshape(k, -1)
            out = np.ascontiguousarray(
                (a.data @ bt).reshape(m, b.shape[0], n).transpose(1, 0, 2))
        else:
            out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise TensorError(f"matmul: batch dims of {a.shape} and {b.shape} not broadcastable") from e

    def back(g: Array) -> None:
        if dense:
            if a.requires_grad:
                _accum(a, (g.reshape(-1, n) @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                _accum(b, a.data.reshape(-1, k).T @ g.reshape(-1, n))
            return
        if mixing:
            if a.requires_grad:
                _accum(a, np.tensordot(g, b.data, axes=([0, 2], [0, 2])))
            if b.requires_grad:
                m = a.shape[0]
                gt = g.transpose(1, 0, 2).reshape(m, -1)
                _accum(b, np.ascontiguousarray(
                    (a.data.T @ gt).reshape(k, b.shape[0], n).transpose(1, 0, 2)))
            return
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accum(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accum(b, _unbroadcast(gb, b.shape))

    return _make("matmul", out, (a, b), back)


def node_matmul(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-node product: x[..., n, :] @ w[n] (+ bias[n]).

    x is (N, C) or (B, N, C), w is (N, C, F), bias (N, F). Runs one flat
    gemm per node, which beats a stacked matmul for the small slices used
    here.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if w.ndim != 3:
        raise TensorError(f"node_matmul weights must be (N, C, F), got {w.shape}")
    n, c, f = w.shape
    if x.ndim not in (2, 3) or x.shape[-2] != n or x.shape[-1] != c:
        raise TensorError(f"node_matmul: input {x.shape} incompatible with weights {w.shape}")
    if bias is not None and bias.shape != (n, f):
        raise TensorError(f"node_matmul bias must be ({n}, {f}), got {bias.shape}")
    if _CHECKED:
        _check_finite("node_matmul", x.data, w.data)
    batched = x.ndim == 3
    xd = x.data if batched else x.data[None]
    b = xd.shape[0]
    out = np.empty((n, b, f), dtype=xd.dtype)
    for i in range(n):
        np.dot(xd[:, i, :], w.data[i], out=out[i])
    out = np.ascontiguousarray(out.transpose(1, 0, 2))
    if bias is not None:
        out += bias.data
    out = out if batched else out[0]

    def back(g: Array) -> None:
        gd = g if batched else g[None]
        if x.requires_grad:
            gx = np.empty((n, b, c), dtype=gd.dtype)
            for i in range(n):
                np.dot(gd[:, i, :], w.data[i].T, out=gx[i])
            gx = np.ascontiguousarray(gx.transpose(1, 0, 2))
            _accum(x, gx if batched else gx[0])
        if w.requires_grad:
            gw = np.empty((n, c, f), dtype=gd.dtype)
            for i in range(n):
                np.dot(xd[:, i, :].T, gd[:, i, :], out=gw[i])
            _accum(w, gw)
        if bias is not None and bias.requires_grad:
            _accum(bias, gd.sum(axis=0))

    inputs = (x, w) if bias is None else (x, w, bias)
    return _make("node_matmul", out, inputs, back)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def back(g: Array) -> None:
        _accum(a, np.transpose(g, inv))

    return _make("transpose", out, (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise TensorError(f"cannot reshape {a.shape} to {shape}") from e

    def back(g: Array) -> None:
        _accum(a, g.reshape(a.shape))

    return _make("reshape", out, (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise TensorError("concat: incompatible shapes") from e
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def back(g: Array) -> None:
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _make("concat", out, tuple(ts), back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise TensorError("stack: shapes must all match") from e

    def back(g: Array) -> None:
        for i, t in enumerate(ts):
            _accum(t, np.take(g, i, axis=axis))

    return _make("stack", out, tuple(ts), back)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    a = _as_tensor(a)
    if not 0 <= start and start + length <= a.shape[axis]:
        raise TensorError(f"narrow [{start}:{start + length}) out of range for axis {axis} of {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = a.data[idx]

    def back(g: Array) -> None:
        buf = np.zeros(a.shape, dtype=g.dtype)
        buf[idx] = g
        _accum(a, buf)

    return _make("narrow", out, (a,), back)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    axes = _norm_axes(axis, a.ndim)

    def back(g: Array) -> None:
        _accum(a, _spread(g, a.shape, axes, keepdims))

    return _make("sum", np.asarray(out), (a,), back)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    axes = _norm_axes(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))

    def back(g: Array) -> None:
        _accum(a, _spread(g, a.shape, axes, keepdims) / count)

    return _make("mean", np.asarray(out), (a,), back)


def _norm_axes(axis, ndim) -> tuple[int, ...] | None:
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _spread(g: Array, shape: tuple[int, ...], axes, keepdims: bool) -> Array:
    if axes is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


# ---------------------------------------------------------------------------
# neural-net ops


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along one axis; outputs sum to 1 there."""
    a = _as_tensor(a)
    if a.shape[axis % a.ndim] == 0:
        raise TensorError("softmax over an empty axis")
    if _CHECKED:
        _check_finite("softmax", a.data)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g: Array) -> None:
        gy = g * out
        _accum(a, gy - out * gy.sum(axis=axis, keepdims=True))

    return _make("softmax", out, (a,), back)


def masked_softmax(a: Tensor, mask, axis: int = -1) -> Tensor:
    """Softmax restricted to entries where mask != 0; exact zeros elsewhere.

    The mask is a constant: no gradient flows into it. Every slice along
    ``axis`` must contain at least one unmasked entry.
    """
    a = _as_tensor(a)
    m = np.asarray(mask)
    m = (m != 0.0).astype(a.data.dtype)
    if _CHECKED:
        _check_finite("masked_softmax", a.data)
    try:
        m_b = np.broadcast_to(m, a.shape)
    except ValueError as e:
        raise TensorError(f"masked_softmax: mask {m.shape} not broadcastable to {a.shape}") from e
    neg = np.where(m_b > 0.0, a.data, -np.inf)
    mx = neg.max(axis=axis, keepdims=True)
    if not np.all(np.isfinite(mx)):
        raise TensorError("masked_softmax: a slice has no unmasked entries")
    w = np.exp(a.data - mx) * m_b
    out = w / w.sum(axis=axis, keepdims=True)

    def back(g: Array) -> None:
        gy = g * out
        _accum(a, gy - out * gy.sum(axis=axis, keepdims=True))

    return _make("masked_softmax", out, (a,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1] if x.ndim else 0
    if d < 1:
        raise TensorError("layer_norm needs a non-empty last axis")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise TensorError(f"layer_norm: gamma/beta must have shape ({d},)")
    if _CHECKED:
        _check_finite("layer_norm", x.data, gamma.data, beta.data)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def back(g: Array) -> None:
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gh = g * gamma.data
            term = gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            _accum(x, term * inv)

    return _make("layer_norm", out, (x, gamma, beta), back)


def conv_temporal(x: Tensor, kernel: Tensor) -> Tensor:
    """1-d convolution along the time axis of x[..., T, N, C] with same-padding.

    kernel has shape (k, C, F), k odd; each node is convolved independently
    and channels are mixed by the kernel's (C, F) slices.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim < 3:
        raise TensorError(f"conv_temporal expects x of shape [..., T, N, C], got {x.shape}")
    if kernel.ndim != 3:
        raise TensorError(f"conv_temporal kernel must be (k, C, F), got {kernel.shape}")
    k, cin, cout = kernel.shape
    if k % 2 == 0:
        raise TensorError(f"conv_temporal kernel width must be odd, got {k}")
    if x.shape[-1] != cin:
        raise TensorError(f"conv_temporal: input channels {x.shape[-1]} != kernel channels {cin}")
    if _CHECKED:
        _check_finite("conv_temporal", x.data, kernel.data)
    T = x.shape[-3]
    half = (k - 1) // 2
    pad_width = [(0, 0)] * (x.ndim - 3) + [(half, half), (0, 0), (0, 0)]
    xp = np.pad(x.data, pad_width)
    out = np.zeros(x.shape[:-1] + (cout,), dtype=x.data.dtype)
    for dt in range(k):
        sl = xp[..., dt:dt + T, :, :]
        out += np.matmul(sl, kernel.data[dt])

    def back(g: Array) -> None:
        if kernel.requires_grad:
            gk = np.zeros((k, cin, cout), dtype=g.dtype)
            for dt in range(k):
                sl = xp[..., dt:dt + T, :, :]
                gk[dt] = sl.reshape(-1, cin).T @ g.reshape(-1, cout)
            _accum(kernel, gk)
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for dt in range(k):
                gxp[..., dt:dt + T, :, :] += np.matmul(g, kernel.data[dt].T)
            _accum(x, gxp[..., half:half + T, :, :])

    return _make("conv_temporal", out, (x, kernel), back)


def attention_block(x: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor,
                    ln1_gamma: Tensor, ln1_beta: Tensor,
                    ffn_w1: Tensor, ffn_b1: Tensor, ffn_w2: Tensor, ffn_b2: Tensor,
                    ln2_gamma: Tensor, ln2_beta: Tensor,
                    n_heads: int, drop_mask: Array | None = None,
                    eps: float = 1e-5) -> Tensor:
    """One post-norm self-attention block over the second-to-last axis,
    fused into a single tape node.

    x is (..., T, D). Computes multi-head scaled dot-product attention with
    shared projections, then residual + layer norm, then a ReLU feed-forward
    with residual + layer norm. ``drop_mask`` (already inverted-scaled) is
    applied to the attention weights. Equivalent to composing the individual
    ops; fused because this block dominates the training hot loop.
    """
    params = (w_q, w_k, w_v, w_o, ln1_gamma, ln1_beta,
              ffn_w1, ffn_b1, ffn_w2, ffn_b2, ln2_gamma, ln2_beta)
    x = _as_tensor(x)
    if x.ndim < 2:
        raise TensorError(f"attention_block expects (..., T, D), got {x.shape}")
    t_len, d = x.shape[-2], x.shape[-1]
    if d % n_heads != 0:
        raise TensorError(f"attention_block: D={d} not divisible by heads={n_heads}")
    if _CHECKED:
        _check_finite("attention_block", x.data, *(p.data for p in params))
    dk = d // n_heads
    lead = x.shape[:-2]
    b_flat = int(np.prod(lead)) if lead else 1
    scale_f = 1.0 / np.sqrt(dk)

    xd = x.data.reshape(b_flat, t_len, d)
    flat = xd.reshape(-1, d)

    def heads_view(m2):
        # (B*T, D) -> (B, h, T, dk)
        return np.ascontiguousarray(
            m2.reshape(b_flat, t_len, n_heads, dk).transpose(0, 2, 1, 3))

    def heads_merge(m4):
        # (B, h, T, dk) -> (B*T, D)
        return np.ascontiguousarray(m4.transpose(0, 2, 1, 3)).reshape(-1, d)

    q = heads_view(flat @ w_q.data)
    k = heads_view(flat @ w_k.data)
    v = heads_view(flat @ w_v.data)
    scores = np.matmul(q, k.transpose(0, 1, 3, 2)) * scale_f
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    attn = e / e.sum(axis=-1, keepdims=True)                    # (B, h, T, T)
    attn_used = attn if drop_mask is None else attn * drop_mask.reshape(attn.shape)
    ctx = np.matmul(attn_used, v)                               # (B, h, T, dk)
    merged = heads_merge(ctx)
    mha = merged @ w_o.data

    def _ln_forward(inp):
        mu = inp.mean(axis=-1, keepdims=True)
        xc = inp - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        return xc * inv, inv

    res1_in = mha + flat
    xhat1, inv1 = _ln_forward(res1_in)
    res1 = xhat1 * ln1_gamma.data + ln1_beta.data

    hidden_pre = res1 @ ffn_w1.data + ffn_b1.data
    hidden = np.maximum(hidden_pre, 0.0)
    ffn_out = hidden @ ffn_w2.data + ffn_b2.data

    res2_in = ffn_out + res1
    xhat2, inv2 = _ln_forward(res2_in)
    out = (xhat2 * ln2_gamma.data + ln2_beta.data).reshape(x.shape)

    def _ln_backward(g2, xhat, inv, gamma):
        gh = g2 * gamma.data
        return (gh - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)) * inv

    def back(g: Array) -> None:
        g2 = g.reshape(-1, d)
        if ln2_gamma.requires_grad:
            _accum(ln2_gamma, (g2 * xhat2).sum(axis=0))
        if ln2_beta.requires_grad:
            _accum(ln2_beta, g2.sum(axis=0))
        g_res2 = _ln_backward(g2, xhat2, inv2, ln2_gamma)

        # feed-forward
        g_hidden = (g_res2 @ ffn_w2.data.T) * (hidden_pre > 0.0)
        if ffn_w2.requires_grad:
            _accum(ffn_w2, hidden.T @ g_res2)
        if ffn_b2.requires_grad:
            _accum(ffn_b2, g_res2.sum(axis=0))
        if ffn_w1.requires_grad:
            _accum(ffn_w1, res1.T @ g_hidden)
        if ffn_b1.requires_grad:
            _accum(ffn_b1, g_hidden.sum(axis=0))
        g_res1 = g_res2 + g_hidden @ ffn_w1.data.T

        if ln1_gamma.requires_grad:
            _accum(ln1_gamma, (g_res1 * xhat1).sum(axis=0))
        if ln1_beta.requires_grad:
            _accum(ln1_beta, g_res1.sum(axis=0))
        g_mha_res = _ln_backward(g_res1, xhat1, inv1, ln1_gamma)

        # output projection and heads
        g_merged = g_mha_res @ w_o.data.T
        if w_o.requires_grad:
            _accum(w_o, merged.T @ g_mha_res)
        g_ctx = heads_view(g_merged)
        g_attn_used = np.matmul(g_ctx, v.transpose(0, 1, 3, 2))
        g_v = np.matmul(attn_used.transpose(0, 1, 3, 2), g_ctx)
        g_attn = g_attn_used if drop_mask is None else g_attn_used * drop_mask.reshape(attn.shape)
        gy = g_attn * attn
        g_scores = (gy - attn * gy.sum(axis=-1, keepdims=True)) * scale_f
        g_q = np.matmul(g_scores, k)
        g_k = np.matmul(g_scores.transpose(0, 1, 3, 2), q)

        gq_flat = heads_merge(g_q)
        gk_flat = heads_merge(g_k)
        gv_flat = heads_merge(g_v)
        if w_q.requires_grad:
            _accum(w_q, flat.T @ gq_flat)
        if w_k.requires_grad:
            _accum(w_k, flat.T @ gk_flat)
        if w_v.requires_grad:
            _accum(w_v, flat.T @ gv_flat)
        if x.requires_grad:
            g_x = (g_mha_res + gq_flat @ w_q.data.T + gk_flat @ w_k.data.T
                   + gv_flat @ w_v.data.T)
            _accum(x, g_x.reshape(x.shape))

    return _make("attention_block", out, (x,) + params, back)


def gated_blend(z: Tensor, a: Tensor, b: Tensor) -> Tensor:
    """z * a + (1 - z) * b as one node (the GRU state update)."""
    z, a, b = _as_tensor(z), _as_tensor(a), _as_tensor(b)
    if not (z.shape == a.shape == b.shape):
        raise TensorError(f"gated_blend: shapes differ {z.shape}, {a.shape}, {b.shape}")
    if _CHECKED:
        _check_finite("gated_blend", z.data, a.data, b.data)
    out = z.data * a.data + (1.0 - z.data) * b.data

    def back(g: Array) -> None:
        _accum(z, g * (a.data - b.data))
        _accum(a, g * z.data)
        _accum(b, g * (1.0 - z.data))

    return _make("gated_blend", out, (z, a, b), back)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return x
    if p >= 1.0:
        raise TensorError("dropout rate must be < 1")
    keep = ((rng.random(x.shape) >= p) / (1.0 - p)).astype(x.data.dtype)
    return mul(x, Tensor(keep))


def smooth_l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean huber-style loss: 0.5 d^2 when |d| < 1, |d| - 0.5 otherwise."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise TensorError(f"smooth_l1_loss: shapes differ {pred.shape} vs {target.shape}")
    if _CHECKED:
        _check_finite("smooth_l1_loss", pred.data, target.data)
    d = pred.data - target.data
    absd = np.abs(d)
    per = np.where(absd < 1.0, 0.5 * d * d, absd - 0.5)
    out = np.asarray(per.mean())

    def back(g: Array) -> None:
        gd = np.clip(d, -1.0, 1.0) * (g / d.size)
        _accum(pred, gd)
        _accum(target, -gd)

    return _make("smooth_l1_loss", out, (pred, target), back)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    f must be a deterministic scalar-valued function of x. Error per
    coordinate is |analytic - fd| / max(1, |analytic|).
    """
    if not (1e-7 <= h <= 1e-3):
        raise TensorError(f"grad_check step h={h} outside [1e-7, 1e-3]")
    if not x.requires_grad:
        raise TensorError("grad_check target must have requires_grad")
    with fresh_tape():
        x.grad = None
        y = f(x)
        if y.data.size != 1:
            raise TensorError(f"grad_check needs a scalar-valued f, got shape {y.shape}")
        backward(y)
        analytic = np.zeros_like(x.data) if x.grad is None else np.array(x.grad)
        flat = x.data.reshape(-1)
        fd = np.zeros(flat.size)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f(x).data)
                flat[i] = orig - h
                fm = float(f(x).data)
                flat[i] = orig
                fd[i] = (fp - fm) / (2.0 * h)
        x.grad = None
    a = analytic.reshape(-1)
    rel = np.abs(a - fd) / np.maximum(1.0, np.abs(a))
    return float(rel.max())
