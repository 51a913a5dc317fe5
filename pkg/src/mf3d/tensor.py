"""Dense tensors with reverse-mode automatic differentiation.

A thread-local dynamic tape records every differentiable op as it executes;
``backward`` replays the tape in reverse, accumulates gradients into every
tensor that requires them, and clears the tape. float32 is the training
precision, float64 the verification precision (finite-difference checks are
unreliable in float32).

Broadcasting is deliberately narrow: operands must have identical shapes,
or one operand is a scalar, or one operand's shape is a trailing suffix of
the other's (leading-axis expansion). Anything else raises.
"""

from __future__ import annotations

import math
import threading

import numpy as np
from scipy.special import erf

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw arrays, not Tensors")
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and data.dtype.type in _FLOAT_DTYPES:
                dtype = data.dtype
            else:
                dtype = np.float32
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOAT_DTYPES:
            raise TypeError(f"unsupported dtype {arr.dtype}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
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
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("op", "out", "inputs", "backfn")

    def __init__(self, op, out, inputs, backfn):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backfn = backfn


class Tape:
    """Execution-ordered record of differentiable ops."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


class _EngineState(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.enabled = True


_state = _EngineState()

# Name of an op whose backward rule is deliberately corrupted. Test hook for
# the gradient-check negative control; never set outside of it.
_fault_op: str | None = None


def active_tape() -> Tape:
    return _state.tape


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        self._prev = _state.enabled
        _state.enabled = False
        return self

    def __exit__(self, *exc):
        _state.enabled = self._prev
        return False


class inject_backward_fault:
    """Corrupt the named op's backward rule while active (negative control)."""

    def __init__(self, op: str):
        self.op = op

    def __enter__(self):
        global _fault_op
        self._prev = _fault_op
        _fault_op = self.op
        return self

    def __exit__(self, *exc):
        global _fault_op
        _fault_op = self._prev
        return False


def _record(op: str, out: Tensor, inputs: tuple[Tensor, ...], backfn) -> Tensor:
    if _state.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _state.tape.nodes.append(_Node(op, out, inputs, backfn))
    return out


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        a, b = a, _as_tensor(b, like=a)
    else:
        b = _as_tensor(b)
        a = _as_tensor(a, like=b)
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"dtype mismatch: {a.data.dtype} vs {b.data.dtype}")
    return a, b


def _check_broadcast(sa: tuple, sb: tuple) -> None:
    """Allow equal shapes, scalar operands, or trailing-suffix expansion."""
    if sa == sb:
        return
    na, nb = int(np.prod(sa)), int(np.prod(sb))
    if na == 1 or nb == 1:
        return
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(small) < len(big) and big[len(big) - len(small):] == small:
        return
    raise ValueError(f"shapes {sa} and {sb} do not broadcast (suffix rule)")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over the axes a smaller operand was expanded along."""
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return g.sum().reshape(shape).astype(g.dtype)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data + b.data)

    def backfn(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _record("add", out, (a, b), backfn)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data - b.data)

    def backfn(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _record("sub", out, (a, b), backfn)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = Tensor(ad * bd)

    def backfn(g):
        return _reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)

    return _record("mul", out, (a, b), backfn)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)
    return _record("neg", out, (a,), lambda g: (-g,))


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    sign = np.sign(a.data)
    out = Tensor(np.abs(a.data))
    return _record("abs", out, (a,), lambda g: (g * sign,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = (a.data > 0).astype(a.data.dtype)
    out = Tensor(a.data * mask)
    return _record("relu", out, (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y.astype(a.data.dtype))

    def backfn(g):
        return (g * y * (1.0 - y),)

    return _record("sigmoid", out, (a,), backfn)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact GELU: x * Phi(x) with the Gaussian CDF."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor((x * cdf).astype(x.dtype))

    def backfn(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (cdf + x * pdf),)

    return _record("gelu", out, (a,), backfn)


def matmul(a, b) -> Tensor:
    """Batched last-two-axes matrix product; a 2-D rhs is shared across batch."""
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul operands need >= 2 dims")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"inner dims differ: {ad.shape} @ {bd.shape}")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ValueError(f"batch dims differ: {ad.shape} @ {bd.shape}")
    out = Tensor(np.matmul(ad, bd))

    def backfn(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        if bd.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape(-1, *gb.shape[-2:]).sum(axis=0)
        return ga, gb

    return _record("matmul", out, (a, b), backfn)


def softmax_lastdim(a) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y.astype(a.data.dtype))

    def backfn(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _record("softmax", out, (a,), backfn)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last dimension to zero mean / unit variance, then affine."""
    x, gain = _pair(x, gain)
    _, bias = _pair(x, bias)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ValueError("gain/bias must have shape (last_dim,)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = Tensor((gain.data * xhat + bias.data).astype(xd.dtype))

    def backfn(g):
        dgain = (g * xhat).reshape(-1, xd.shape[-1]).sum(axis=0)
        dbias = g.reshape(-1, xd.shape[-1]).sum(axis=0)
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx.astype(xd.dtype), dgain, dbias

    return _record("layer_norm", out, (x, gain, bias), backfn)


def max_lastdim(a) -> Tensor:
    """Max over the last axis; gradient routes to the first argmax only."""
    a = _as_tensor(a)
    idx = np.argmax(a.data, axis=-1)
    out = Tensor(np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0])

    def backfn(g):
        gx = np.zeros_like(a.data)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return (gx,)

    return _record("max_lastdim", out, (a,), backfn)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of nothing")
    dtype = tensors[0].data.dtype
    if any(t.data.dtype != dtype for t in tensors):
        raise TypeError("concat dtype mismatch")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backfn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", out, tuple(tensors), backfn)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    out = Tensor(a.data.reshape(shape))
    return _record("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.data, axes))
    return _record("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def index_select(a, indices, axis: int = 0) -> Tensor:
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(np.take(a.data, idx, axis=axis))

    def backfn(g):
        gx = np.zeros_like(a.data)
        moved = np.moveaxis(gx, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _record("index_select", out, (a,), backfn)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def backfn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.data.dtype).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).astype(a.data.dtype).copy(),)

    return _record("sum", out, (a,), backfn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.size if axis is None else a.shape[axis]
    scale = 1.0 / count

    def backfn(g):
        if axis is None:
            return (np.broadcast_to(g * scale, a.shape).astype(a.data.dtype).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg * scale, a.shape).astype(a.data.dtype).copy(),)

    return _record("mean", out, (a,), backfn)


def backward(loss: Tensor) -> None:
    """Reverse pass from a scalar loss; populates .grad and clears the tape."""
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ValueError("backward requires a scalar Tensor")
    if not np.isfinite(loss.data).all():
        _state.tape.clear()
        raise FloatingPointError("non-finite loss")
    tape = _state.tape
    loss.grad = np.ones_like(loss.data)
    try:
        for node in reversed(tape.nodes):
            g = node.out.grad
            if g is None:
                continue
            grads = node.backfn(g)
            if _fault_op is not None and node.op == _fault_op:
                grads = tuple(None if gr is None else gr * 1.5 for gr in grads)
            for t, gt in zip(node.inputs, grads):
                if gt is None or not t.requires_grad:
                    continue
                gt = np.asarray(gt, dtype=t.data.dtype).reshape(t.shape)
                t.grad = gt if t.grad is None else t.grad + gt
    finally:
        tape.clear()


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    f must be a deterministic scalar-valued function of x, evaluated in
    float64. The numeric side never touches the tape.
    """
    if x.data.dtype != np.float64:
        raise ValueError("grad_check requires a float64 input")
    x.requires_grad = True
    x.grad = None
    out = f(x)
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(x).data)
            flat[i] = orig - eps
            lo = float(f(x).data)
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * eps)
    numeric = numeric.reshape(x.shape)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
