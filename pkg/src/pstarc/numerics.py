"""Dense float64 arithmetic on a small reverse-mode tape, plus optimizers.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. Every op
below takes :class:`Node` operands (raw arrays are wrapped as constants),
computes its forward value eagerly and records a closure mapping the
upstream gradient to one gradient per parent.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

LOG_EPS = 1e-6
NORM_EPS = 1e-12
BN_EPS = 1e-5


def as_matrix(x) -> np.ndarray:
    """Coerce scalars, vectors and nested lists to a 2-D float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"expected at most 2 dimensions, got shape {arr.shape}")
    return arr


class Node:
    """A value on the tape together with its accumulated gradient."""

    __slots__ = ("value", "grad", "op", "parents", "_backward")

    def __init__(self, value, op="leaf", parents=(), backward=None):
        self.value = as_matrix(value)
        self.grad = np.zeros_like(self.value)
        self.op = op
        self.parents: tuple[Node, ...] = tuple(parents)
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray]] | None = backward

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape})"

    # operator sugar; keeps loss code readable
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), scale(self, -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def leaf(value) -> Node:
    """Trainable (or otherwise differentiated) input; gradient is read after backward."""
    return Node(np.array(value, dtype=np.float64, copy=True))


def constant(value) -> Node:
    """Wrap a value whose gradient nobody reads (detached)."""
    return Node(value, op="const")


def detach(node: Node) -> Node:
    return Node(node.value.copy(), op="const")


def _wrap(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _check_finite(value: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite value produced by {op}")
    return value


def _make(value, op, parents, backward) -> Node:
    return Node(_check_finite(value, op), op=op, parents=parents, backward=backward)


def _broadcast_shape(a: np.ndarray, b: np.ndarray, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- tape ops


def matmul(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _make(av @ bv, "matmul", (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a.value, b.value, "add")
    sa, sb = a.shape, b.shape
    return _make(
        a.value + b.value, "add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def scale(a, s: float) -> Node:
    a = _wrap(a)
    s = float(s)
    return _make(a.value * s, "scale", (a,), lambda g: (g * s,))


def mul(a, b) -> Node:
    """Elementwise product with row/column broadcasting."""
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a.value, b.value, "mul")
    av, bv = a.value, b.value
    return _make(
        av * bv,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def transpose(a) -> Node:
    a = _wrap(a)
    return _make(a.value.T.copy(), "transpose", (a,), lambda g: (g.T,))


def relu(a) -> Node:
    a = _wrap(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), "relu", (a,), lambda g: (g * mask,))


def tanh(a) -> Node:
    a = _wrap(a)
    out = np.tanh(a.value)
    return _make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row softmax on a raw array (max-shifted)."""
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax(a) -> Node:
    a = _wrap(a)
    p = softmax_rows(a.value)

    def back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, "softmax", (a,), back)


def log(a, eps: float = LOG_EPS) -> Node:
    """Natural log of ``a + eps``."""
    if eps < 0:
        raise ContractError("log: eps must be non-negative")
    a = _wrap(a)
    shifted = a.value + eps
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(shifted)
    return _make(out, "log", (a,), lambda g: (g / shifted,))


def row_sum(a) -> Node:
    a = _wrap(a)
    n = a.shape[1]
    return _make(
        a.value.sum(axis=1, keepdims=True), "row_sum", (a,), lambda g: (np.repeat(g, n, axis=1),)
    )


def col_mean(a) -> Node:
    a = _wrap(a)
    m = a.shape[0]
    return _make(
        a.value.mean(axis=0, keepdims=True),
        "col_mean",
        (a,),
        lambda g: (np.repeat(g / m, m, axis=0),),
    )


def mean(a) -> Node:
    a = _wrap(a)
    shape, size = a.shape, a.value.size
    return _make(
        np.array([[a.value.mean()]]), "mean", (a,), lambda g: (np.full(shape, g[0, 0] / size),)
    )


def total(a) -> Node:
    a = _wrap(a)
    shape = a.shape
    return _make(np.array([[a.value.sum()]]), "sum", (a,), lambda g: (np.full(shape, g[0, 0]),))


def row_l2_normalize(a) -> Node:
    """``x / max(||x||, 1e-12)`` per row."""
    a = _wrap(a)
    norms = np.sqrt((a.value * a.value).sum(axis=1, keepdims=True))
    clipped = np.maximum(norms, NORM_EPS)
    y = a.value / clipped
    active = norms > NORM_EPS

    def back(g):
        radial = np.where(active, (g * y).sum(axis=1, keepdims=True), 0.0)
        return ((g - y * radial) / clipped,)

    return _make(y, "l2_normalize", (a,), back)


def batch_norm(x, gamma, beta, running_mean, running_var, training: bool, eps: float = BN_EPS):
    """Normalize columns of ``x`` then apply ``gamma * xhat + beta``.

    Training mode normalizes with the biased batch variance and is
    differentiated through the batch statistics; eval mode uses the given
    running statistics as constants. Running statistics are not touched here,
    see :func:`bn_running_update`.
    """
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    d = x.shape[1]
    if gamma.shape != (1, d) or beta.shape != (1, d):
        raise DimensionError(f"batch_norm: affine shapes {gamma.shape}, {beta.shape} for width {d}")
    xv = x.value
    if training:
        mu = xv.mean(axis=0, keepdims=True)
        var = xv.var(axis=0, keepdims=True)
    else:
        mu = as_matrix(running_mean).reshape(1, d)
        var = as_matrix(running_var).reshape(1, d)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    gv = gamma.value
    n = xv.shape[0]

    def back(g):
        dgamma = (g * xhat).sum(axis=0, keepdims=True)
        dbeta = g.sum(axis=0, keepdims=True)
        gx = g * gv
        if training:
            dx = inv / n * (n * gx - gx.sum(axis=0, keepdims=True) - xhat * (gx * xhat).sum(axis=0, keepdims=True))
        else:
            dx = gx * inv
        return dx, dgamma, dbeta

    return _make(xhat * gv + beta.value, "batch_norm", (x, gamma, beta), back)


def bn_running_update(running_mean, running_var, batch: np.ndarray, momentum: float = 0.1):
    """EMA update of running statistics; variance uses the unbiased estimator."""
    n = batch.shape[0]
    mu = batch.mean(axis=0, keepdims=True)
    var = batch.var(axis=0, keepdims=True, ddof=1) if n > 1 else np.zeros_like(mu)
    new_mean = (1.0 - momentum) * running_mean + momentum * mu
    new_var = (1.0 - momentum) * running_var + momentum * var
    return new_mean, new_var


def _topological(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into ``grad`` of every reachable node.

    Gradients add onto whatever is already stored, so calling this twice on
    one graph doubles every gradient.
    """
    if root.shape != (1, 1):
        raise ContractError(f"backward needs a 1x1 root, got {root.shape}")
    order = _topological(root)
    pending: dict[int, np.ndarray] = {id(root): np.ones((1, 1))}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


# ------------------------------------------------------------- optimizers


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, shape, **kw) -> "AdamState":
        return cls(m=np.zeros(shape), v=np.zeros(shape), **kw)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> np.ndarray:
    """One bias-corrected Adam update. Advances ``state`` and returns the new parameter."""
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise DimensionError(f"adam_step: param {param.shape}, grad {grad.shape}, state {state.m.shape}")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    return param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class SgdMomentumState:
    buf: np.ndarray
    lr: float = 5e-4
    momentum: float = 0.9
    nesterov: bool = True

    @classmethod
    def zeros(cls, shape, **kw) -> "SgdMomentumState":
        return cls(buf=np.zeros(shape), **kw)


def sgd_nesterov_step(param: np.ndarray, grad: np.ndarray, state: SgdMomentumState) -> np.ndarray:
    """Momentum SGD in the common-framework form.

    buf <- momentum * buf + grad, then
    param <- param - lr * (grad + momentum * buf) with Nesterov,
    param <- param - lr * buf without.
    """
    if param.shape != grad.shape or state.buf.shape != param.shape:
        raise DimensionError(f"sgd step: param {param.shape}, grad {grad.shape}, buf {state.buf.shape}")
    state.buf = state.momentum * state.buf + grad
    step = grad + state.momentum * state.buf if state.nesterov else state.buf
    return param - state.lr * step


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one entry at a time."""
    if h <= 0:
        raise ContractError("finite_diff_grad: h must be positive")
    x = as_matrix(x).copy()
    out = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = float(f(x))
        x[idx] = orig - h
        fm = float(f(x))
        x[idx] = orig
        out[idx] = (fp - fm) / (2.0 * h)
    return out


def relative_error(analytic, numeric, floor: float = 1e-4) -> float:
    """Largest entrywise ``|a - n| / max(|a|, |n|, floor)``."""
    a, n = np.asarray(analytic, dtype=float), np.asarray(numeric, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
