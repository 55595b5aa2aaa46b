"""A small reverse-mode differentiation core on top of numpy.

Only the operators the policy needs are provided. Every operator checks
that its output is finite and raises :class:`NonFiniteError` otherwise.
Gradients are recorded only while grad mode is on (the default); use
:func:`no_grad` for rollouts and inference.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, NamedTuple

import numpy as np

from .errors import ContractViolation, NonFiniteError

_grad_enabled = True

# Masked logits are set to this value; exp() of it underflows to exactly 0.
MASK_VALUE = -1e30


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, _parents=(), _backward=None):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        if grad is None:
            if self.value.size != 1:
                raise ContractViolation("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.value)
        order, seen = [], set()
        stack = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.value.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.value.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)


def parameter(value) -> Tensor:
    return Tensor(value, requires_grad=True)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(value, parents, backward) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError("non-finite value produced in forward pass")
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(value, True, tuple(parents), backward)
    return Tensor(value)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.value.dtype)
    return _result(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.value.dtype)
    av, bv = a.value, b.value
    return _result(av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.value, (a,), lambda g: (-g,))


def getitem(a: Tensor, index) -> Tensor:
    def back(g):
        out = np.zeros_like(a.value)
        out[index] = g
        return (out,)
    return _result(a.value[index], (a,), back)


def linear(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w.T`` for ``x`` of shape (..., in) and ``w`` of shape (out, in)."""
    xv, wv = x.value, w.value
    if xv.shape[-1] != wv.shape[1]:
        raise ContractViolation(f"shape mismatch: input {xv.shape} vs weight {wv.shape}")

    def back(g):
        gx = g @ wv
        gw = g.reshape(-1, g.shape[-1]).T @ xv.reshape(-1, xv.shape[-1])
        return gx, gw
    return _result(xv @ wv.T, (x, w), back)


def take(table: Tensor, index) -> Tensor:
    """Row lookup: ``table[index]`` with shape ``index.shape + (d,)``."""
    index = np.asarray(index, dtype=np.int64)
    tv = table.value

    def back(g):
        return (_scatter_rows(tv, index.ravel(), g.reshape(-1, tv.shape[1])),)
    return _result(tv[index], (table,), back)


def _scatter_rows(like: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> np.ndarray:
    # sort + reduceat is much faster than np.add.at for many repeated rows
    out = np.zeros_like(like)
    if len(idx) == 0:
        return out
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]])
    out[sidx[starts]] = np.add.reduceat(rows[order], starts, axis=0)
    return out


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    value = np.concatenate([t.value for t in tensors], axis=axis)
    return _result(value, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.value)
    return _result(y, (x,), lambda g: (g * (1 - y * y),))


def _sigmoid(v):
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1 / (1 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.value)
    return _result(y, (x,), lambda g: (g * y * (1 - y),))


def relu(x: Tensor) -> Tensor:
    keep = x.value > 0
    return _result(x.value * keep, (x,), lambda g: (g * keep,))


def exp(x: Tensor) -> Tensor:
    # overflow is reported by the finiteness check, not as a warning
    with np.errstate(over="ignore"):
        y = np.exp(x.value)
    return _result(y, (x,), lambda g: (g * y,))


def rowdot(a: Tensor, q: Tensor) -> Tensor:
    """Batched matrix-vector product: (B, N, D) x (B, D) -> (B, N)."""
    av, qv = a.value, q.value
    if av.shape[-1] != qv.shape[-1] or av.shape[0] != qv.shape[0]:
        raise ContractViolation(f"shape mismatch: {av.shape} vs {qv.shape}")
    return _result(np.einsum("bnd,bd->bn", av, qv), (a, q),
                   lambda g: (g[:, :, None] * qv[:, None, :], np.einsum("bn,bnd->bd", g, av)))


def masked_fill(x: Tensor, mask: np.ndarray, value: float = MASK_VALUE) -> Tensor:
    """Keep entries where ``mask`` is true, replace the rest by ``value``."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, x.value, np.asarray(value, dtype=x.value.dtype))
    return _result(out, (x,), lambda g: (g * mask,))


def log_softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Log-softmax over the last axis; masked-out entries get probability 0."""
    if mask is not None:
        x = masked_fill(x, mask)
    v = x.value
    shifted = v - v.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    p = np.exp(y)
    return _result(y, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def pick(x: Tensor, index) -> Tensor:
    """``x[b, index[b]]`` for a (B, N) tensor."""
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(len(index))

    def back(g):
        out = np.zeros_like(x.value)
        out[rows, index] = g
        return (out,)
    return _result(x.value[rows, index], (x,), back)


def total(x: Tensor) -> Tensor:
    return _result(np.asarray(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def sum_axis(x: Tensor, axis: int) -> Tensor:
    return _result(x.value.sum(axis=axis), (x,),
                   lambda g: (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),))


def softmax(scores) -> np.ndarray:
    """Max-shifted softmax over the last axis of a plain array."""
    s = np.asarray(scores, dtype=float) if not isinstance(scores, np.ndarray) else scores
    z = np.exp(s - s.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- networks


class RecurrentCellParams(NamedTuple):
    w_ih: Tensor  # (4h, in)
    w_hh: Tensor  # (4h, h)
    bias: Tensor  # (4h,)

    @property
    def hidden_size(self) -> int:
        return self.w_hh.shape[1]


def recurrent_step(params: RecurrentCellParams, h: Tensor, c: Tensor, x: Tensor):
    """One LSTM cell step with gate order (input, forget, candidate, output).

    Returns ``(hidden, cell)`` tensors. Implemented as a single fused node
    with a hand-written backward pass.
    """
    w_ih, w_hh, b = params.w_ih.value, params.w_hh.value, params.bias.value
    hs = w_hh.shape[1]
    xv, hv, cv = x.value, h.value, c.value
    if xv.shape[-1] != w_ih.shape[1] or hv.shape[-1] != hs or cv.shape[-1] != hs \
            or w_ih.shape[0] != 4 * hs:
        raise ContractViolation(
            f"recurrent cell shape mismatch: x{xv.shape} h{hv.shape} c{cv.shape} W{w_ih.shape}")
    z = xv @ w_ih.T + hv @ w_hh.T + b
    i = _sigmoid(z[..., :hs])
    f = _sigmoid(z[..., hs:2 * hs])
    g = np.tanh(z[..., 2 * hs:3 * hs])
    o = _sigmoid(z[..., 3 * hs:])
    c_new = f * cv + i * g
    tc = np.tanh(c_new)
    h_new = o * tc

    parents = (x, h, c, params.w_ih, params.w_hh, params.bias)
    # Both outputs share one gradient pathway; gradients arriving at either
    # output are accumulated on a joint node.
    joint_value = np.concatenate([h_new, c_new], axis=-1)

    def back(gj):
        gh, gc = gj[..., :hs], gj[..., hs:]
        gc = gc + gh * o * (1 - tc * tc)
        go = gh * tc
        dz = np.concatenate([
            gc * g * i * (1 - i),
            gc * cv * f * (1 - f),
            gc * i * (1 - g * g),
            go * o * (1 - o),
        ], axis=-1)
        dz2 = dz.reshape(-1, 4 * hs)
        return (
            dz @ w_ih,
            dz @ w_hh,
            gc * f,
            dz2.T @ xv.reshape(-1, xv.shape[-1]),
            dz2.T @ hv.reshape(-1, hs),
            dz2.sum(axis=0),
        )

    joint = _result(joint_value, parents, back)
    return joint[..., :hs], joint[..., hs:]


def mlp2(x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """``w2 @ relu(w1 @ x)`` applied over the last axis."""
    return linear(relu(linear(x, w1)), w2)


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = 0.5 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_cell(rng: np.random.Generator, input_size: int, hidden_size: int, dtype=np.float32):
    """Fresh parameter arrays ``(w_ih, w_hh, bias)`` for :func:`recurrent_step`."""
    return (
        uniform_init(rng, (4 * hidden_size, input_size), input_size, dtype),
        uniform_init(rng, (4 * hidden_size, hidden_size), hidden_size, dtype),
        np.zeros(4 * hidden_size, dtype=dtype),
    )


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float = 0.001):
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if not lr > 0:
        raise ContractViolation("learning rate must be positive")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name!r}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        dt = p.dtype.type
        m *= dt(state.beta1)
        m += dt(1.0 - state.beta1) * g
        v *= dt(state.beta2)
        v += dt(1.0 - state.beta2) * (g * g)
        m_hat = m / dt(bc1)
        v_hat = v / dt(bc2)
        p -= dt(lr) * m_hat / (np.sqrt(v_hat) + dt(state.eps))
    return params, state


# ---------------------------------------------------------------- checking


def finite_diff_report(loss_fn: Callable[[Mapping[str, np.ndarray]], float],
                       params: Mapping[str, np.ndarray],
                       grads: Mapping[str, np.ndarray],
                       eps: float = 1e-4) -> dict[str, float]:
    """Per-tensor relative error between ``grads`` and central differences.

    The error of a tensor is ``max|analytic - numeric|`` divided by the
    larger of the two max-abs magnitudes (floored at 1e-12).
    """
    report = {}
    for name, p in params.items():
        numeric = np.zeros_like(p, dtype=np.float64)
        flat = p.reshape(-1)
        out = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = float(loss_fn(params))
            flat[j] = orig - eps
            down = float(loss_fn(params))
            flat[j] = orig
            out[j] = (up - down) / (2 * eps)
        analytic = np.asarray(grads.get(name, np.zeros_like(p)), dtype=np.float64)
        scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
        report[name] = float(np.abs(analytic - numeric).max(initial=0.0) / scale)
    return report


def finite_diff_check(loss_fn, params, eps: float = 1e-4, grads=None) -> float:
    """Worst per-tensor relative gradient error.

    ``loss_fn(params)`` returns the loss; if ``grads`` is omitted it must
    instead return ``(loss, grads)`` on its first call.
    """
    if grads is None:
        _, grads = loss_fn(params)
        fn = lambda p: loss_fn(p)[0]  # noqa: E731
    else:
        fn = loss_fn
    return max(finite_diff_report(fn, params, grads, eps).values(), default=0.0)
