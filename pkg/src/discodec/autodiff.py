"""Reverse-mode automatic differentiation on dense float32 numpy arrays.

The engine is deliberately small: a ``Tensor`` wraps an ndarray, records the
ops applied to it, and ``grad`` walks the recorded graph once in reverse
topological order.  Everything downstream (codec, token LM, probes) is built
from the op set in this file, so every op here carries a closed-form or
composed backward and is covered by finite-difference tests.

Conventions:
  * all tensor data is float32, row-major;
  * graphs are single-use: calling ``grad`` consumes the graph and frees the
    recorded closures, a second call on the same loss raises;
  * gradient accumulation is additive, so shared subexpressions work;
  * ops built while ``no_grad()`` is active record nothing.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

_f32 = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / sampling)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_f32)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._consumed = False

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """Same values, cut off from the graph (shares the underlying array)."""
        return Tensor(self.data)

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return pow_scalar(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    # -- reductions / shaping (method sugar) --------------------------------
    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def tanh(self):
        return tanh(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple, backward) -> Tensor:
    """Create an op output, recording the closure only when it can matter."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    # grads are only ever reassigned, never mutated in place, so adopting the
    # incoming array without a copy is safe
    if t.grad is None:
        t.grad = g.astype(_f32, copy=False)
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def _check_broadcast(name: str, a: np.ndarray, b: np.ndarray):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{name}: cannot broadcast shapes {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    out = _node(a.data + b.data, (a, b), None)

    def backward():
        if a.requires_grad:
            _accum(a, _unbroadcast(out.grad, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(out.grad, b.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    out = _node(a.data * b.data, (a, b), None)

    def backward():
        if a.requires_grad:
            _accum(a, _unbroadcast(out.grad * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(out.grad * a.data, b.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a.data, b.data)
    out = _node(a.data / b.data, (a, b), None)

    def backward():
        if a.requires_grad:
            _accum(a, _unbroadcast(out.grad / b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-out.grad * a.data / (b.data * b.data), b.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


def pow_scalar(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    c = float(exponent)
    out = _node(a.data ** _f32(c), (a,), None)

    def backward():
        if a.requires_grad:
            _accum(a, out.grad * _f32(c) * a.data ** _f32(c - 1.0))

    out._backward = backward if out.requires_grad else None
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    out = _node(y, (a,), None)

    def backward():
        if a.requires_grad:
            _accum(a, out.grad * (1.0 - y * y))

    out._backward = backward if out.requires_grad else None
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    out = _node(y, (a,), None)

    def backward():
        if a.requires_grad:
            _accum(a, out.grad * y)

    out._backward = backward if out.requires_grad else None
    return out


def absolute(a) -> Tensor:
    """|a| with the sign subgradient (0 at exactly 0)."""
    a = as_tensor(a)
    out = _node(np.abs(a.data), (a,), None)

    def backward():
        if a.requires_grad:
            _accum(a, out.grad * np.sign(a.data))

    out._backward = backward if out.requires_grad else None
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    out = _node(np.log(a.data), (a,), None)

    def backward():
        if a.requires_grad:
            _accum(a, out.grad / a.data)

    out._backward = backward if out.requires_grad else None
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")
    out = _node(a.data @ b.data, (a, b), None)

    def backward():
        if a.requires_grad:
            _accum(a, _unbroadcast(out.grad @ b.data.swapaxes(-1, -2), a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(a.data.swapaxes(-1, -2) @ out.grad, b.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), None)

    def backward():
        if a.requires_grad:
            g = out.grad
            if not keepdims and axis is not None:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = _node(a.data.mean(axis=axis, keepdims=keepdims, dtype=_f32), (a,), None)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

    def backward():
        if a.requires_grad:
            g = out.grad
            if not keepdims and axis is not None:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.data.shape) / _f32(count))

    out._backward = backward if out.requires_grad else None
    return out


def variance(a, axis=None, keepdims=False) -> Tensor:
    """Population variance along ``axis`` (composed, differentiable)."""
    a = as_tensor(a)
    mu = reduce_mean(a, axis, keepdims=True)
    dev = add(a, mul(mu, -1.0))
    v = reduce_mean(mul(dev, dev), axis, keepdims)
    return v


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = _node(a.data.reshape(shape), (a,), None)

    def backward():
        if a.requires_grad:
            _accum(a, out.grad.reshape(a.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = _node(np.transpose(a.data, axes), (a,), None)
    inverse = None if axes is None else tuple(np.argsort(axes))

    def backward():
        if a.requires_grad:
            _accum(a, np.transpose(out.grad, inverse))

    out._backward = backward if out.requires_grad else None
    return out


def take(a, idx) -> Tensor:
    """Indexing/slicing; backward scatter-adds into the source positions."""
    a = as_tensor(a)
    out = _node(a.data[idx], (a,), None)

    def backward():
        if a.requires_grad:
            g = np.zeros_like(a.data)
            np.add.at(g, idx, out.grad)
            _accum(a, g)

    out._backward = backward if out.requires_grad else None
    return out


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), None)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward():
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * out.grad.ndim
                sl[axis] = slice(int(lo), int(hi))
                _accum(t, out.grad[tuple(sl)])

    out._backward = backward if out.requires_grad else None
    return out


def softmax(a, axis=-1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _node(y, (a,), None)

    def backward():
        if a.requires_grad:
            gy = out.grad
            _accum(a, (gy - (gy * y).sum(axis=axis, keepdims=True)) * y)

    out._backward = backward if out.requires_grad else None
    return out


def cross_entropy_logits(logits, targets, weights=None) -> Tensor:
    """Mean negative log-softmax probability of integer targets, rows of a N×V matrix.

    With ``weights`` (nonnegative, positive sum) the mean is weighted:
    Σ wᵢ·CEᵢ / Σ wᵢ.  Zero-weight rows drop out of value and gradient.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy_logits: expected N×V logits, got {logits.shape}")
    t = np.asarray(targets, dtype=np.intp)
    n, v = logits.shape
    if t.shape != (n,):
        raise ValueError(f"cross_entropy_logits: expected {n} targets, got shape {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise ValueError(f"cross_entropy_logits: target index out of range [0, {v})")
    if weights is None:
        w = np.full(n, 1.0 / max(n, 1), dtype=_f32)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (n,):
            raise ValueError(f"cross_entropy_logits: expected {n} weights, got shape {w.shape}")
        if w.min() < 0 or w.sum() <= 0:
            raise ValueError("cross_entropy_logits: weights must be nonnegative with positive sum")
        w = (w / w.sum()).astype(_f32)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    losses = np.log(e.sum(axis=1)) - z[np.arange(n), t]
    out = _node(np.asarray((losses * w).sum(), dtype=_f32), (logits,), None)

    def backward():
        if logits.requires_grad:
            g = p.copy()
            g[np.arange(n), t] -= 1.0
            _accum(logits, g * (out.grad * w[:, None]))

    out._backward = backward if out.requires_grad else None
    return out


def embedding(weight, ids) -> Tensor:
    """Row lookup ``weight[ids]``; gradients scatter-add into the table."""
    weight = as_tensor(weight)
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ValueError(f"embedding: index out of range [0, {weight.shape[0]})")
    out = _node(weight.data[ids], (weight,), None)

    def backward():
        if weight.requires_grad:
            g = np.zeros_like(weight.data)
            np.add.at(g, ids, out.grad)
            _accum(weight, g)

    out._backward = backward if out.requires_grad else None
    return out


def gradient_reversal(a, scale: float = 1.0) -> Tensor:
    """Identity forward; backward multiplies the upstream gradient by -scale."""
    a = as_tensor(a)
    if scale <= 0:
        raise ValueError("gradient_reversal: scale must be positive")
    out = _node(a.data, (a,), None)

    def backward():
        if a.requires_grad:
            _accum(a, out.grad * _f32(-scale))

    out._backward = backward if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# composed ops
# ---------------------------------------------------------------------------

def cosine_similarity(a, b) -> Tensor:
    """Cosine of two equal-shape vectors; rejects near-zero norms."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"cosine_similarity: shapes differ, {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na < 1e-12 or nb < 1e-12:
        raise ValueError("cosine_similarity: degenerate vector with norm below 1e-12")
    dot = reduce_sum(mul(a, b))
    denom = mul(pow_scalar(reduce_sum(mul(a, a)), 0.5), pow_scalar(reduce_sum(mul(b, b)), 0.5))
    return div(dot, denom)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x = as_tensor(x)
    mu = reduce_mean(x, axis=-1, keepdims=True)
    dev = x - mu
    var = reduce_mean(mul(dev, dev), axis=-1, keepdims=True)
    inv = pow_scalar(var + eps, -0.5)
    return mul(dev, inv) * gamma + beta


def unit_normalize(x, axis=-1, eps: float = 1e-12) -> Tensor:
    """Scale slices along ``axis`` to unit Euclidean norm."""
    x = as_tensor(x)
    norm = pow_scalar(reduce_sum(mul(x, x), axis=axis, keepdims=True) + eps, 0.5)
    return div(x, norm)


def attention(q, k, v, causal: bool) -> Tensor:
    """Scaled dot-product attention over the last two axes of q/k/v.

    Shapes (..., T, d); with ``causal`` an upper-triangular additive mask
    keeps position t from attending to positions > t.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.shape[-1]
    scores = matmul(q, transpose(k, _swap_last(k.ndim))) * (1.0 / float(np.sqrt(d)))
    if causal:
        t_q, t_k = scores.shape[-2], scores.shape[-1]
        mask = np.triu(np.full((t_q, t_k), -1e9, dtype=_f32), k=1)
        scores = scores + Tensor(mask)
    return matmul(softmax(scores, axis=-1), v)


def _swap_last(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


# ---------------------------------------------------------------------------
# graph traversal and gradients
# ---------------------------------------------------------------------------

@dataclass
class Graph:
    """Topologically ordered record of one forward pass (leaves first)."""

    nodes: list = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order, visited, stack = [], set(), [(root, False)]
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
        return cls(order)


def grad(loss: Tensor, params) -> list:
    """Reverse-mode gradients of a scalar loss for each tensor in ``params``.

    Parameters not reachable from the loss get zero gradients.  The recorded
    graph is consumed: a second call on the same loss raises.
    """
    params = list(params)
    if loss.data.shape != ():
        raise ValueError(f"grad: loss must be scalar, got shape {loss.data.shape}")
    if loss._consumed:
        raise RuntimeError("grad: graph already consumed by a previous backward pass")
    if not loss.requires_grad:
        return [np.zeros_like(p.data) for p in params]
    graph = Graph.trace(loss)
    loss.grad = np.ones((), dtype=_f32)
    for node in reversed(graph.nodes):
        if node._backward is not None:
            node._backward()
            node._backward = None  # free closures as we go
        node._consumed = True
    out = []
    for p in params:
        out.append(p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
    for node in graph.nodes:
        node.grad = None
    return out


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """Decoupled-weight-decay Adam moments plus hyperparameters."""

    lr: float
    beta1: float
    beta2: float
    eps: float
    weight_decay: float
    step: int
    m: list
    v: list

    @classmethod
    def init(cls, params, lr: float = 1e-4, betas=(0.8, 0.99), eps: float = 1e-8,
             weight_decay: float = 0.01) -> "OptimizerState":
        params = list(params)
        return cls(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                   weight_decay=weight_decay, step=0,
                   m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params])


def adamw_step(params, grads, state: OptimizerState):
    """One AdamW update, in place on ``params``; returns (params, state)."""
    params, grads = list(params), list(grads)
    if len(params) != len(state.m):
        raise ValueError(f"adamw_step: {len(params)} params but state holds {len(state.m)}")
    state.step += 1
    t = state.step
    b1, b2 = _f32(state.beta1), _f32(state.beta2)
    bc1 = _f32(1.0 - state.beta1 ** t)
    bc2 = _f32(1.0 - state.beta2 ** t)
    lr, wd, eps = _f32(state.lr), _f32(state.weight_decay), _f32(state.eps)
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ValueError(f"adamw_step: gradient shape {g.shape} does not match parameter {p.data.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= lr * (m_hat / (np.sqrt(v_hat) + eps) + wd * p.data)
    return params, state
