"""Small trainable modules composed from the autodiff op set.

Modules hold their parameters as ``Tensor``s with ``requires_grad=True`` and
expose them through ``params()``.  Every ``__call__`` accepts ``frozen=True``
to run the same computation with detached weights: gradients then flow
through the module to its *inputs* but never into its parameters.  The
disentangling loss relies on that to update only the layer-mixing logits.

All sequence inputs are batched as (B, T, D).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def _use(param: Tensor, frozen: bool) -> Tensor:
    return param.detach() if frozen else param


class Linear:
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True, scale: float | None = None):
        scale = (1.0 / np.sqrt(d_in)) if scale is None else scale
        self.w = Tensor(rng.standard_normal((d_in, d_out)).astype(np.float32) * scale,
                        requires_grad=True)
        self.b = Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True) if bias else None

    def __call__(self, x, frozen: bool = False):
        out = ad.matmul(x, _use(self.w, frozen))
        if self.b is not None:
            out = out + _use(self.b, frozen)
        return out

    def params(self):
        return [self.w] if self.b is None else [self.w, self.b]


class LayerNorm:
    def __init__(self, dim: int):
        self.gamma = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)

    def __call__(self, x, frozen: bool = False):
        return ad.layer_norm(x, _use(self.gamma, frozen), _use(self.beta, frozen))

    def params(self):
        return [self.gamma, self.beta]


class Embedding:
    def __init__(self, rng, count: int, dim: int, scale: float = 0.05):
        self.weight = Tensor(rng.standard_normal((count, dim)).astype(np.float32) * scale,
                             requires_grad=True)

    def __call__(self, ids, frozen: bool = False):
        return ad.embedding(_use(self.weight, frozen), ids)

    def params(self):
        return [self.weight]


class MultiHeadSelfAttention:
    def __init__(self, rng, dim: int, heads: int):
        if dim % heads:
            raise ValueError(f"attention dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.wq = Linear(rng, dim, dim, bias=False)
        self.wk = Linear(rng, dim, dim, bias=False)
        self.wv = Linear(rng, dim, dim, bias=False)
        self.wo = Linear(rng, dim, dim, bias=False)

    def __call__(self, x, causal: bool, frozen: bool = False):
        b, t, d = x.shape
        h, dk = self.heads, self.dim // self.heads

        def split(z):  # (B,T,D) -> (B,H,T,dk)
            return ad.transpose(ad.reshape(z, (b, t, h, dk)), (0, 2, 1, 3))

        q = split(self.wq(x, frozen))
        k = split(self.wk(x, frozen))
        v = split(self.wv(x, frozen))
        mixed = ad.attention(q, k, v, causal=causal)
        merged = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (b, t, d))
        return self.wo(merged, frozen)

    def params(self):
        return self.wq.params() + self.wk.params() + self.wv.params() + self.wo.params()


class TransformerBlock:
    """Pre-layer-norm block: attention then a tanh MLP, both residual."""

    def __init__(self, rng, dim: int, heads: int, ff_dim: int):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(rng, dim, heads)
        self.ln2 = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, ff_dim)
        self.fc2 = Linear(rng, ff_dim, dim)

    def __call__(self, x, causal: bool, frozen: bool = False):
        x = x + self.attn(self.ln1(x, frozen), causal, frozen)
        return x + self.fc2(ad.tanh(self.fc1(self.ln2(x, frozen), frozen)), frozen)

    def params(self):
        return (self.ln1.params() + self.attn.params() + self.ln2.params()
                + self.fc1.params() + self.fc2.params())


def shift_frames(x, offset: int):
    """Shift (B, T, D) along T by ``offset`` frames, zero-filling the edge."""
    b, t, d = x.shape
    if offset == 0:
        return x
    pad = Tensor(np.zeros((b, abs(offset), d), dtype=np.float32))
    if offset > 0:  # output[t] = x[t - offset]
        return ad.concat([pad, x[:, : t - offset]], axis=1)
    return ad.concat([x[:, -offset:], pad], axis=1)


class TemporalConv3:
    """Width-3 temporal convolution with full channel mixing, zero-padded."""

    def __init__(self, rng, d_in: int, d_out: int):
        self.prev = Linear(rng, d_in, d_out, bias=False)
        self.cur = Linear(rng, d_in, d_out)
        self.next = Linear(rng, d_in, d_out, bias=False)

    def __call__(self, x, frozen: bool = False):
        return (self.cur(x, frozen)
                + self.prev(shift_frames(x, 1), frozen)
                + self.next(shift_frames(x, -1), frozen))

    def params(self):
        return self.prev.params() + self.cur.params() + self.next.params()


def collect_params(*modules):
    out = []
    for m in modules:
        out.extend(m.params())
    return out
