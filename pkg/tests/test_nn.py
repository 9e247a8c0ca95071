"""Module-level checks for the nn building blocks."""

import numpy as np
import pytest

import discodec.autodiff as ad
from discodec.autodiff import Tensor
from discodec.nn import (
    Embedding,
    LayerNorm,
    Linear,
    MultiHeadSelfAttention,
    TemporalConv3,
    TransformerBlock,
    collect_params,
    shift_frames,
)

from adcheck import numerical_grads, relative_error


def _fd_check(build, trials=3, tol=1e-3):
    for trial in range(trials):
        rng = np.random.default_rng(100 + trial)
        forward, params = build(rng)
        analytic = ad.grad(forward(), params)
        numeric = numerical_grads(forward, params)
        a = np.concatenate([g.ravel().astype(np.float64) for g in analytic])
        n = np.concatenate([g.ravel().astype(np.float64) for g in numeric])
        assert relative_error(a, n) < tol


class TestLinear:
    def test_shapes(self):
        rng = np.random.default_rng(0)
        lin = Linear(rng, 5, 3)
        out = lin(Tensor(np.ones((2, 4, 5), np.float32)))
        assert out.shape == (2, 4, 3)

    def test_no_bias(self):
        lin = Linear(np.random.default_rng(0), 4, 4, bias=False)
        assert len(lin.params()) == 1
        assert lin(Tensor(np.zeros((1, 4), np.float32))).data.max() == 0.0


class TestFrozen:
    def test_frozen_params_get_no_grads(self):
        rng = np.random.default_rng(1)
        lin = Linear(rng, 4, 4)
        x = Tensor(rng.standard_normal((2, 4)).astype(np.float32), requires_grad=True)
        loss = ad.reduce_mean(lin(x, frozen=True) ** 2)
        gx, gw, gb = ad.grad(loss, [x, lin.w, lin.b])
        assert np.abs(gx).max() > 0.0
        assert np.all(gw == 0.0) and np.all(gb == 0.0)

    def test_frozen_matches_unfrozen_forward(self):
        rng = np.random.default_rng(2)
        blk = TransformerBlock(rng, 8, 2, 16)
        x = Tensor(rng.standard_normal((1, 3, 8)).astype(np.float32))
        with ad.no_grad():
            a = blk(x, causal=False).data
            b = blk(x, causal=False, frozen=True).data
        assert np.array_equal(a, b)


class TestAttention:
    def test_bad_head_count(self):
        with pytest.raises(ValueError, match="not divisible"):
            MultiHeadSelfAttention(np.random.default_rng(0), 6, 4)

    def test_causal_masking(self):
        rng = np.random.default_rng(3)
        attn = MultiHeadSelfAttention(rng, 8, 2)
        x = rng.standard_normal((1, 5, 8)).astype(np.float32)
        y = x.copy()
        y[0, 3:] += 1.0  # perturb the future
        with ad.no_grad():
            a = attn(Tensor(x), causal=True).data
            b = attn(Tensor(y), causal=True).data
        assert np.allclose(a[0, :3], b[0, :3], atol=1e-6)
        assert not np.allclose(a[0, 3:], b[0, 3:], atol=1e-4)

    def test_non_causal_sees_everything(self):
        rng = np.random.default_rng(4)
        attn = MultiHeadSelfAttention(rng, 8, 2)
        x = rng.standard_normal((1, 5, 8)).astype(np.float32)
        y = x.copy()
        y[0, 4] += 1.0
        with ad.no_grad():
            a = attn(Tensor(x), causal=False).data
            b = attn(Tensor(y), causal=False).data
        assert not np.allclose(a[0, 0], b[0, 0], atol=1e-6)


class TestShiftAndConv:
    def test_shift_values(self):
        x = Tensor(np.arange(1, 7, dtype=np.float32).reshape(1, 3, 2))
        fwd = shift_frames(x, 1).data
        assert np.array_equal(fwd, [[[0, 0], [1, 2], [3, 4]]])
        back = shift_frames(x, -1).data
        assert np.array_equal(back, [[[3, 4], [5, 6], [0, 0]]])
        assert shift_frames(x, 0) is x

    def test_conv_matches_explicit_loop(self):
        rng = np.random.default_rng(5)
        conv = TemporalConv3(rng, 3, 2)
        x = rng.standard_normal((1, 6, 3)).astype(np.float32)
        with ad.no_grad():
            out = conv(Tensor(x)).data
        wp, wc, bc, wn = conv.prev.w.data, conv.cur.w.data, conv.cur.b.data, conv.next.w.data
        padded = np.concatenate([np.zeros((1, 3)), x[0], np.zeros((1, 3))], axis=0)
        for t in range(6):
            ref = padded[t] @ wp + padded[t + 1] @ wc + bc + padded[t + 2] @ wn
            assert np.allclose(out[0, t], ref, atol=1e-5)


class TestGradients:
    def test_transformer_block_fd(self):
        def build(rng):
            blk = TransformerBlock(rng, dim=6, heads=2, ff_dim=8)
            x = Tensor((rng.standard_normal((2, 3, 6)) * 0.5).astype(np.float32),
                       requires_grad=True)
            return (lambda: ad.reduce_mean(blk(x, causal=True))), [x] + blk.params()

        _fd_check(build)

    def test_temporal_conv_fd(self):
        def build(rng):
            conv = TemporalConv3(rng, 5, 4)
            x = Tensor((rng.standard_normal((2, 4, 5)) * 0.5).astype(np.float32),
                       requires_grad=True)
            return (lambda: ad.reduce_mean(conv(x) ** 2)), [x] + conv.params()

        _fd_check(build)


def test_collect_params():
    rng = np.random.default_rng(6)
    a, b = Linear(rng, 2, 2), LayerNorm(4)
    assert collect_params(a, b) == a.params() + b.params()


def test_embedding_lookup():
    emb = Embedding(np.random.default_rng(7), 10, 4)
    out = emb(np.array([[1, 3], [3, 9]]))
    assert out.shape == (2, 2, 4)
    assert np.array_equal(out.data[0, 1], out.data[1, 0])
