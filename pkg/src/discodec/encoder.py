"""Frozen multi-layer encoder producing a stack of hidden states per frame.

The stack is built so that different layers carry different speaker/content
mixtures, which is what the learnable layer weighting downstream exploits:

  * layer 0 is a plain linear projection of the input frames and keeps the
    full-scale stationary speaker offset;
  * layer 1 keeps speaker information but is scaled down by ``LAYER1_GAIN``,
    so it dominates nothing in a weighted sum while still being linearly
    decodable on its own (linear probes are scale invariant);
  * layer 2 uses a zero-sum width-3 temporal kernel with reflect padding,
    which annihilates constant-in-time components exactly, so stationary
    speaker offsets never reach the deeper layers;
  * layers ``norm_from`` and up smooth rather than difference (a second
    high-pass would destroy the slow prosody contour) and are instance
    normalized over time, which strips the per-dimension mean and variance
    that the tanh nonlinearity could reintroduce from speaker timbre.

Everything is derived from one seed and immutable; none of these weights
belongs to any optimizer.
"""

from __future__ import annotations

import numpy as np

LAYER1_GAIN = 0.05


def _neighbor_indices(t: int):
    """Reflect-padded previous/next frame indices (edge-padded when t == 1)."""
    if t == 1:
        return np.array([0]), np.array([0])
    prev_idx = np.concatenate([[1], np.arange(t - 1)])
    next_idx = np.concatenate([np.arange(1, t), [t - 2]])
    return prev_idx, next_idx


class FrozenEncoder:
    def __init__(self, seed: int, d_in: int = 24, d_model: int = 32, layers: int = 6,
                 norm_from: int = 3):
        if layers < norm_from + 1:
            raise ValueError(f"need at least {norm_from + 1} layers, got {layers}")
        self.d_in, self.d_model = d_in, d_model
        self.num_layers, self.norm_from = layers, norm_from
        rng = np.random.default_rng([seed, 3])
        f32 = np.float32
        self.w0 = (rng.standard_normal((d_in, d_model)) / np.sqrt(d_in)).astype(f32)
        self.w = []
        for layer in range(1, layers):
            scale = 1.0 / np.sqrt(d_model)
            if layer == 2:
                # undo the layer-1 attenuation so the tanh stays active
                scale /= LAYER1_GAIN
            self.w.append((rng.standard_normal((d_model, d_model)) * scale).astype(f32))
        # depthwise width-3 kernels: layers 1 and 3+ smooth (taps sum to 1),
        # layer 2 differences (taps sum to 0 -> exact DC removal)
        taps = rng.uniform(0.5, 1.5, size=(layers - 1, 3, d_model))
        for k in range(layers - 1):
            if k == 1:
                taps[k] -= taps[k].mean(axis=0)
            else:
                taps[k] /= taps[k].sum(axis=0)
        self.taps = taps.astype(f32)

    def _conv(self, h: np.ndarray, layer: int) -> np.ndarray:
        prev_idx, next_idx = _neighbor_indices(len(h))
        k = self.taps[layer - 1]
        return h[prev_idx] * k[0] + h * k[1] + h[next_idx] * k[2]

    def encode_layers(self, features: np.ndarray) -> np.ndarray:
        """Returns the (L, T, D) float32 hidden-state stack."""
        x = np.asarray(features, dtype=np.float32)
        stack = [x @ self.w0]
        for layer in range(1, self.num_layers):
            h = self._conv(np.tanh(stack[-1] @ self.w[layer - 1]), layer)
            if layer == 1:
                h = h * np.float32(LAYER1_GAIN)
            elif layer >= self.norm_from:
                mu = h.mean(axis=0, keepdims=True)
                sd = h.std(axis=0, keepdims=True) + np.float32(1e-5)
                h = (h - mu) / sd
            stack.append(h)
        return np.stack(stack).astype(np.float32)
