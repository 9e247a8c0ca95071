"""Residual vector quantization with EMA codebook learning.

The quantizer itself is plain numpy: code assignment is not differentiable,
and the straight-through estimator plus commitment loss are assembled by the
model that owns the surrounding autodiff graph.  Codebooks learn by
exponential moving averages of their assigned residuals rather than by
gradient descent, with dead codes reseeded from fresh batch data.
"""

from __future__ import annotations

import numpy as np

_f32 = np.float32


class ResidualQuantizer:
    def __init__(self, rng, num_books: int = 4, book_size: int = 512, dim: int = 32,
                 decay: float = 0.99, dead_steps: int = 100):
        self.num_books, self.book_size, self.dim = num_books, book_size, dim
        self.decay, self.dead_steps = decay, dead_steps
        self.books = (rng.standard_normal((num_books, book_size, dim)) * 0.1).astype(_f32)
        self.ema_counts = np.ones((num_books, book_size), dtype=np.float64)
        self.ema_sums = self.books.astype(np.float64).copy()
        self.dead_streak = np.zeros((num_books, book_size), dtype=np.int64)
        self.initialized = False

    # -- assignment ---------------------------------------------------------

    def _nearest(self, residual: np.ndarray, book: np.ndarray) -> np.ndarray:
        d2 = (residual * residual).sum(axis=1, keepdims=True) \
            - 2.0 * residual @ book.T + (book * book).sum(axis=1)
        return d2.argmin(axis=1)

    def quantize(self, c: np.ndarray):
        """Assign codes stage by stage; returns (grid T×Nq, Ĉ T×D)."""
        c = np.asarray(c, dtype=_f32)
        if c.ndim != 2 or c.shape[1] != self.dim:
            raise ValueError(f"expected T×{self.dim} input, got {c.shape}")
        residual = c.astype(np.float64)
        grid = np.empty((len(c), self.num_books), dtype=np.int64)
        chat = np.zeros_like(residual)
        for q in range(self.num_books):
            idx = self._nearest(residual, self.books[q].astype(np.float64))
            grid[:, q] = idx
            chosen = self.books[q][idx].astype(np.float64)
            chat += chosen
            residual -= chosen
        return grid, chat.astype(_f32)

    def dequantize(self, grid: np.ndarray, stages: int | None = None) -> np.ndarray:
        grid = np.asarray(grid)
        if grid.ndim != 2 or grid.shape[1] != self.num_books:
            raise ValueError(f"expected T×{self.num_books} grid, got {grid.shape}")
        if grid.min(initial=0) < 0 or grid.max(initial=0) >= self.book_size:
            raise ValueError(f"code index outside [0, {self.book_size})")
        stages = self.num_books if stages is None else stages
        chat = np.zeros((len(grid), self.dim), dtype=np.float64)
        for q in range(stages):
            chat += self.books[q][grid[:, q]].astype(np.float64)
        return chat.astype(_f32)

    # -- training updates ---------------------------------------------------

    def init_from_data(self, c: np.ndarray, rng) -> None:
        """Seed each codebook from residuals of a data batch (run once)."""
        residual = np.asarray(c, dtype=np.float64)
        for q in range(self.num_books):
            picks = rng.integers(0, len(residual), size=self.book_size)
            self.books[q] = residual[picks].astype(_f32)
            self.books[q] += (rng.standard_normal((self.book_size, self.dim)) * 1e-3).astype(_f32)
            idx = self._nearest(residual, self.books[q].astype(np.float64))
            residual = residual - self.books[q][idx].astype(np.float64)
        self.ema_counts[:] = 1.0
        self.ema_sums = self.books.astype(np.float64).copy()
        self.dead_streak[:] = 0
        self.initialized = True

    def quantize_train(self, c: np.ndarray, rng):
        """Quantize and move codebooks toward their assigned residuals."""
        if not self.initialized:
            self.init_from_data(c, rng)
        c = np.asarray(c, dtype=_f32)
        residual = c.astype(np.float64)
        grid = np.empty((len(c), self.num_books), dtype=np.int64)
        chat = np.zeros_like(residual)
        for q in range(self.num_books):
            idx = self._nearest(residual, self.books[q].astype(np.float64))
            grid[:, q] = idx
            # the code used in this forward pass, frozen before any update
            chosen = self.books[q][idx].astype(np.float64)
            counts = np.bincount(idx, minlength=self.book_size).astype(np.float64)
            sums = np.zeros((self.book_size, self.dim), dtype=np.float64)
            np.add.at(sums, idx, residual)
            self.ema_counts[q] = self.decay * self.ema_counts[q] + (1 - self.decay) * counts
            self.ema_sums[q] = self.decay * self.ema_sums[q] + (1 - self.decay) * sums
            total = self.ema_counts[q].sum()
            smoothed = (self.ema_counts[q] + 1e-5) / (total + self.book_size * 1e-5) * total
            self.books[q] = (self.ema_sums[q] / smoothed[:, None]).astype(_f32)

            dead = self.ema_counts[q] < 1.0
            self.dead_streak[q][dead] += 1
            self.dead_streak[q][~dead] = 0
            expired = np.flatnonzero(self.dead_streak[q] >= self.dead_steps)
            if len(expired):
                picks = rng.integers(0, len(residual), size=len(expired))
                self.books[q][expired] = residual[picks].astype(_f32)
                self.ema_counts[q][expired] = 1.0
                self.ema_sums[q][expired] = residual[picks]
                self.dead_streak[q][expired] = 0

            chat += chosen
            residual -= chosen
        return grid, chat.astype(_f32)

    def utilization(self) -> np.ndarray:
        """Fraction of live codes (EMA count ≥ 1) per book."""
        return (self.ema_counts >= 1.0).mean(axis=1)

    # -- persistence --------------------------------------------------------

    def state_tensors(self) -> dict:
        return {
            "books": self.books.copy(),
            "ema_counts": self.ema_counts.astype(_f32),
            "ema_sums": self.ema_sums.astype(_f32),
            "dead_streak": self.dead_streak.astype(_f32),
            "initialized": np.array([float(self.initialized)], dtype=_f32),
        }

    def load_state_tensors(self, table: dict, prefix: str = "") -> None:
        self.books = np.asarray(table[prefix + "books"], dtype=_f32).copy()
        self.ema_counts = np.asarray(table[prefix + "ema_counts"], dtype=np.float64).copy()
        self.ema_sums = np.asarray(table[prefix + "ema_sums"], dtype=np.float64).copy()
        self.dead_streak = np.asarray(table[prefix + "dead_streak"]).astype(np.int64).copy()
        self.initialized = bool(table[prefix + "initialized"][0])
