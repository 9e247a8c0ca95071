"""Residual quantizer tests."""

import numpy as np
import pytest

from discodec.rvq import ResidualQuantizer


def _rq(num_books=4, book_size=32, dim=8, seed=0):
    return ResidualQuantizer(np.random.default_rng(seed), num_books, book_size, dim)


class TestAssignment:
    def test_grid_shape_and_bounds(self):
        rq = _rq()
        c = np.random.default_rng(1).standard_normal((20, 8)).astype(np.float32)
        grid, chat = rq.quantize(c)
        assert grid.shape == (20, 4) and chat.shape == (20, 8)
        assert grid.min() >= 0 and grid.max() < 32

    def test_residual_norm_nonincreasing(self):
        # brute force over stages on 100 random matrices
        rng = np.random.default_rng(2)
        rq = _rq(num_books=4, book_size=16)
        for _ in range(100):
            c = rng.standard_normal((10, 8)).astype(np.float32)
            grid, _ = rq.quantize(c)
            prev = np.linalg.norm(c)
            for stages in range(1, 5):
                err = np.linalg.norm(c - rq.dequantize(grid, stages=stages))
                assert err <= prev + 1e-4
                prev = err

    def test_exact_match_zero_residual(self):
        rq = _rq(num_books=3, book_size=8, dim=4)
        # place the inputs verbatim in book 0 and zero rows in later books
        rows = np.random.default_rng(3).standard_normal((8, 4)).astype(np.float32)
        rq.books[0] = rows
        rq.books[1:] = 1.0  # push other codes away from zero
        rq.books[1, 0] = 0.0
        rq.books[2, 0] = 0.0
        grid, chat = rq.quantize(rows[[2, 5, 7]])
        assert list(grid[:, 0]) == [2, 5, 7]
        assert np.all(grid[:, 1:] == 0)
        assert np.array_equal(chat, rows[[2, 5, 7]])

    def test_dimension_mismatch(self):
        rq = _rq(dim=8)
        with pytest.raises(ValueError, match="T×8"):
            rq.quantize(np.zeros((5, 7), np.float32))


class TestDequantize:
    def test_round_trip_bit_exact(self):
        rq = _rq()
        c = np.random.default_rng(4).standard_normal((15, 8)).astype(np.float32)
        grid, chat = rq.quantize(c)
        assert np.array_equal(rq.dequantize(grid), chat)

    def test_zero_books(self):
        rq = _rq(num_books=2, book_size=4, dim=3)
        rq.books[:] = 0.0
        out = rq.dequantize(np.zeros((6, 2), dtype=np.int64))
        assert np.all(out == 0.0)

    def test_single_frame_single_book(self):
        rq = _rq(num_books=1, book_size=5, dim=3)
        out = rq.dequantize(np.array([[4]]))
        assert np.allclose(out[0], rq.books[0, 4])

    def test_bounds_checked(self):
        rq = _rq(book_size=32)
        with pytest.raises(ValueError, match="outside"):
            rq.dequantize(np.array([[0, 0, 0, 32]]))
        with pytest.raises(ValueError, match="outside"):
            rq.dequantize(np.array([[0, 0, -1, 0]]))

    def test_grid_shape_checked(self):
        rq = _rq(num_books=4)
        with pytest.raises(ValueError, match="T×4"):
            rq.dequantize(np.zeros((3, 2), dtype=np.int64))


class TestTraining:
    def test_data_init_improves_reconstruction(self):
        rng = np.random.default_rng(5)
        data = rng.standard_normal((200, 8)).astype(np.float32)
        cold = _rq(book_size=64)
        _, chat_cold = cold.quantize(data)
        warm = _rq(book_size=64)
        warm.quantize_train(data, np.random.default_rng(6))
        _, chat_warm = warm.quantize(data)
        err_cold = np.linalg.norm(data - chat_cold)
        err_warm = np.linalg.norm(data - chat_warm)
        assert warm.initialized and err_warm < err_cold

    def test_ema_moves_codes_toward_data(self):
        rng = np.random.default_rng(7)
        target = np.tile(np.array([[3.0, -2.0, 1.0, 0.5]], np.float32), (50, 1))
        rq = _rq(num_books=1, book_size=2, dim=4)
        train_rng = np.random.default_rng(8)
        for _ in range(200):
            rq.quantize_train(target + rng.standard_normal((50, 4)).astype(np.float32) * 0.01,
                              train_rng)
        _, chat = rq.quantize(target)
        assert np.abs(chat - target).max() < 0.05

    def test_deterministic_given_seeds(self):
        data = np.random.default_rng(9).standard_normal((40, 8)).astype(np.float32)
        runs = []
        for _ in range(2):
            rq = _rq(seed=1)
            train_rng = np.random.default_rng(10)
            for _ in range(5):
                rq.quantize_train(data, train_rng)
            runs.append(rq.books.copy())
        assert np.array_equal(runs[0], runs[1])

    def test_dead_codes_reseeded(self):
        rng = np.random.default_rng(11)
        rq = ResidualQuantizer(np.random.default_rng(12), num_books=1, book_size=8,
                               dim=4, dead_steps=10)
        rq.init_from_data(rng.standard_normal((50, 4)).astype(np.float32), rng)
        # park one code far away so it never matches and starves
        rq.books[0, 3] = 50.0
        rq.ema_counts[0, 3] = 0.0
        train_rng = np.random.default_rng(13)
        data = rng.standard_normal((50, 4)).astype(np.float32)
        for _ in range(12):
            rq.quantize_train(data, train_rng)
        assert np.abs(rq.books[0, 3]).max() < 10.0  # was reseeded from data
        assert rq.dead_streak[0, 3] < 10

    def test_counts_stay_nonnegative_and_finite(self):
        rq = _rq()
        train_rng = np.random.default_rng(14)
        data_rng = np.random.default_rng(15)
        for _ in range(20):
            rq.quantize_train(data_rng.standard_normal((30, 8)).astype(np.float32), train_rng)
        assert (rq.ema_counts >= 0).all()
        assert np.isfinite(rq.books).all()
        assert (rq.utilization() <= 1.0).all()


class TestPersistence:
    def test_state_round_trip(self):
        rq = _rq()
        train_rng = np.random.default_rng(16)
        rq.quantize_train(np.random.default_rng(17).standard_normal((30, 8)).astype(np.float32),
                          train_rng)
        state = rq.state_tensors()
        other = _rq(seed=99)
        other.load_state_tensors(state)
        data = np.random.default_rng(18).standard_normal((12, 8)).astype(np.float32)
        ga, ca = rq.quantize(data)
        gb, cb = other.quantize(data)
        assert np.array_equal(ga, gb) and np.array_equal(ca, cb)
        assert other.initialized
