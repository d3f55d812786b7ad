import numpy as np
import pytest

from platemark.nn import LSTMLayer, RecurrentLayer, lstm_step
from gradcheck import check_layer_grads


def _scalar_lstm_step(Wx, Wh, b, x_t, h_prev, c_prev):
    """Element-by-element reimplementation of one LSTM step (independent oracle)."""

    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    n, h_dim = h_prev.shape
    h = np.zeros_like(h_prev)
    c = np.zeros_like(c_prev)
    for row in range(n):
        a = np.zeros(4 * h_dim)
        for j in range(4 * h_dim):
            acc = b[j]
            for k in range(x_t.shape[1]):
                acc += x_t[row, k] * Wx[k, j]
            for k in range(h_dim):
                acc += h_prev[row, k] * Wh[k, j]
            a[j] = acc
        for k in range(h_dim):
            i = sig(a[k])
            f = sig(a[h_dim + k])
            g = np.tanh(a[2 * h_dim + k])
            o = sig(a[3 * h_dim + k])
            c[row, k] = f * c_prev[row, k] + i * g
            h[row, k] = o * np.tanh(c[row, k])
    return h, c


class TestLstmStep:
    def test_all_zeros(self):
        h, c = lstm_step(
            np.zeros((3, 8)), np.zeros((2, 8)), np.zeros(8),
            np.zeros((4, 3)), np.zeros((4, 2)), np.zeros((4, 2)),
        )
        np.testing.assert_array_equal(h, 0.0)
        np.testing.assert_array_equal(c, 0.0)

    def test_memory_carry(self):
        # saturate the forget gate open and the input gate shut via the bias
        h_dim = 2
        b = np.zeros(4 * h_dim)
        b[0:h_dim] = -100.0  # input gate -> 0
        b[h_dim : 2 * h_dim] = 100.0  # forget gate -> 1
        c_prev = np.array([[0.7, -1.2]])
        _, c = lstm_step(
            np.zeros((3, 4 * h_dim)), np.zeros((h_dim, 4 * h_dim)), b,
            np.zeros((1, 3)), np.zeros((1, h_dim)), c_prev,
        )
        np.testing.assert_allclose(c, c_prev, atol=1e-12)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            n_in, h_dim, n = 3, 2, 4
            Wx = rng.standard_normal((n_in, 4 * h_dim))
            Wh = rng.standard_normal((h_dim, 4 * h_dim))
            b = rng.standard_normal(4 * h_dim)
            x = rng.standard_normal((n, n_in))
            h0 = rng.standard_normal((n, h_dim))
            c0 = rng.standard_normal((n, h_dim))
            h, c = lstm_step(Wx, Wh, b, x, h0, c0)
            h_ref, c_ref = _scalar_lstm_step(Wx, Wh, b, x, h0, c0)
            np.testing.assert_allclose(h, h_ref, rtol=1e-12, atol=1e-12)
            np.testing.assert_allclose(c, c_ref, rtol=1e-12, atol=1e-12)


class TestRecurrentLayer:
    def test_shapes_and_direction_split(self):
        layer = RecurrentLayer(5, 8, np.random.default_rng(0), seq_len=4)
        y = layer.forward(np.random.default_rng(1).standard_normal((3, 4, 5)), train=True)
        assert y.shape == (3, 4, 8)

    def test_odd_width_rejected(self):
        with pytest.raises(ValueError):
            RecurrentLayer(5, 7, np.random.default_rng(0))

    def test_fd(self):
        for seed in range(20):
            check_layer_grads(
                lambda rng: RecurrentLayer(3, 4, rng, seq_len=3),
                np.random.default_rng(seed).standard_normal((5, 3, 3)),
                seed,
            )


class TestLSTMLayer:
    def test_shapes(self):
        layer = LSTMLayer(5, 3, np.random.default_rng(0), seq_len=4)
        y = layer.forward(np.random.default_rng(1).standard_normal((6, 4, 5)), train=True)
        assert y.shape == (6, 4, 6)

    def test_eval_deterministic(self):
        layer = LSTMLayer(4, 3, np.random.default_rng(2), seq_len=3)
        x = np.random.default_rng(3).standard_normal((4, 3, 4))
        layer.forward(x, train=True)  # populate running stats
        a = layer.forward(x, train=False)
        b = layer.forward(x, train=False)
        np.testing.assert_array_equal(a, b)

    def test_fd(self):
        for seed in range(20):
            check_layer_grads(
                lambda rng: LSTMLayer(3, 2, rng, seq_len=3),
                np.random.default_rng(seed + 100).standard_normal((5, 3, 3)),
                seed,
            )
