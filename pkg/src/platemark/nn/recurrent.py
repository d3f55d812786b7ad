"""Bidirectional recurrent layers (simple RNN and LSTM) with per-step batch
normalization of the pre-activations.

Both layers run one cell forward over the sequence and an independent cell
over its reversal, then concatenate the two per-step outputs. Normalization
uses batch statistics at each step in train mode, with scale/shift shared
across steps and running statistics kept per step for eval; the explicit cell
bias is dropped because the normalizer's shift plays that role.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from platemark.nn.layers import Layer, bn_step_backward, bn_step_forward, he_uniform


def lstm_step(Wx, Wh, b, x_t, h_prev, c_prev):
    """One standard LSTM step with logistic gates and tanh squashing.

    Gate layout along the last axis of the (.., 4H) pre-activation:
    input, forget, candidate, output.
    """
    h_dim = Wh.shape[0]
    a = x_t @ Wx + h_prev @ Wh + b
    i = expit(a[..., 0:h_dim])
    f = expit(a[..., h_dim : 2 * h_dim])
    g = np.tanh(a[..., 2 * h_dim : 3 * h_dim])
    o = expit(a[..., 3 * h_dim : 4 * h_dim])
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return h, c


class _Direction:
    """Parameter/state bundle for one direction of a bidirectional layer."""

    def __init__(self, n_in, units, gates, seq_len, rng, forget_shift=0.0):
        self.Wx = he_uniform(rng, n_in, (n_in, gates * units))
        self.Wh = he_uniform(rng, units, (units, gates * units))
        self.gamma = np.ones(gates * units)
        self.beta = np.zeros(gates * units)
        if forget_shift:
            self.beta[units : 2 * units] = forget_shift
        self.dWx = np.zeros_like(self.Wx)
        self.dWh = np.zeros_like(self.Wh)
        self.dgamma = np.zeros_like(self.gamma)
        self.dbeta = np.zeros_like(self.beta)
        self.run_mean = np.zeros((seq_len, gates * units))
        self.run_var = np.ones((seq_len, gates * units))

    def params(self):
        return {"Wx": self.Wx, "Wh": self.Wh, "gamma": self.gamma, "beta": self.beta}

    def grads(self):
        return {"Wx": self.dWx, "Wh": self.dWh, "gamma": self.dgamma, "beta": self.dbeta}

    def state(self):
        return {"run_mean": self.run_mean, "run_var": self.run_var}


class _BiLayer(Layer):
    """Shared plumbing: direction handling, param naming, input reversal."""

    def __init__(self, n_in, units, gates, seq_len, rng, forget_shift=0.0):
        self.n_in, self.units, self.seq_len = n_in, units, seq_len
        self.fwd = _Direction(n_in, units, gates, seq_len, rng, forget_shift)
        self.bwd = _Direction(n_in, units, gates, seq_len, rng, forget_shift)

    def _dirs(self):
        return (("fwd", self.fwd, False), ("bwd", self.bwd, True))

    def params(self):
        return {f"{n}/{k}": v for n, d, _ in self._dirs() for k, v in d.params().items()}

    def grads(self):
        return {f"{n}/{k}": v for n, d, _ in self._dirs() for k, v in d.grads().items()}

    def state(self):
        return {f"{n}/{k}": v for n, d, _ in self._dirs() for k, v in d.state().items()}


class RecurrentLayer(_BiLayer):
    """Bidirectional simple-recurrent layer, `width` total output channels.

    Each direction carries width/2 units; a step computes
    relu(norm(x_t @ Wx + h_prev @ Wh)) and the per-step outputs of the two
    directions are concatenated. x (N, T, n_in) -> (N, T, width).
    """

    def __init__(self, n_in: int, width: int, rng: np.random.Generator, seq_len: int = 6):
        if width % 2:
            raise ValueError("bidirectional width must be even")
        super().__init__(n_in, width // 2, gates=1, seq_len=seq_len, rng=rng)

    def forward(self, x, train=False, rng=None):
        n, t, _ = x.shape
        outs = []
        self._caches = []
        for _, d, rev in self._dirs():
            xs = x[:, ::-1] if rev else x
            xproj = xs @ d.Wx
            h = np.zeros((n, self.units))
            steps = []
            hs = np.empty((n, t, self.units))
            for step in range(t):
                h_prev = h
                a = xproj[:, step] + h_prev @ d.Wh
                z, bn_cache = bn_step_forward(
                    a, d.gamma, d.beta, d.run_mean[step], d.run_var[step], train
                )
                h = np.maximum(z, 0.0)
                hs[:, step] = h
                steps.append((h_prev, bn_cache, z > 0))
            self._caches.append((xs, steps))
            outs.append(hs[:, ::-1] if rev else hs)
        return np.concatenate(outs, axis=2)

    def backward(self, grad_out):
        n, t, _ = grad_out.shape
        dx = np.zeros((n, t, self.n_in))
        for idx, (_, d, rev) in enumerate(self._dirs()):
            g = grad_out[:, :, idx * self.units : (idx + 1) * self.units]
            if rev:
                g = g[:, ::-1]
            xs, steps = self._caches[idx]
            dxproj = np.empty((n, t, self.units))
            dh_next = np.zeros((n, self.units))
            for step in reversed(range(t)):
                h_prev, bn_cache, relu_mask = steps[step]
                dz = (g[:, step] + dh_next) * relu_mask
                da = bn_step_backward(dz, bn_cache, d.gamma, d.dgamma, d.dbeta)
                dxproj[:, step] = da
                d.dWh += h_prev.T @ da
                dh_next = da @ d.Wh.T
            d.dWx += xs.reshape(n * t, -1).T @ dxproj.reshape(n * t, -1)
            dxs = dxproj @ d.Wx.T
            dx += dxs[:, ::-1] if rev else dxs
        return dx


class LSTMLayer(_BiLayer):
    """Bidirectional LSTM layer, `width` units per direction.

    Gate pre-activations are normalized per step before the logistic/tanh
    activations; per-step outputs of the two directions are concatenated:
    x (N, T, n_in) -> (N, T, 2*width). The forward direction's final state
    sits at out[:, -1, :width] and the backward direction's at
    out[:, 0, width:].
    """

    def __init__(self, n_in: int, width: int, rng: np.random.Generator, seq_len: int = 6):
        super().__init__(n_in, width, gates=4, seq_len=seq_len, rng=rng, forget_shift=1.0)

    def forward(self, x, train=False, rng=None):
        n, t, _ = x.shape
        u = self.units
        outs = []
        self._caches = []
        for _, d, rev in self._dirs():
            xs = x[:, ::-1] if rev else x
            xproj = xs @ d.Wx
            h = np.zeros((n, u))
            c = np.zeros((n, u))
            hs = np.empty((n, t, u))
            steps = []
            for step in range(t):
                h_prev, c_prev = h, c
                a_raw = xproj[:, step] + h_prev @ d.Wh
                a, bn_cache = bn_step_forward(
                    a_raw, d.gamma, d.beta, d.run_mean[step], d.run_var[step], train
                )
                i = expit(a[:, 0:u])
                f = expit(a[:, u : 2 * u])
                g = np.tanh(a[:, 2 * u : 3 * u])
                o = expit(a[:, 3 * u : 4 * u])
                c = f * c_prev + i * g
                tc = np.tanh(c)
                h = o * tc
                hs[:, step] = h
                steps.append((h_prev, c_prev, i, f, g, o, tc, bn_cache))
            self._caches.append((xs, steps))
            outs.append(hs[:, ::-1] if rev else hs)
        return np.concatenate(outs, axis=2)

    def backward(self, grad_out):
        n, t, _ = grad_out.shape
        u = self.units
        dx = np.zeros((n, t, self.n_in))
        for idx, (_, d, rev) in enumerate(self._dirs()):
            g_dir = grad_out[:, :, idx * u : (idx + 1) * u]
            if rev:
                g_dir = g_dir[:, ::-1]
            xs, steps = self._caches[idx]
            dxproj = np.empty((n, t, 4 * u))
            dh_next = np.zeros((n, u))
            dc_next = np.zeros((n, u))
            for step in reversed(range(t)):
                h_prev, c_prev, i, f, g, o, tc, bn_cache = steps[step]
                dh = g_dir[:, step] + dh_next
                dc = dc_next + dh * o * (1.0 - tc * tc)
                da = np.empty((n, 4 * u))
                da[:, 0:u] = dc * g * i * (1.0 - i)
                da[:, u : 2 * u] = dc * c_prev * f * (1.0 - f)
                da[:, 2 * u : 3 * u] = dc * i * (1.0 - g * g)
                da[:, 3 * u : 4 * u] = dh * tc * o * (1.0 - o)
                da_raw = bn_step_backward(da, bn_cache, d.gamma, d.dgamma, d.dbeta)
                dxproj[:, step] = da_raw
                d.dWh += h_prev.T @ da_raw
                dh_next = da_raw @ d.Wh.T
                dc_next = dc * f
            d.dWx += xs.reshape(n * t, -1).T @ dxproj.reshape(n * t, -1)
            dxs = dxproj @ d.Wx.T
            dx += dxs[:, ::-1] if rev else dxs
        return dx
