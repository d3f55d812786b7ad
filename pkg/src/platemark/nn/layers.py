"""Feed-forward layers with explicit forward caches and exact backward passes.

Conventions shared by every layer:

- dense activations are ``(batch, channels)``, sequences ``(batch, steps,
  channels)``; channels sit on the last axis.
- ``forward(x, train=..., rng=...)`` caches whatever ``backward(grad_out)``
  needs; backward must see the same mode the forward ran in.
- ``backward`` accumulates into persistent gradient buffers (call
  ``zero_grads`` between optimizer steps) and returns the gradient w.r.t. the
  layer input, or None for token-id inputs.
- parameters / gradients / non-trainable state are exposed as name->array
  dicts so the optimizer and the persistence code can address them uniformly.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


def assert_all_finite(x: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {where}")


def he_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    """Uniform init scaled by sqrt(6/fan_in)."""
    limit = np.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-limit, limit, size=shape)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along `axis`."""
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


class Layer:
    def params(self) -> dict[str, np.ndarray]:
        return {}

    def grads(self) -> dict[str, np.ndarray]:
        return {}

    def state(self) -> dict[str, np.ndarray]:
        return {}

    def zero_grads(self) -> None:
        for g in self.grads().values():
            g[...] = 0.0

    def forward(self, x, train: bool = False, rng: np.random.Generator | None = None):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError


class Dense(Layer):
    """Affine map: x (N, n_in) -> x @ W + b, W (n_in, n_out)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.W = he_uniform(rng, n_in, (n_in, n_out))
        self.b = np.zeros(n_out)
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)
        self._x = None

    def params(self):
        return {"W": self.W, "b": self.b}

    def grads(self):
        return {"W": self.dW, "b": self.db}

    def forward(self, x, train=False, rng=None):
        self._x = x
        return x @ self.W + self.b

    def backward(self, grad_out):
        self.dW += self._x.T @ grad_out
        self.db += grad_out.sum(axis=0)
        return grad_out @ self.W.T


class Activation(Layer):
    """Elementwise nonlinearity; `kind` in KINDS. ELU uses alpha = 1."""

    KINDS = ("elu", "relu", "logistic", "tanh", "linear", "exponential")

    def __init__(self, kind: str):
        if kind not in self.KINDS:
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind
        self._x = None
        self._y = None

    def forward(self, x, train=False, rng=None):
        k = self.kind
        if k == "elu":
            # branch-free: expm1(min(x,0)) + max(x,0); exp(min(x,0)) is the
            # exact derivative on both sides of zero
            self._slope = np.exp(np.minimum(x, 0.0))
            y = (self._slope - 1.0) + np.maximum(x, 0.0)
        elif k == "relu":
            y = np.maximum(x, 0.0)
        elif k == "logistic":
            y = expit(x)
        elif k == "tanh":
            y = np.tanh(x)
        elif k == "exponential":
            y = np.exp(x)
        else:
            y = x
        self._x, self._y = x, y
        return y

    def backward(self, grad_out):
        k = self.kind
        if k == "elu":
            return grad_out * self._slope
        if k == "relu":
            return grad_out * (self._x > 0)
        if k == "logistic":
            return grad_out * self._y * (1.0 - self._y)
        if k == "tanh":
            return grad_out * (1.0 - self._y * self._y)
        if k == "exponential":
            return grad_out * self._y
        return grad_out


class Dropout(Layer):
    """Inverted dropout: train mode zeroes with probability `rate` and scales
    survivors by 1/(1-rate); eval mode is the identity."""

    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self._mask = None

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        keep = 1.0 - self.rate
        # float32 uniforms: half the random bytes, same mask semantics
        self._mask = (rng.random(x.shape, dtype=np.float32) >= self.rate) / keep
        return x * self._mask

    def backward(self, grad_out):
        if self._mask is None:
            return grad_out
        return grad_out * self._mask


class BatchNorm(Layer):
    """Per-channel batch normalization with learned scale/shift.

    Channels are the last axis; train mode normalizes over all other axes
    (so batch and step positions for sequence inputs), updates running
    statistics with `momentum`, and caches batch statistics for backward.
    Eval mode uses the running statistics.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.dgamma = np.zeros_like(self.gamma)
        self.dbeta = np.zeros_like(self.beta)
        self.run_mean = np.zeros(channels)
        self.run_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps
        self._cache = None
        self.last_normalized = None  # pre-scale output, kept for diagnostics

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self):
        return {"gamma": self.dgamma, "beta": self.dbeta}

    def state(self):
        return {"run_mean": self.run_mean, "run_var": self.run_var}

    def forward(self, x, train=False, rng=None):
        axes = tuple(range(x.ndim - 1))
        if train:
            mean = x.mean(axis=axes)
            centered = x - mean
            var = (centered * centered).mean(axis=axes)
            self.run_mean += self.momentum * (mean - self.run_mean)
            self.run_var += self.momentum * (var - self.run_var)
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat = centered * inv
            self._cache = (xhat, inv, axes, True)
        else:
            inv = 1.0 / np.sqrt(self.run_var + self.eps)
            xhat = (x - self.run_mean) * inv
            self._cache = (xhat, inv, axes, False)
        self.last_normalized = xhat
        return self.gamma * xhat + self.beta

    def backward(self, grad_out):
        xhat, inv, axes, trained = self._cache
        self.dgamma += (grad_out * xhat).sum(axis=axes)
        self.dbeta += grad_out.sum(axis=axes)
        gx = grad_out * self.gamma
        if not trained:
            return gx * inv
        return inv * (
            gx - gx.mean(axis=axes, keepdims=True) - xhat * (gx * xhat).mean(axis=axes, keepdims=True)
        )


def bn_step_forward(a, gamma, beta, run_mean, run_var, train, momentum=0.1, eps=1e-5):
    """One batch-norm application over axis 0 only, for per-step use inside
    recurrent layers (run_mean/run_var are this step's running stats, updated
    in place in train mode). Returns (output, cache)."""
    if train:
        mean = a.mean(axis=0)
        var = a.var(axis=0)
        run_mean += momentum * (mean - run_mean)
        run_var += momentum * (var - run_var)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (a - mean) * inv
    else:
        inv = 1.0 / np.sqrt(run_var + eps)
        xhat = (a - run_mean) * inv
    return gamma * xhat + beta, (xhat, inv, train)


def bn_step_backward(grad_out, cache, gamma, dgamma, dbeta):
    """Backward mate of bn_step_forward; accumulates dgamma/dbeta in place."""
    xhat, inv, trained = cache
    dgamma += (grad_out * xhat).sum(axis=0)
    dbeta += grad_out.sum(axis=0)
    gx = grad_out * gamma
    if not trained:
        return gx * inv
    return inv * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0))


class Conv1D(Layer):
    """1-D cross-correlation along the step axis with zero "same" padding.

    x (N, L, c_in) -> (N, ceil(L/stride), c_out). Weights are (kernel, c_in,
    c_out); padding keeps stride-1 lengths unchanged and implements 50 percent
    down-sampling at stride 2.
    """

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, kernel: int = 3, stride: int = 1):
        self.c_in, self.c_out, self.kernel, self.stride = c_in, c_out, kernel, stride
        self.W = he_uniform(rng, kernel * c_in, (kernel, c_in, c_out))
        self.b = np.zeros(c_out)
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)
        self._cache = None

    def params(self):
        return {"W": self.W, "b": self.b}

    def grads(self):
        return {"W": self.dW, "b": self.db}

    def out_len(self, length: int) -> int:
        return -(-length // self.stride)

    def forward(self, x, train=False, rng=None):
        n, length, c_in = x.shape
        if c_in != self.c_in:
            raise ValueError(f"expected {self.c_in} input channels, got {c_in}")
        out_len = self.out_len(length)
        total = max((out_len - 1) * self.stride + self.kernel - length, 0)
        lpad = total // 2
        if total:
            xp = np.zeros((n, length + total, c_in))
            xp[:, lpad : lpad + length] = x
        else:
            xp = x
        patches = np.empty((n, out_len, self.kernel, c_in))
        for j in range(self.kernel):
            patches[:, :, j] = xp[:, j : j + out_len * self.stride : self.stride]
        flat = patches.reshape(n * out_len, self.kernel * c_in)
        y = flat @ self.W.reshape(self.kernel * c_in, self.c_out) + self.b
        self._cache = (flat, n, length, out_len, lpad, xp.shape[1])
        return y.reshape(n, out_len, self.c_out)

    def backward(self, grad_out):
        patches, n, length, out_len, lpad, padded_len = self._cache
        gf = grad_out.reshape(n * out_len, self.c_out)
        self.dW += (patches.T @ gf).reshape(self.W.shape)
        self.db += gf.sum(axis=0)
        dpatch = (gf @ self.W.reshape(-1, self.c_out).T).reshape(n, out_len, self.kernel, self.c_in)
        dxp = np.zeros((n, padded_len, self.c_in))
        for j in range(self.kernel):
            dxp[:, j : j + out_len * self.stride : self.stride] += dpatch[:, :, j]
        return dxp[:, lpad : lpad + length]


class Embedding(Layer):
    """Token ids (N, T) int -> learned vectors (N, T, dim)."""

    def __init__(self, vocab: int, dim: int, rng: np.random.Generator):
        self.E = rng.uniform(-1.0, 1.0, size=(vocab, dim)) / np.sqrt(dim)
        self.dE = np.zeros_like(self.E)
        self._ids = None

    def params(self):
        return {"E": self.E}

    def grads(self):
        return {"E": self.dE}

    def forward(self, ids, train=False, rng=None):
        self._ids = ids
        return self.E[ids]

    def backward(self, grad_out):
        np.add.at(self.dE, self._ids, grad_out)
        return None


class OneHot(Layer):
    """Token ids (N, T) -> fixed one-hot vectors (N, T, vocab)."""

    def __init__(self, vocab: int):
        self.vocab = vocab

    def forward(self, ids, train=False, rng=None):
        n, t = ids.shape
        y = np.zeros((n, t, self.vocab))
        y[np.arange(n)[:, None], np.arange(t)[None, :], ids] = 1.0
        return y

    def backward(self, grad_out):
        return None


class GlobalAveragePool(Layer):
    """(N, L, C) -> (N, C), mean over steps."""

    def forward(self, x, train=False, rng=None):
        self._length = x.shape[1]
        return x.mean(axis=1)

    def backward(self, grad_out):
        return np.repeat(grad_out[:, None, :], self._length, axis=1) / self._length


class Softmax(Layer):
    """Row softmax over the last axis."""

    def forward(self, x, train=False, rng=None):
        self._y = softmax(x)
        return self._y

    def backward(self, grad_out):
        y = self._y
        return y * (grad_out - (grad_out * y).sum(axis=-1, keepdims=True))


class ResidualAdd(Layer):
    """y = a + b for shape-aligned tensors; gradients pass to both inputs."""

    def forward(self, a, b=None, train=False, rng=None):
        if b is None:
            raise ValueError("ResidualAdd needs two inputs")
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
        return a + b

    def backward(self, grad_out):
        return grad_out, grad_out


class Chain(Layer):
    """Runs named layers in order, exposing their params/grads/state with
    slash-joined names."""

    def __init__(self, layers: list[tuple[str, Layer]]):
        self.layers = layers

    def _collect(self, getter):
        out = {}
        for name, layer in self.layers:
            for key, val in getter(layer).items():
                out[f"{name}/{key}"] = val
        return out

    def params(self):
        return self._collect(lambda l: l.params())

    def grads(self):
        return self._collect(lambda l: l.grads())

    def state(self):
        return self._collect(lambda l: l.state())

    def forward(self, x, train=False, rng=None):
        for _, layer in self.layers:
            x = layer.forward(x, train=train, rng=rng)
        return x

    def backward(self, grad_out):
        for _, layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out
