"""Gaussian-mixture price distributions conditioned on a predicted log price.

A small two-layer network maps the point prediction to mixture logits, means,
and log-scales; it is fitted separately, after the main model is frozen, on
(predicted, realized) log-price pairs by minimizing the mixture's negative
log-likelihood. Also provides pdf/cdf/quantile/sampling utilities for the
resulting mixtures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from platemark.nn import Adam, mdn_nll_raw_with_grads
from platemark.nn.layers import he_uniform

SIGMA_FLOOR = 1e-3
SQRT2 = math.sqrt(2.0)


@dataclass
class MixtureParams:
    """Post-activation parameters of one price mixture."""

    weights: np.ndarray  # (K,), positive, sums to 1
    means: np.ndarray  # (K,) log-price centers
    sigmas: np.ndarray  # (K,), >= SIGMA_FLOOR

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64)
        if not (self.weights.shape == self.means.shape == self.sigmas.shape):
            raise ValueError("mixture parameter arrays must share a shape")
        if abs(self.weights.sum() - 1.0) > 1e-9 or np.any(self.weights <= 0):
            raise ValueError("mixture weights must be positive and sum to 1")
        if np.any(self.sigmas < SIGMA_FLOOR):
            raise ValueError(f"sigmas must be >= {SIGMA_FLOOR}")

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]


class MDNModel:
    """predicted log price (scalar) -> hidden ELU layer -> [logits, means, log-scales]."""

    def __init__(self, n_components: int, hidden: int, seed: int = 0, _init: bool = True):
        self.n_components = n_components
        self.hidden = hidden
        if _init:
            rng = np.random.default_rng(seed)
            self.W1 = he_uniform(rng, 1, (1, hidden))
            self.b1 = np.zeros(hidden)
            self.W2 = he_uniform(rng, hidden, (hidden, 3 * n_components)) * 0.1
            self.b2 = np.zeros(3 * n_components)

    def named_params(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    @classmethod
    def from_named_params(cls, tensors: dict[str, np.ndarray]) -> "MDNModel":
        hidden = tensors["W1"].shape[1]
        k3 = tensors["W2"].shape[1]
        model = cls(k3 // 3, hidden, _init=False)
        model.W1 = np.array(tensors["W1"], dtype=np.float64)
        model.b1 = np.array(tensors["b1"], dtype=np.float64)
        model.W2 = np.array(tensors["W2"], dtype=np.float64)
        model.b2 = np.array(tensors["b2"], dtype=np.float64)
        return model

    def raw_outputs(self, pred: np.ndarray):
        """(N,) -> (z, mu, s) each (N, K), plus the hidden cache for backward."""
        pre = pred[:, None] @ self.W1 + self.b1
        hidden = np.where(pre >= 0, pre, np.expm1(pre))
        out = hidden @ self.W2 + self.b2
        k = self.n_components
        return out[:, :k], out[:, k : 2 * k], out[:, 2 * k :], (pre, hidden)

    def params_for(self, predicted_log_price: float) -> MixtureParams:
        """Mixture parameters at one predicted log price."""
        pred = np.array([float(predicted_log_price)])
        if not np.isfinite(pred[0]):
            raise ValueError("predicted log price must be finite")
        z, mu, s, _ = self.raw_outputs(pred)
        zc = z[0] - z[0].max()
        weights = np.exp(zc) / np.exp(zc).sum()
        sigmas = np.maximum(np.exp(s[0]), SIGMA_FLOOR)
        if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(mu[0])) and np.all(np.isfinite(sigmas))):
            raise FloatingPointError("non-finite mixture parameters")
        return MixtureParams(weights=weights, means=mu[0], sigmas=sigmas)


def mdn_params(model: MDNModel, predicted_log_price: float) -> MixtureParams:
    return model.params_for(predicted_log_price)


def fit_mdn(
    pairs,
    n_components: int = 6,
    hidden: int = 256,
    epochs: int = 2000,
    seed: int = 0,
    lr: float = 0.001,
    valid_fraction: float = 0.2,
) -> MDNModel:
    """Fit the mixture network on (predicted, actual) log-price pairs.

    Full-batch Adam on the mixture NLL; a held-out slice of the pairs picks
    the best epoch, whose parameters are reloaded before returning. Mixture
    means start spread across the target range.
    """
    pairs = np.asarray(pairs, dtype=np.float64)
    if pairs.ndim != 2 or pairs.shape[1] != 2:
        raise ValueError("pairs must be (n, 2): predicted, actual")
    if pairs.shape[0] < n_components:
        raise ValueError("need at least one pair per mixture component")
    rng = np.random.default_rng(seed)
    order = rng.permutation(pairs.shape[0])
    n_valid = max(1, int(round(valid_fraction * pairs.shape[0]))) if pairs.shape[0] > 4 else 1
    valid_idx, train_idx = order[:n_valid], order[n_valid:]
    if train_idx.size == 0:
        train_idx = valid_idx
    pred_t, act_t = pairs[train_idx, 0], pairs[train_idx, 1]
    pred_v, act_v = pairs[valid_idx, 0], pairs[valid_idx, 1]

    model = MDNModel(n_components, hidden, seed=seed + 1)
    k = n_components
    lo, hi = float(act_t.min()), float(act_t.max())
    if hi <= lo:
        hi = lo + 1.0
    model.b2[k : 2 * k] = np.linspace(lo, hi, k)
    spread = max(float(act_t.std()), 10 * SIGMA_FLOOR)
    model.b2[2 * k :] = math.log(spread)

    params = model.named_params()
    opt = Adam(params, lr=lr)
    w_train = np.ones(pred_t.shape[0])
    w_valid = np.ones(pred_v.shape[0])

    def nll(pred, act, weights):
        z, mu, s, _ = model.raw_outputs(pred)
        return mdn_nll_raw_with_grads(z, mu, s, act, weights, SIGMA_FLOOR)[0]

    best = (math.inf, None)
    for _ in range(epochs):
        z, mu, s, (pre, hidden_act) = model.raw_outputs(pred_t)
        loss, dz, dmu, ds = mdn_nll_raw_with_grads(z, mu, s, act_t, w_train, SIGMA_FLOOR)
        if not math.isfinite(loss):
            raise FloatingPointError("mixture fit diverged")
        d_out = np.concatenate([dz, dmu, ds], axis=1)
        d_hidden = d_out @ model.W2.T
        d_pre = d_hidden * np.where(pre >= 0, 1.0, hidden_act + 1.0)
        grads = {
            "W1": pred_t[:, None].T @ d_pre,
            "b1": d_pre.sum(axis=0),
            "W2": hidden_act.T @ d_out,
            "b2": d_out.sum(axis=0),
        }
        opt.step(grads)
        score = nll(pred_v, act_v, w_valid)
        if score < best[0]:
            best = (score, {kk: vv.copy() for kk, vv in params.items()})
    if best[1] is not None:
        for kk, vv in params.items():
            vv[...] = best[1][kk]
    return model


# ---------------------------------------------------------------------------
# Mixture utilities
# ---------------------------------------------------------------------------


def mixture_pdf(p: MixtureParams, x) -> np.ndarray | float:
    """Density of the mixture at x (scalar or array of log prices)."""
    xv = np.asarray(x, dtype=np.float64)
    z = (xv[..., None] - p.means) / p.sigmas
    dens = (p.weights * np.exp(-0.5 * z * z) / (p.sigmas * math.sqrt(2 * math.pi))).sum(axis=-1)
    return float(dens) if np.isscalar(x) else dens


def mixture_cdf(p: MixtureParams, x) -> np.ndarray | float:
    """Distribution function via the complementary error function."""
    xv = np.asarray(x, dtype=np.float64)
    z = (xv[..., None] - p.means) / p.sigmas
    cdf = (p.weights * 0.5 * erfc(-z / SQRT2)).sum(axis=-1)
    return float(cdf) if np.isscalar(x) else cdf


def mixture_quantile(p: MixtureParams, q: float) -> float:
    """Bisection on the cdf to |cdf(x) - q| < 1e-9; q must be in (0, 1)."""
    if not 0.0 < q < 1.0:
        raise ValueError("quantile level must be in (0, 1)")
    sigma_max = float(p.sigmas.max())
    lo = float(p.means.min()) - 12.0 * sigma_max
    hi = float(p.means.max()) + 12.0 * sigma_max
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        c = mixture_cdf(p, mid)
        if abs(c - q) < 1e-9:
            return mid
        if c < q:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def mixture_sample(p: MixtureParams, n: int, seed: int) -> np.ndarray:
    """n seeded draws: component by weight, then a normal draw within it."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    cum = np.cumsum(p.weights)
    comp = np.searchsorted(cum, rng.random(n), side="right").clip(max=p.n_components - 1)
    return rng.normal(p.means[comp], p.sigmas[comp])
