"""Sample-weighted losses and their gradients.

Every loss normalizes by the weight sum, so scaling all weights by a common
factor leaves the value (and gradients) unchanged.
"""

from __future__ import annotations

import numpy as np

BCE_CLAMP = 1e-7
LOG_2PI = float(np.log(2.0 * np.pi))


def _check_weights(weights, n):
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ValueError(f"weights shape {w.shape} != ({n},)")
    if np.any(w < 0):
        raise ValueError("negative sample weight")
    total = w.sum()
    if total <= 0.0:
        raise ValueError("sample weights sum to zero")
    return w, total


def loss_weighted_mse(pred, target, weights) -> float:
    """sum_i w_i (pred_i - target_i)^2 / sum_i w_i."""
    return weighted_mse_with_grad(pred, target, weights)[0]


def weighted_mse_with_grad(pred, target, weights):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    w, total = _check_weights(weights, pred.shape[0])
    diff = pred - target
    loss = float((w * diff * diff).sum() / total)
    grad = 2.0 * w * diff / total
    return loss, grad


def loss_bce(pred_prob, target_bit, weights) -> float:
    """Weighted mean of -[t ln p + (1-t) ln(1-p)], p clamped to [1e-7, 1-1e-7]."""
    return bce_with_grad(pred_prob, target_bit, weights)[0]


def bce_with_grad(pred_prob, target_bit, weights):
    p_raw = np.asarray(pred_prob, dtype=np.float64)
    t = np.asarray(target_bit, dtype=np.float64)
    w, total = _check_weights(weights, p_raw.shape[0])
    p = np.clip(p_raw, BCE_CLAMP, 1.0 - BCE_CLAMP)
    loss = float((w * -(t * np.log(p) + (1.0 - t) * np.log1p(-p))).sum() / total)
    inside = (p_raw > BCE_CLAMP) & (p_raw < 1.0 - BCE_CLAMP)
    grad = np.where(inside, w * (-t / p + (1.0 - t) / (1.0 - p)) / total, 0.0)
    return loss, grad


def _mixture_log_pdf(log_w, means, sigmas, target):
    """Per-sample log density of a Gaussian mixture via log-sum-exp.

    log_w/means/sigmas are (N, K); target is (N,). Returns (log_pdf (N,),
    responsibilities (N, K))."""
    z = (target[:, None] - means) / sigmas
    comp = log_w - np.log(sigmas) - 0.5 * z * z - 0.5 * LOG_2PI
    top = comp.max(axis=1, keepdims=True)
    log_pdf = top[:, 0] + np.log(np.exp(comp - top).sum(axis=1))
    resp = np.exp(comp - log_pdf[:, None])
    return log_pdf, resp


def loss_mdn_nll(mix_weights, means, sigmas, target, weights) -> float:
    """Weighted mean negative log-likelihood of Gaussian mixtures.

    mix_weights/means/sigmas are (N, K) post-activation parameters (weights
    positive and summing to 1 per row, sigmas > 0); target is (N,).
    """
    mix_weights = np.asarray(mix_weights, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    sigmas = np.asarray(sigmas, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    w, total = _check_weights(weights, target.shape[0])
    if np.any(sigmas <= 0):
        raise ValueError("sigmas must be positive")
    log_pdf, _ = _mixture_log_pdf(np.log(mix_weights), means, sigmas, target)
    if not np.all(np.isfinite(log_pdf)):
        raise FloatingPointError("non-finite mixture likelihood")
    return float((w * -log_pdf).sum() / total)


def mdn_nll_raw_with_grads(z, mu, s, target, weights, sigma_floor):
    """NLL straight from raw network outputs, with gradients for training.

    z/mu/s are (N, K): mixture logits, means, and log-scales (sigma =
    max(exp(s), sigma_floor)). Returns (loss, dz, dmu, ds).
    """
    z = np.asarray(z, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    w, total = _check_weights(weights, target.shape[0])

    zc = z - z.max(axis=1, keepdims=True)
    log_mix = zc - np.log(np.exp(zc).sum(axis=1, keepdims=True))
    mix = np.exp(log_mix)
    raw_sigma = np.exp(s)
    sigma = np.maximum(raw_sigma, sigma_floor)
    at_floor = raw_sigma < sigma_floor

    log_pdf, resp = _mixture_log_pdf(log_mix, mu, sigma, target)
    if not np.all(np.isfinite(log_pdf)):
        raise FloatingPointError("non-finite mixture likelihood")
    loss = float((w * -log_pdf).sum() / total)

    scale = (w / total)[:, None]
    std = (target[:, None] - mu) / sigma
    dz = scale * (mix - resp)
    dmu = scale * -resp * std / sigma
    ds = scale * -resp * (std * std - 1.0)
    ds[at_floor] = 0.0
    return loss, dz, dmu, ds
