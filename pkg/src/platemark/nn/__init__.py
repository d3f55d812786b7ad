"""Dense-tensor building blocks: differentiable layers, losses, and Adam.

Everything runs on float64 numpy arrays with hand-derived analytic gradients;
persisted weights are 32-bit. Channels always occupy the last axis.
"""

from platemark.nn.layers import (
    Activation,
    BatchNorm,
    Chain,
    Conv1D,
    Dense,
    Dropout,
    Embedding,
    GlobalAveragePool,
    Layer,
    OneHot,
    ResidualAdd,
    Softmax,
    assert_all_finite,
    softmax,
)
from platemark.nn.losses import (
    bce_with_grad,
    loss_bce,
    loss_mdn_nll,
    loss_weighted_mse,
    mdn_nll_raw_with_grads,
    weighted_mse_with_grad,
)
from platemark.nn.optim import Adam
from platemark.nn.recurrent import LSTMLayer, RecurrentLayer, lstm_step

__all__ = [
    "Activation",
    "Adam",
    "BatchNorm",
    "Chain",
    "Conv1D",
    "Dense",
    "Dropout",
    "Embedding",
    "GlobalAveragePool",
    "Layer",
    "LSTMLayer",
    "OneHot",
    "RecurrentLayer",
    "ResidualAdd",
    "Softmax",
    "assert_all_finite",
    "bce_with_grad",
    "loss_bce",
    "loss_mdn_nll",
    "loss_weighted_mse",
    "lstm_step",
    "mdn_nll_raw_with_grads",
    "softmax",
    "weighted_mse_with_grad",
]
