"""Training loop, evaluation metrics, baselines, and the hyperparameter grid runner.

The objective is multi-task: sample-weighted MSE on the log price plus (at
equal overall weight) the mean over the 32 characteristic targets of
per-target losses, cross entropy for the binary flags and MSE for the digit
counts. Early stopping watches the same multi-task loss on the validation
split and reloads the best epoch's parameters.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import erfc
from scipy.stats import rankdata

from platemark.dataset import Batch, Example, SplitDataset, stack_examples
from platemark.model import Model, ModelConfig
from platemark.nn import Adam
from platemark.nn.losses import BCE_CLAMP
from platemark.plates import EVAL_PATTERNS, N_AUX, N_AUX_BINARY, pattern_class


class TrainingDivergence(FloatingPointError):
    """Non-finite loss or gradient during training."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 2048
    max_epochs: int | None = None  # None: 800 for rescnn, 120 for recurrent
    patience: int = 25
    runs_per_config: int = 3
    seed: int = 0
    aux_weight: float = 1.0  # 0 ablates the characteristic targets
    max_seconds: float | None = None  # wall-clock budget for the epoch loop

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("learning_rate, batch_size, patience must be positive")
        if self.runs_per_config < 1:
            raise ValueError("runs_per_config must be >= 1")

    def resolved_max_epochs(self, extractor: str) -> int:
        epochs = self.max_epochs if self.max_epochs is not None else (800 if extractor == "rescnn" else 120)
        if self.patience >= epochs:
            raise ValueError(f"patience {self.patience} must be below max_epochs {epochs}")
        return epochs

    def to_doc(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "runs_per_config": self.runs_per_config,
            "seed": self.seed,
            "aux_weight": self.aux_weight,
            "max_seconds": self.max_seconds,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "TrainConfig":
        return cls(**doc)


def desk_train_config(extractor: str, **overrides) -> TrainConfig:
    """Desktop-scale preset: small batches and epoch budgets that keep a run
    in the minutes range."""
    base = dict(batch_size=256, max_epochs=200 if extractor == "rescnn" else 60, patience=25)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass(frozen=True)
class Metrics:
    rmse: float
    r2: float
    n: int


@dataclass
class RunRecord:
    config_id: str
    run: int
    seed: int
    history: list[tuple[float, float]] = field(default_factory=list)  # (train, valid) loss
    best_epoch: int = -1
    metrics: dict[str, Metrics] = field(default_factory=dict)
    seconds: float = 0.0
    params: int = 0
    error: str | None = None


# ---------------------------------------------------------------------------
# Loss assembly
# ---------------------------------------------------------------------------


def _aux_matrix(batch: Batch, mode: str) -> np.ndarray:
    if mode == "features":
        return batch.aux_targets
    return np.repeat(batch.target[:, None], N_AUX, axis=1)


def _multitask_terms(out_price, out_aux, target, aux_target, weights, mode):
    """Vectorized price + characteristic losses with gradients.

    Matches the per-column loss definitions exactly: every column's loss is a
    weight-normalized mean, the characteristic block is averaged over its 32
    columns.
    """
    w = weights
    total_w = w.sum()
    if total_w <= 0:
        raise ValueError("sample weights sum to zero")

    diff = out_price - target
    l_price = float((w * diff * diff).sum() / total_w)
    d_price = 2.0 * w * diff / total_w

    wc = w[:, None]
    if mode == "features":
        p_raw = out_aux[:, :N_AUX_BINARY]
        t_bin = aux_target[:, :N_AUX_BINARY]
        p = np.clip(p_raw, BCE_CLAMP, 1.0 - BCE_CLAMP)
        bce = -(t_bin * np.log(p) + (1.0 - t_bin) * np.log1p(-p))
        l_bin = float((wc * bce).sum() / total_w)
        inside = (p_raw > BCE_CLAMP) & (p_raw < 1.0 - BCE_CLAMP)
        d_bin = np.where(inside, wc * (-t_bin / p + (1.0 - t_bin) / (1.0 - p)) / total_w, 0.0)

        c_diff = out_aux[:, N_AUX_BINARY:] - aux_target[:, N_AUX_BINARY:]
        l_cnt = float((wc * c_diff * c_diff).sum() / total_w)
        d_cnt = 2.0 * wc * c_diff / total_w
        l_aux = (l_bin + l_cnt) / N_AUX
        d_aux = np.concatenate([d_bin, d_cnt], axis=1) / N_AUX
    else:
        diff_a = out_aux - aux_target
        l_aux = float((wc * diff_a * diff_a).sum() / total_w) / N_AUX
        d_aux = 2.0 * wc * diff_a / total_w / N_AUX
    return l_price, d_price, l_aux, d_aux


def _forward_eval(model: Model, batch: Batch, chunk: int = 2048):
    preds = np.empty(batch.target.shape[0])
    auxes = np.empty((batch.target.shape[0], N_AUX))
    for lo in range(0, preds.shape[0], chunk):
        hi = lo + chunk
        out = model.forward(batch.tokens[lo:hi], batch.aux_in[lo:hi], train=False)
        preds[lo:hi] = out.price
        auxes[lo:hi] = out.aux
    return preds, auxes


def _validation_loss(model: Model, batch: Batch, aux_target, cfg: TrainConfig) -> float:
    preds, auxes = _forward_eval(model, batch)
    l_price, _, l_aux, _ = _multitask_terms(
        preds, auxes, batch.target, aux_target, batch.weight, model.config.aux_targets
    )
    return l_price + cfg.aux_weight * l_aux


def train(model: Model, data: SplitDataset, cfg: TrainConfig) -> tuple[Model, RunRecord]:
    """Run the full loop and return the model reloaded to its best epoch."""
    if not data.train or not data.valid:
        raise ValueError("need nonempty train and valid splits")
    train_batch = stack_examples(data.train)
    valid_batch = stack_examples(data.valid)
    mode = model.config.aux_targets
    aux_train = _aux_matrix(train_batch, mode)
    aux_valid = _aux_matrix(valid_batch, mode)

    rng = np.random.default_rng(cfg.seed)
    params = model.named_params()
    state = model.named_state()
    opt = Adam(params, lr=cfg.learning_rate)
    record = RunRecord(config_id="", run=0, seed=cfg.seed, params=model.param_count())

    n = train_batch.target.shape[0]
    max_epochs = cfg.resolved_max_epochs(model.config.extractor)
    best_loss = math.inf
    best_copy = None
    stall = 0
    started = time.perf_counter()
    for epoch in range(max_epochs):
        perm = rng.permutation(n)
        loss_acc = 0.0
        seen = 0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo : lo + cfg.batch_size]
            out = model.forward(train_batch.tokens[idx], train_batch.aux_in[idx], train=True, rng=rng)
            l_price, d_price, l_aux, d_aux = _multitask_terms(
                out.price, out.aux, train_batch.target[idx], aux_train[idx], train_batch.weight[idx], mode
            )
            loss = l_price + cfg.aux_weight * l_aux
            if not math.isfinite(loss):
                raise TrainingDivergence(
                    f"non-finite loss at epoch {epoch}, batch {lo // cfg.batch_size}: "
                    f"price={l_price}, aux={l_aux}"
                )
            model.zero_grads()
            model.backward(d_price, cfg.aux_weight * d_aux)
            opt.step(model.named_grads())
            loss_acc += loss * idx.size
            seen += idx.size
        valid_loss = _validation_loss(model, valid_batch, aux_valid, cfg)
        record.history.append((loss_acc / seen, valid_loss))
        if valid_loss < best_loss:
            best_loss = valid_loss
            best_copy = (
                {k: v.copy() for k, v in params.items()},
                {k: v.copy() for k, v in state.items()},
            )
            record.best_epoch = epoch
            stall = 0
        else:
            stall += 1
        if stall >= cfg.patience:
            break
        if cfg.max_seconds is not None and time.perf_counter() - started > cfg.max_seconds:
            break
    record.seconds = time.perf_counter() - started

    if best_copy is not None:
        for k, v in params.items():
            v[...] = best_copy[0][k]
        for k, v in state.items():
            v[...] = best_copy[1][k]
    record.metrics = {
        "train": evaluate(model, data.train),
        "valid": evaluate(model, data.valid),
        "test": evaluate(model, data.test),
    }
    return model, record


def validation_loss(model: Model, data: SplitDataset, cfg: TrainConfig) -> float:
    """The early-stopping criterion of `train`, recomputed on demand."""
    batch = stack_examples(data.valid)
    return _validation_loss(model, batch, _aux_matrix(batch, model.config.aux_targets), cfg)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _metrics_from_predictions(preds: np.ndarray, target: np.ndarray) -> Metrics:
    err = preds - target
    sse = float(err @ err)
    rmse = math.sqrt(sse / target.shape[0])
    ss_tot = float(((target - target.mean()) ** 2).sum())
    r2 = 1.0 - sse / ss_tot if ss_tot > 0 else (1.0 if sse == 0 else -math.inf)
    return Metrics(rmse=rmse, r2=r2, n=target.shape[0])


def predict_log_prices(model: Model, examples: list[Example]) -> np.ndarray:
    """Eval-mode log-price predictions for a list of examples."""
    return _forward_eval(model, stack_examples(examples))[0]


def evaluate(model: Model, examples: list[Example]) -> Metrics:
    """Unweighted RMSE / R^2 on log prices, eval mode."""
    if not examples:
        raise ValueError("empty example list")
    batch = stack_examples(examples)
    preds, _ = _forward_eval(model, batch)
    return _metrics_from_predictions(preds, batch.target)


def per_pattern_metrics(model: Model, examples: list[Example], patterns=EVAL_PATTERNS):
    """RMSE restricted to the plates matching each evaluation pattern.

    Returns rows (pattern, rmse_or_None, n); empty populations get n=0.
    """
    batch = stack_examples(examples)
    preds, _ = _forward_eval(model, batch)
    rows = []
    for pattern in patterns:
        mask = np.array([pattern_class(e.plate, pattern) for e in examples], dtype=bool)
        n = int(mask.sum())
        if n == 0:
            rows.append((pattern, None, 0))
            continue
        err = preds[mask] - batch.target[mask]
        rows.append((pattern, math.sqrt(float(err @ err) / n), n))
    return rows


def calibration_bins(model: Model, examples: list[Example], bin_width_hkd: float = 1000.0):
    """Bin predicted HKD prices and report mean realized HKD prices per bin.

    Returns rows (bin_center_hkd, mean_actual_hkd, n) sorted by bin center.
    """
    if not examples:
        raise ValueError("empty example list")
    batch = stack_examples(examples)
    preds, _ = _forward_eval(model, batch)
    pred_hkd = np.exp(preds)
    actual_hkd = np.array([e.price_hkd for e in examples])
    bins: dict[int, list[float]] = {}
    for p, a in zip(pred_hkd, actual_hkd):
        bins.setdefault(int(p // bin_width_hkd), []).append(a)
    return [
        ((b + 0.5) * bin_width_hkd, float(np.mean(vals)), len(vals))
        for b, vals in sorted(bins.items())
    ]


def calibration_slope(rows) -> float:
    """Unweighted OLS slope of bin mean-actual prices on bin centers."""
    centers = np.array([r[0] for r in rows])
    means = np.array([r[1] for r in rows])
    cx = centers - centers.mean()
    return float((cx * (means - means.mean())).sum() / (cx * cx).sum())


def write_calibration_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_center_hkd", "mean_actual_hkd", "n"])
        for center, mean, n in rows:
            writer.writerow([repr(center), repr(mean), n])


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


def _design_matrix(batch: Batch) -> np.ndarray:
    return np.concatenate([np.ones((batch.target.shape[0], 1)), batch.aux_targets, batch.aux_in], axis=1)


def baseline_hedonic(data: SplitDataset) -> dict[str, Metrics]:
    """OLS of log price on the 32 characteristics + market inputs + intercept,
    solved by normal equations with a tiny ridge jitter."""
    if not data.train:
        raise ValueError("empty training split")
    train_batch = stack_examples(data.train)
    x = _design_matrix(train_batch)
    xtx = x.T @ x + 1e-8 * np.eye(x.shape[1])
    beta = np.linalg.solve(xtx, x.T @ train_batch.target)
    out = {}
    for split in ("train", "valid", "test"):
        batch = stack_examples(data.split(split))
        preds = _design_matrix(batch) @ beta
        out[split] = _metrics_from_predictions(preds, batch.target)
    return out


def _token_counts(tokens: np.ndarray) -> np.ndarray:
    counts = np.zeros((tokens.shape[0], 37))
    for i, row in enumerate(tokens):
        counts[i] = np.bincount(row, minlength=37)
    return counts


def baseline_unigram_knn(data: SplitDataset, k: int = 10) -> dict[str, Metrics]:
    """Mean log price of the k nearest training plates by Euclidean distance
    between 37-dimensional token-count vectors; distance ties break by
    canonical plate order, then original position."""
    if not data.train:
        raise ValueError("empty training split")
    train_counts = _token_counts(stack_examples(data.train).tokens)
    train_y = np.array([e.target for e in data.train])
    # rank of each training row in canonical order (stable within duplicates)
    order = sorted(range(len(data.train)), key=lambda i: (data.train[i].plate.canonical(), i))
    plate_rank = np.empty(len(order), dtype=np.int64)
    for rank, idx in enumerate(order):
        plate_rank[idx] = rank
    sq_norms = (train_counts * train_counts).sum(axis=1)
    indices = np.arange(len(data.train))

    out = {}
    for split in ("train", "valid", "test"):
        batch = stack_examples(data.split(split))
        counts = _token_counts(batch.tokens)
        preds = np.empty(batch.target.shape[0])
        for lo in range(0, counts.shape[0], 512):
            hi = min(lo + 512, counts.shape[0])
            d2 = sq_norms + (counts[lo:hi] ** 2).sum(axis=1)[:, None] - 2.0 * counts[lo:hi] @ train_counts.T
            for row in range(hi - lo):
                dist = d2[row]
                kth = np.partition(dist, k - 1)[k - 1]
                cand = np.flatnonzero(dist <= kth)
                picked = cand[np.lexsort((indices[cand], plate_rank[cand], dist[cand]))][:k]
                preds[lo + row] = train_y[picked].mean()
        out[split] = _metrics_from_predictions(preds, batch.target)
    return out


# ---------------------------------------------------------------------------
# Grid runner
# ---------------------------------------------------------------------------


def derive_seed(master: int, config_index: int, run_index: int) -> int:
    return int(np.random.SeedSequence([master, config_index, run_index]).generate_state(1)[0])


def run_grid(configs: list[tuple[str, ModelConfig]], data: SplitDataset, cfg: TrainConfig) -> list[RunRecord]:
    """Train every configuration `runs_per_config` times with derived seeds.

    Failures are recorded on the run record and the grid continues.
    """
    if not configs:
        raise ValueError("empty configuration list")
    records = []
    for i, (config_id, model_cfg) in enumerate(configs):
        for run in range(cfg.runs_per_config):
            seed = derive_seed(cfg.seed, i, run)
            run_cfg = replace(cfg, seed=seed)
            try:
                model = Model(replace(model_cfg, seed=seed))
                _, record = train(model, data, run_cfg)
                record.config_id = config_id
                record.run = run
            except Exception as exc:  # noqa: BLE001 - record and continue
                record = RunRecord(config_id=config_id, run=run, seed=seed, error=str(exc))
            records.append(record)
    return records


RUN_CSV_HEADER = (
    "config_id,run,seed,best_epoch,train_rmse,valid_rmse,test_rmse,"
    "train_r2,valid_r2,test_r2,params,seconds"
)


def write_run_records(records: list[RunRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(RUN_CSV_HEADER.split(","))
        for r in records:
            def met(split, fieldname):
                if r.error or split not in r.metrics:
                    return "nan"
                return repr(getattr(r.metrics[split], fieldname))

            writer.writerow(
                [
                    r.config_id,
                    r.run,
                    r.seed,
                    r.best_epoch,
                    met("train", "rmse"),
                    met("valid", "rmse"),
                    met("test", "rmse"),
                    met("train", "r2"),
                    met("valid", "r2"),
                    met("test", "r2"),
                    r.params,
                    repr(r.seconds),
                ]
            )


def read_run_records(path) -> list[dict]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            parsed: dict = dict(row)
            for key in ("run", "seed", "best_epoch", "params"):
                parsed[key] = int(parsed[key])
            for key in RUN_CSV_HEADER.split(",")[4:10] + ["seconds"]:
                parsed[key] = float(parsed[key])
            rows.append(parsed)
    return rows


# ---------------------------------------------------------------------------
# Rank statistics
# ---------------------------------------------------------------------------


def mann_whitney(a, b) -> tuple[float, float]:
    """Rank-sum test with tie correction: returns (z, two-sided p).

    z is computed from the first sample's U statistic, so a sample of smaller
    values yields negative z; identical pooled values give z = 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be nonempty")
    pooled = np.concatenate([a, b])
    ranks = rankdata(pooled)
    n1, n2 = a.size, b.size
    n = n1 + n2
    u1 = float(ranks[:n1].sum()) - n1 * (n1 + 1) / 2.0
    mean_u = n1 * n2 / 2.0
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = float((tie_counts.astype(np.float64) ** 3 - tie_counts).sum())
    var_u = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    if var_u <= 0:
        return 0.0, 1.0
    z = (u1 - mean_u) / math.sqrt(var_u)
    p = float(erfc(abs(z) / math.sqrt(2.0)))
    return z, p
