"""Auction records, market covariates, training examples, and the synthetic corpus.

The real auction archive is proprietary, so experiments run on a generated
corpus whose prices come from a known deterministic valuation rule plus
lognormal noise. That gives every experiment a ground truth to measure
against while keeping the ingestion path identical to the CSV formats a real
archive would use.
"""

from __future__ import annotations

import csv
import math
from bisect import bisect_right
from dataclasses import dataclass, field
from datetime import date, datetime, time

import numpy as np

from platemark.plates import N_AUX, Plate, aux_features, encode_plate, parse_plate

RESERVE_HKD = 1000.0
UNSOLD_FRACTION = 0.126
OVERWEIGHT_THRESHOLD = 12.5
OVERWEIGHT_FACTOR = 40.0

AUX_IN_DIM = 7

AUCTIONS_HEADER = ["plate", "price_hkd", "datetime", "status"]
MARKET_HEADER = ["date", "cpi", "stock_index", "ret_1y", "ret_1m"]


class DataError(ValueError):
    """Malformed input data (bad CSV row, uncovered date, ...)."""


@dataclass(frozen=True)
class AuctionRecord:
    """One auction outcome; `price_hkd` is None when the lot went unsold."""

    plate: Plate
    when: datetime
    price_hkd: float | None

    def __post_init__(self):
        if self.price_hkd is not None and self.price_hkd < RESERVE_HKD:
            raise DataError(f"sold price {self.price_hkd} below the HK${RESERVE_HKD:.0f} reserve")

    @property
    def sold(self) -> bool:
        return self.price_hkd is not None


@dataclass(frozen=True)
class MarketSnapshot:
    date: date
    cpi: float
    stock_index: float
    ret_1y: float
    ret_1m: float


@dataclass
class Example:
    """One training example: encoded plate, market inputs, log-price target,
    characteristic targets, and its loss weight."""

    tokens: np.ndarray  # (6,) int64
    aux_in: np.ndarray  # (7,) float64, standardized
    target: float  # natural log of the HKD price
    aux_targets: np.ndarray  # (32,) float64
    weight: float
    plate: Plate
    when: datetime
    price_hkd: float


@dataclass
class SplitDataset:
    train: list[Example]
    valid: list[Example]
    test: list[Example]
    aux_mean: np.ndarray  # (7,) train-split means of the raw market inputs
    aux_std: np.ndarray  # (7,) train-split standard deviations
    seed: int
    market: list[MarketSnapshot] = field(default_factory=list)

    def split(self, name: str) -> list[Example]:
        return {"train": self.train, "valid": self.valid, "test": self.test}[name]


@dataclass
class Batch:
    """Column-stacked examples for vectorized forward passes."""

    tokens: np.ndarray  # (N, 6)
    aux_in: np.ndarray  # (N, 7)
    target: np.ndarray  # (N,)
    aux_targets: np.ndarray  # (N, 32)
    weight: np.ndarray  # (N,)


def stack_examples(examples: list[Example]) -> Batch:
    return Batch(
        tokens=np.stack([e.tokens for e in examples]),
        aux_in=np.stack([e.aux_in for e in examples]),
        target=np.array([e.target for e in examples]),
        aux_targets=np.stack([e.aux_targets for e in examples]),
        weight=np.array([e.weight for e in examples]),
    )


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def _parse_when(text: str, where: str) -> datetime:
    try:
        parsed = datetime.fromisoformat(text)
    except ValueError as exc:
        raise DataError(f"{where}: bad datetime {text!r}") from exc
    return parsed


def load_auctions(path) -> list[AuctionRecord]:
    """Read the auctions CSV (`plate,price_hkd,datetime,status`)."""
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if header != AUCTIONS_HEADER:
            raise DataError(f"bad auctions header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            where = f"{path}:{lineno}"
            if len(row) != 4:
                raise DataError(f"{where}: expected 4 fields, got {len(row)}")
            plate_text, price_text, when_text, status = row
            try:
                plate = parse_plate(plate_text)
            except ValueError as exc:
                raise DataError(f"{where}: {exc}") from exc
            when = _parse_when(when_text, where)
            if status == "S":
                try:
                    price = float(price_text)
                except ValueError as exc:
                    raise DataError(f"{where}: bad price {price_text!r}") from exc
                if not math.isfinite(price) or price <= 0:
                    raise DataError(f"{where}: non-positive price {price_text!r}")
            elif status == "U":
                if price_text != "":
                    raise DataError(f"{where}: unsold rows must leave the price empty")
                price = None
            else:
                raise DataError(f"{where}: status must be S or U, got {status!r}")
            try:
                records.append(AuctionRecord(plate, when, price))
            except DataError as exc:
                raise DataError(f"{where}: {exc}") from exc
    return records


def load_market(path) -> list[MarketSnapshot]:
    """Read the market CSV (`date,cpi,stock_index,ret_1y,ret_1m`)."""
    snaps = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MARKET_HEADER:
            raise DataError(f"bad market header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            where = f"{path}:{lineno}"
            if len(row) != 5:
                raise DataError(f"{where}: expected 5 fields, got {len(row)}")
            try:
                snap = MarketSnapshot(
                    date.fromisoformat(row[0]),
                    float(row[1]),
                    float(row[2]),
                    float(row[3]),
                    float(row[4]),
                )
            except ValueError as exc:
                raise DataError(f"{where}: {exc}") from exc
            if snap.cpi <= 0 or snap.stock_index <= 0:
                raise DataError(f"{where}: cpi and stock index must be positive")
            if not (math.isfinite(snap.ret_1y) and math.isfinite(snap.ret_1m)):
                raise DataError(f"{where}: non-finite return")
            if snaps and snap.date <= snaps[-1].date:
                raise DataError(f"{where}: dates must strictly increase")
            snaps.append(snap)
    return snaps


def write_auctions_csv(records: list[AuctionRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(AUCTIONS_HEADER)
        for r in records:
            price = "" if r.price_hkd is None else repr(r.price_hkd)
            status = "U" if r.price_hkd is None else "S"
            writer.writerow([r.plate.canonical(), price, r.when.isoformat(), status])


def write_market_csv(snaps: list[MarketSnapshot], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MARKET_HEADER)
        for s in snaps:
            writer.writerow(
                [s.date.isoformat(), repr(s.cpi), repr(s.stock_index), repr(s.ret_1y), repr(s.ret_1m)]
            )


# ---------------------------------------------------------------------------
# Feature assembly and splitting
# ---------------------------------------------------------------------------


def snapshot_at(market: list[MarketSnapshot], when: date) -> MarketSnapshot:
    """Most recent snapshot on or before `when`; never a future one."""
    dates = [s.date for s in market]
    idx = bisect_right(dates, when)
    if idx == 0:
        raise DataError(f"date {when} precedes market coverage ({dates[0] if dates else 'empty'})")
    return market[idx - 1]


def market_features(when: datetime, snap: MarketSnapshot) -> np.ndarray:
    """Raw (unstandardized) 7-vector of market inputs for one auction.

    Layout: year fraction, month-of-year sine/cosine, cpi level, stock level,
    1-year return, 1-month return.
    """
    tt = when.timetuple()
    day_frac = (tt.tm_yday - 1 + (when.hour * 3600 + when.minute * 60 + when.second) / 86400.0) / 365.25
    month_angle = 2.0 * math.pi * (when.month - 1) / 12.0
    return np.array(
        [
            when.year + day_frac,
            math.sin(month_angle),
            math.cos(month_angle),
            snap.cpi,
            snap.stock_index,
            snap.ret_1y,
            snap.ret_1m,
        ]
    )


def sample_weight(target_log_price: float) -> float:
    """Loss weight of one example: the log price itself (floored at 1),
    multiplied by 40 strictly above log price 12.5."""
    level = max(float(target_log_price), 1.0)
    if level > OVERWEIGHT_THRESHOLD:
        return OVERWEIGHT_FACTOR * level
    return level


def build_dataset(records: list[AuctionRecord], market: list[MarketSnapshot], seed: int) -> SplitDataset:
    """Drop unsold lots, join market covariates, standardize, and split 64/16/20.

    Standardization parameters come from the training split only; the shuffle
    and split are deterministic in `seed`.
    """
    sold = [r for r in records if r.sold]
    raw = np.empty((len(sold), AUX_IN_DIM))
    examples = []
    for i, rec in enumerate(sold):
        snap = snapshot_at(market, rec.when.date())
        raw[i] = market_features(rec.when, snap)
        target = math.log(rec.price_hkd)
        examples.append(
            Example(
                tokens=encode_plate(rec.plate),
                aux_in=raw[i],  # replaced after standardization
                target=target,
                aux_targets=aux_features(rec.plate).astype(np.float64),
                weight=sample_weight(target),
                plate=rec.plate,
                when=rec.when,
                price_hkd=rec.price_hkd,
            )
        )

    n = len(examples)
    order = np.random.default_rng(seed).permutation(n)
    n_train = round(0.64 * n)
    n_trainvalid = round(0.80 * n)
    idx_train = order[:n_train]
    idx_valid = order[n_train:n_trainvalid]
    idx_test = order[n_trainvalid:]

    if len(idx_train):
        mean = raw[idx_train].mean(axis=0)
        std = raw[idx_train].std(axis=0)
    else:
        mean = np.zeros(AUX_IN_DIM)
        std = np.ones(AUX_IN_DIM)
    std = np.where(std < 1e-12, 1.0, std)
    standardized = (raw - mean) / std
    for i, ex in enumerate(examples):
        ex.aux_in = standardized[i]

    return SplitDataset(
        train=[examples[i] for i in idx_train],
        valid=[examples[i] for i in idx_valid],
        test=[examples[i] for i in idx_test],
        aux_mean=mean,
        aux_std=std,
        seed=seed,
        market=list(market),
    )


# ---------------------------------------------------------------------------
# Synthetic corpus with a known valuation rule
# ---------------------------------------------------------------------------

_DIGIT_LENGTH_DIST = ((4, 0.55), (3, 0.25), (2, 0.15), (1, 0.05))
_PREFIXLESS_PROB = 0.25
_MARKET_MONTHS = 242  # 1997-01 .. 2017-02


def oracle_log_price(plate: Plate, snap: MarketSnapshot, stock_stats: tuple[float, float] | None = None) -> float:
    """Deterministic ground-truth valuation of a plate in log HKD.

    `stock_stats` is the (mean, std) of the stock-index series used to
    standardize the market level; omitted means a neutral market (z = 0).
    Floored at the log of the HK$1,000 reserve.
    """
    d = plate.digits
    f = aux_features(plate)
    count_8 = int(f[30])
    value = 8.5
    value += 1.2 * (4 - len(d))
    value += 0.9 * count_8
    value += 0.4 * int(f[25])  # count_3
    value -= 0.25 * int(f[26])  # count_4
    symmetric = bool(f[6])
    value += 1.4 * symmetric
    value += 2.2 * bool(f[20])  # aaaa
    value += 1.8 * bool(f[16])  # abcd
    value += 1.0 * bool(f[17])  # dcba
    value += 0.8 * bool(f[0])  # repeated letters
    value += 0.7 * (bool(f[2]) or bool(f[3]))  # HK / XX prefix
    value += 0.6 * bool(f[4])  # x00
    value += 1.0 * bool(f[5])  # x000
    value += 0.9 * ("168" in d)
    if count_8 >= 2 and symmetric:
        value += 1.5
    # paired lucky digit: exactly two eights carry a premium of their own,
    # a non-monotone step no linear function of the counts can express
    if count_8 == 2:
        value += 1.7
    if stock_stats is not None:
        mean, std = stock_stats
        value += 0.3 * (snap.stock_index - mean) / std
    return max(value, math.log(RESERVE_HKD))


def sample_plate(rng: np.random.Generator) -> Plate:
    """Draw one plate: 25% prefixless, length-skewed digits, letters nearly
    uniform with HK/XX/doubled prefixes oversampled 3x."""
    if rng.random() < _PREFIXLESS_PROB:
        prefix = ""
    else:
        while True:
            first = chr(ord("A") + rng.integers(26))
            second = chr(ord("A") + rng.integers(26))
            prefix = first + second
            special = first == second or prefix in ("HK", "XX")
            # keep specials always; keep the rest with probability 1/3
            if special or rng.random() < 1.0 / 3.0:
                break
    r = rng.random()
    acc = 0.0
    length = _DIGIT_LENGTH_DIST[-1][0]
    for val, prob in _DIGIT_LENGTH_DIST:
        acc += prob
        if r < acc:
            length = val
            break
    digits = str(rng.integers(1, 10))
    for _ in range(length - 1):
        digits += str(rng.integers(0, 10))
    return Plate(prefix, digits)


def generate_market(rng: np.random.Generator, months: int = _MARKET_MONTHS) -> list[MarketSnapshot]:
    """Monthly market series as a seeded random walk starting 1997-01."""
    log_stock = math.log(10000.0) + np.concatenate(
        [[0.0], np.cumsum(rng.normal(0.004, 0.04, size=months - 1))]
    )
    stock = np.exp(log_stock)
    cpi = 60.0 * np.exp(np.concatenate([[0.0], np.cumsum(rng.normal(0.0015, 0.003, size=months - 1))]))
    snaps = []
    for m in range(months):
        year, month = divmod(m + (1997 * 12), 12)
        ret_1m = stock[m] / stock[m - 1] - 1.0 if m >= 1 else 0.0
        ret_1y = stock[m] / stock[m - 12] - 1.0 if m >= 12 else 0.0
        snaps.append(MarketSnapshot(date(year, month + 1, 1), float(cpi[m]), float(stock[m]), float(ret_1y), float(ret_1m)))
    return snaps


def stock_stats(market: list[MarketSnapshot]) -> tuple[float, float]:
    levels = np.array([s.stock_index for s in market])
    return float(levels.mean()), float(levels.std())


def generate_synthetic(n: int, seed: int, noise_sigma: float) -> tuple[list[AuctionRecord], list[MarketSnapshot]]:
    """Generate `n` auction records plus the market series they reference.

    Prices are exp(oracle + N(0, noise_sigma^2)) floored at the reserve;
    12.6% of records are marked unsold. Fully deterministic in `seed`.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    market = generate_market(rng)
    stats = stock_stats(market)
    records = []
    for _ in range(n):
        plate = sample_plate(rng)
        month = int(rng.integers(len(market)))
        snap = market[month]
        day = int(rng.integers(1, 29))
        when = datetime.combine(snap.date.replace(day=day), time(9, 30))
        log_price = oracle_log_price(plate, snap, stats) + rng.normal(0.0, noise_sigma)
        price = max(math.exp(log_price), RESERVE_HKD)
        unsold = rng.random() < UNSOLD_FRACTION
        records.append(AuctionRecord(plate, when, None if unsold else price))
    return records, market
