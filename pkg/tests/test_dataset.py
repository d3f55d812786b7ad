import math
from datetime import date, datetime

import numpy as np
import pytest

from platemark.dataset import (
    AuctionRecord,
    DataError,
    MarketSnapshot,
    build_dataset,
    generate_synthetic,
    load_auctions,
    load_market,
    market_features,
    oracle_log_price,
    sample_weight,
    snapshot_at,
    stock_stats,
    write_auctions_csv,
    write_market_csv,
)
from platemark.plates import parse_plate


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


class TestLoadAuctions:
    def test_sold_row(self, tmp_path):
        p = _write(tmp_path / "a.csv", "plate,price_hkd,datetime,status\n28,2300000,2016-02-20,S\n")
        (rec,) = load_auctions(p)
        assert rec.plate.canonical() == "28"
        assert rec.price_hkd == pytest.approx(2.3e6)
        assert rec.when == datetime(2016, 2, 20)

    def test_unsold_row(self, tmp_path):
        p = _write(tmp_path / "a.csv", "plate,price_hkd,datetime,status\nXX123,,2005-03-01,U\n")
        (rec,) = load_auctions(p)
        assert not rec.sold
        assert rec.price_hkd is None

    def test_empty_file(self, tmp_path):
        assert load_auctions(_write(tmp_path / "a.csv", "")) == []

    @pytest.mark.parametrize(
        "row",
        [
            "H12,1000,2001-01-01,S",  # invalid plate
            "28,-5,2001-01-01,S",  # non-positive price
            "28,0,2001-01-01,S",
            "28,abc,2001-01-01,S",
            "28,1000,01/02/2001,S",  # bad datetime
            "28,1000,2001-01-01,X",  # bad status
            "28,1000,2001-01-01",  # short row
            "28,999,2001-01-01,U",  # unsold must have empty price
            "28,500,2001-01-01,S",  # below reserve
        ],
    )
    def test_malformed_rows_report_line(self, tmp_path, row):
        p = _write(tmp_path / "a.csv", f"plate,price_hkd,datetime,status\n{row}\n")
        with pytest.raises(DataError) as info:
            load_auctions(p)
        assert ":2" in str(info.value)


class TestMarket:
    def test_round_trip(self, tmp_path):
        snaps = [
            MarketSnapshot(date(2000, 1, 1), 55.0, 9000.0, 0.1, 0.01),
            MarketSnapshot(date(2000, 2, 1), 55.5, 9100.0, 0.12, 0.011),
        ]
        path = tmp_path / "m.csv"
        write_market_csv(snaps, path)
        assert load_market(path) == snaps

    def test_dates_must_increase(self, tmp_path):
        p = _write(
            tmp_path / "m.csv",
            "date,cpi,stock_index,ret_1y,ret_1m\n2000-02-01,55,9000,0,0\n2000-01-01,55,9000,0,0\n",
        )
        with pytest.raises(DataError):
            load_market(p)

    def test_join_never_uses_future_snapshot(self):
        snaps = [
            MarketSnapshot(date(2000, 1, 1), 55.0, 9000.0, 0.0, 0.0),
            MarketSnapshot(date(2000, 2, 1), 56.0, 9100.0, 0.0, 0.0),
        ]
        assert snapshot_at(snaps, date(2000, 1, 31)).date == date(2000, 1, 1)
        assert snapshot_at(snaps, date(2000, 2, 1)).date == date(2000, 2, 1)
        with pytest.raises(DataError):
            snapshot_at(snaps, date(1999, 12, 31))


class TestSampleWeight:
    def test_plain_log_price(self):
        assert sample_weight(6.9078) == pytest.approx(6.9078)

    def test_threshold_is_exclusive(self):
        assert sample_weight(12.5) == pytest.approx(12.5)

    def test_overweight_above_threshold(self):
        assert sample_weight(12.612) == pytest.approx(504.48)

    def test_floor_for_tiny_prices(self):
        assert sample_weight(0.01) == 1.0

    def test_monotone_with_single_jump(self):
        grid = np.linspace(1.0, 16.0, 4001)
        w = np.array([sample_weight(v) for v in grid])
        assert np.all(np.diff(w) >= 0)
        jumps = np.where(np.diff(w) > 1.0)[0]
        assert len(jumps) == 1
        assert grid[jumps[0]] == pytest.approx(12.5, abs=0.01)


class TestBuildDataset:
    @pytest.fixture()
    def corpus(self):
        return generate_synthetic(100, seed=5, noise_sigma=0.2)

    def test_unsold_dropped_and_split_proportions(self):
        records, market = generate_synthetic(400, seed=9, noise_sigma=0.2)
        sold = sum(1 for r in records if r.sold)
        data = build_dataset(records, market, seed=1)
        n = len(data.train) + len(data.valid) + len(data.test)
        assert n == sold
        assert abs(len(data.train) - 0.64 * n) <= 1
        assert abs(len(data.valid) - 0.16 * n) <= 1
        assert abs(len(data.test) - 0.20 * n) <= 1

    def test_example_counts_100_records(self):
        rng = np.random.default_rng(0)
        market = [MarketSnapshot(date(2000, 1, 1), 55.0, 9000.0, 0.0, 0.0)]
        records = []
        for i in range(100):
            sold = i >= 12
            records.append(
                AuctionRecord(
                    parse_plate(str(1000 + i)),
                    datetime(2000, 1 + i % 12, 5),
                    2000.0 + float(rng.integers(0, 1000)) if sold else None,
                )
            )
        data = build_dataset(records, market, seed=3)
        n = len(data.train) + len(data.valid) + len(data.test)
        assert n == 88
        assert (len(data.train), len(data.valid), len(data.test)) == (56, 14, 18)

    def test_log_target(self, corpus):
        records, market = corpus
        records = [r for r in records if r.sold][:3]
        records[0] = AuctionRecord(records[0].plate, records[0].when, 1000.0)
        data = build_dataset(records, market, seed=0)
        all_examples = data.train + data.valid + data.test
        ex = next(e for e in all_examples if e.price_hkd == 1000.0)
        assert ex.target == pytest.approx(6.9078, abs=1e-4)

    def test_deterministic_split(self, corpus):
        records, market = corpus
        a = build_dataset(records, market, seed=7)
        b = build_dataset(records, market, seed=7)
        assert [e.plate for e in a.train] == [e.plate for e in b.train]
        assert [e.plate for e in a.test] == [e.plate for e in b.test]

    def test_splits_disjoint_all_seeds(self, corpus):
        records, market = corpus
        for seed in range(5):
            data = build_dataset(records, market, seed=seed)
            keys = [id(e) for e in data.train + data.valid + data.test]
            assert len(keys) == len(set(keys))

    def test_train_standardization(self, corpus):
        records, market = corpus
        data = build_dataset(records, market, seed=2)
        train = np.stack([e.aux_in for e in data.train])
        assert np.abs(train.mean(axis=0)).max() < 1e-9
        assert np.abs(train.var(axis=0) - 1.0).max() < 1e-9


class TestOracle:
    def _neutral_snap(self):
        return MarketSnapshot(date(2000, 1, 1), 60.0, 10000.0, 0.0, 0.0)

    def test_single_digit_plate(self):
        assert oracle_log_price(parse_plate("1"), self._neutral_snap()) == pytest.approx(12.1)

    def test_all_eights(self):
        assert oracle_log_price(parse_plate("8888"), self._neutral_snap()) == pytest.approx(17.2)

    def test_stock_sensitivity(self):
        snap = self._neutral_snap()
        lo = oracle_log_price(parse_plate("1"), snap, (10000.0, 1000.0))
        hi = oracle_log_price(parse_plate("1"), MarketSnapshot(date(2000, 1, 1), 60.0, 11000.0, 0.0, 0.0), (10000.0, 1000.0))
        assert hi - lo == pytest.approx(0.3)

    def test_noise_free_corpus_matches_oracle_exactly(self):
        records, market = generate_synthetic(500, seed=3, noise_sigma=0.0)
        stats = stock_stats(market)
        for rec in records:
            if not rec.sold:
                continue
            snap = snapshot_at(market, rec.when.date())
            want = max(oracle_log_price(rec.plate, snap, stats), math.log(1000.0))
            assert math.log(rec.price_hkd) == pytest.approx(want, abs=1e-12)


class TestGenerateSynthetic:
    def test_reproducible_byte_for_byte(self, tmp_path):
        files = []
        for run in range(2):
            records, market = generate_synthetic(1000, seed=7, noise_sigma=0.3)
            a = tmp_path / f"a{run}.csv"
            m = tmp_path / f"m{run}.csv"
            write_auctions_csv(records, a)
            write_market_csv(market, m)
            files.append((a.read_bytes(), m.read_bytes()))
        assert files[0] == files[1]
        assert len(load_auctions(tmp_path / "a0.csv")) == 1000

    def test_unsold_fraction(self):
        records, _ = generate_synthetic(10_000, seed=1, noise_sigma=0.3)
        frac = sum(1 for r in records if not r.sold) / len(records)
        assert abs(frac - 0.126) < 0.02

    def test_right_skewed_prices(self):
        records, _ = generate_synthetic(10_000, seed=2, noise_sigma=0.3)
        prices = np.array([r.price_hkd for r in records if r.sold])
        assert prices.mean() > np.median(prices)

    def test_market_features_shape(self):
        _, market = generate_synthetic(1, seed=0, noise_sigma=0.1)
        v = market_features(datetime(2001, 7, 15, 9, 30), market[54])
        assert v.shape == (7,)
        assert 2001.5 < v[0] < 2001.6
