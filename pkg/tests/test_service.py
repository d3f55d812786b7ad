import json
import math

import numpy as np
import pytest
from fastapi.testclient import TestClient

from platemark.dataset import build_dataset, generate_synthetic
from platemark.mdn import fit_mdn
from platemark.model import Model, ModelConfig, load_model, save_model
from platemark.search import build_index, load_index, query, save_index
from platemark.service import create_app, load_service_state
from platemark.training import TrainConfig, predict_log_prices, train


@pytest.fixture(scope="module")
def service_state(tmp_path_factory):
    root = tmp_path_factory.mktemp("svc")
    records, market = generate_synthetic(600, seed=51, noise_sigma=0.3)
    from platemark.dataset import write_auctions_csv, write_market_csv

    write_auctions_csv(records, root / "auctions.csv")
    write_market_csv(market, root / "market.csv")

    data = build_dataset(records, market, seed=2)
    model = Model(ModelConfig(extractor="rescnn", embedding=8, layers=2, width=64, seed=5))
    model, _ = train(model, data, TrainConfig(batch_size=128, max_epochs=6, patience=4, seed=5))

    preds = predict_log_prices(model, data.train)
    pairs = np.stack([preds, np.array([e.target for e in data.train])], axis=1)
    mdn = fit_mdn(pairs, n_components=3, hidden=32, epochs=300, seed=0)
    save_model(
        model,
        root / "model.pmrk",
        extra_doc={
            "split_seed": 2,
            "norm": {"aux_mean": data.aux_mean.tolist(), "aux_std": data.aux_std.tolist()},
        },
        mdn=mdn,
    )
    bundle = load_model(root / "model.pmrk")

    universe = {}
    for e in data.train + data.valid + data.test:
        universe.setdefault(e.plate.canonical(), e.plate)
    plates = [universe[k] for k in sorted(universe)]
    save_index(build_index(bundle.model, plates), root / "index.pmix")
    return load_service_state(root / "model.pmrk", root / "index.pmix", root)


@pytest.fixture(scope="module")
def client(service_state):
    return TestClient(create_app(service_state))


@pytest.fixture()
def empty_client():
    return TestClient(create_app(None))


class TestHealth:
    def test_unloaded_returns_503(self, empty_client):
        assert empty_client.get("/healthz").status_code == 503

    def test_all_endpoints_503_before_load(self, empty_client):
        for path in ("/api/v1/estimate", "/api/v1/distribution", "/api/v1/similar", "/api/v1/history"):
            assert empty_client.get(path, params={"plate": "HK1"}).status_code == 503

    def test_loaded_reports_version(self, client, service_state):
        body = client.get("/healthz").json()
        assert body["model_version"] == service_state.version


class TestEstimate:
    def test_canonicalizes_plate(self, client):
        r = client.get("/api/v1/estimate", params={"plate": "hk1", "date": "2005-06-01"})
        assert r.status_code == 200
        body = r.json()
        assert body["plate"] == "HK 1"
        assert body["price_hkd"] == pytest.approx(math.exp(body["log_price_hkd"]))

    def test_grammar_error(self, client):
        r = client.get("/api/v1/estimate", params={"plate": "H12"})
        assert r.status_code == 400
        assert r.json()["error"]["code"] == "PLATE_GRAMMAR"
        assert r.json()["error"]["grammar"] == "PREFIX_LENGTH"

    def test_deterministic_bodies(self, client):
        a = client.get("/api/v1/estimate", params={"plate": "BC6554", "date": "2010-03-15"})
        b = client.get("/api/v1/estimate", params={"plate": "BC6554", "date": "2010-03-15"})
        assert a.content == b.content

    def test_date_before_coverage(self, client):
        r = client.get("/api/v1/estimate", params={"plate": "28", "date": "1901-01-01"})
        assert r.status_code == 422
        assert r.json()["error"]["code"] == "DATE_RANGE"

    def test_bad_date_format(self, client):
        r = client.get("/api/v1/estimate", params={"plate": "28", "date": "01/02/2003"})
        assert r.status_code == 422

    def test_date_beyond_series_uses_latest_snapshot(self, client):
        r = client.get("/api/v1/estimate", params={"plate": "28", "date": "2030-01-01"})
        assert r.status_code == 200

    def test_missing_plate_param(self, client):
        assert client.get("/api/v1/estimate").status_code == 400

    def test_float_precision_in_json(self, client):
        raw = client.get("/api/v1/estimate", params={"plate": "88", "date": "2012-01-05"}).text
        value = json.loads(raw)["log_price_hkd"]
        assert float(repr(value)) == value  # full round-trip precision survives


class TestDistribution:
    def test_components_and_quantiles(self, client):
        r = client.get("/api/v1/distribution", params={"plate": "2112", "date": "2008-05-05"})
        assert r.status_code == 200
        body = r.json()
        weights = [c["weight"] for c in body["components"]]
        assert abs(sum(weights) - 1.0) < 1e-6
        q_log = body["quantiles_log_hkd"]
        q_hkd = body["quantiles_hkd"]
        levels = ["p05", "p25", "p50", "p75", "p95"]
        values = [q_log[l] for l in levels]
        assert values == sorted(values)
        assert len(set(values)) == len(values)
        for level in levels:
            assert q_hkd[level] == math.exp(q_log[level])


class TestSimilar:
    def test_top_k_excludes_query(self, client, service_state):
        r = client.get("/api/v1/similar", params={"plate": service_state.index.plates[5], "k": 3})
        assert r.status_code == 200
        results = r.json()["results"]
        assert len(results) == 3
        assert service_state.index.plates[5] not in [x["plate"] for x in results]

    def test_matches_search_module(self, client, service_state):
        from platemark.plates import parse_plate

        plate = parse_plate(service_state.index.plates[9])
        want = query(service_state.index, plate, 5, model=service_state.model)
        r = client.get("/api/v1/similar", params={"plate": plate.canonical(), "k": 5})
        got = [(x["plate"], x["distance"]) for x in r.json()["results"]]
        assert got == [(name, pytest.approx(dist)) for name, dist in want]

    def test_k_bounds(self, client):
        assert client.get("/api/v1/similar", params={"plate": "28", "k": 0}).status_code == 422
        assert client.get("/api/v1/similar", params={"plate": "28", "k": 101}).status_code == 422
        assert client.get("/api/v1/similar", params={"plate": "28", "k": "abc"}).status_code == 422

    def test_last_sale_fields(self, client, service_state):
        name = service_state.index.plates[0]
        r = client.get("/api/v1/similar", params={"plate": "9999", "k": 10})
        for item in r.json()["results"]:
            sale = item["last_sale"]
            if sale is not None:
                assert sale["price_hkd"] > 0
                assert "date" in sale


class TestHistory:
    def test_unknown_plate_empty_list(self, client):
        r = client.get("/api/v1/history", params={"plate": "QQ1"})
        assert r.status_code == 200
        assert r.json()["records"] == []

    def test_newest_first_and_unsold_entries(self, client, service_state):
        target = None
        for name, records in service_state.history.items():
            if any(not r.sold for r in records):
                target = name
                break
        assert target is not None
        body = client.get("/api/v1/history", params={"plate": target}).json()
        whens = [r["datetime"] for r in body["records"]]
        assert whens == sorted(whens, reverse=True)
        unsold = [r for r in body["records"] if r["status"] == "U"]
        assert unsold and all(r["price_hkd"] is None for r in unsold)


class TestFuzz:
    def test_malformed_queries_never_500(self, client):
        rng = np.random.default_rng(0)
        alphabet = list("abcXYZ0189 -_%&?=/#!@\"'\\é中")
        paths = ["/api/v1/estimate", "/api/v1/distribution", "/api/v1/similar", "/api/v1/history"]
        for i in range(2000):
            path = paths[i % len(paths)]
            plate = "".join(rng.choice(alphabet, size=rng.integers(0, 12)))
            params = {"plate": plate}
            if rng.random() < 0.5:
                params["date"] = "".join(rng.choice(alphabet, size=6))
            if rng.random() < 0.5:
                params["k"] = "".join(rng.choice(alphabet, size=3))
            r = client.get(path, params=params)
            assert r.status_code < 500, (path, params, r.status_code)
