"""Read-only HTTP inference service: price estimate, price distribution,
similar plates, and auction history for a plate.

All state is loaded once and never mutated by requests; a reload swaps the
whole state object atomically, so concurrent readers see either the old or
the new version, never a mix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import date, datetime, time
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from platemark.dataset import (
    AuctionRecord,
    DataError,
    MarketSnapshot,
    load_auctions,
    load_market,
    market_features,
    snapshot_at,
)
from platemark.mdn import MDNModel, mixture_quantile
from platemark.model import Model, load_model, model_fingerprint
from platemark.plates import Plate, PlateError, encode_plate, parse_plate
from platemark.search import LatentIndex, load_index, query

QUANTILE_LEVELS = (("p05", 0.05), ("p25", 0.25), ("p50", 0.50), ("p75", 0.75), ("p95", 0.95))
AUCTION_TIME = time(9, 30)


@dataclass
class ServiceState:
    model: Model
    mdn: MDNModel
    index: LatentIndex
    market: list[MarketSnapshot]
    history: dict[str, list[AuctionRecord]]  # canonical plate -> newest first
    aux_mean: np.ndarray
    aux_std: np.ndarray
    version: str

    def __post_init__(self):
        if model_fingerprint(self.model) != self.index.fingerprint:
            raise DataError("index was built from a different model version")

    @property
    def latest(self) -> MarketSnapshot:
        return self.market[-1]


def load_service_state(model_path, index_path, data_dir) -> ServiceState:
    bundle = load_model(model_path)
    if bundle.mdn is None:
        raise DataError(f"{model_path} has no fitted price-distribution network (run mdn-fit)")
    if "norm" not in bundle.doc:
        raise DataError(f"{model_path} is missing input standardization parameters")
    data_dir = Path(data_dir)
    market = load_market(data_dir / "market.csv")
    if not market:
        raise DataError("empty market series")
    records = load_auctions(data_dir / "auctions.csv")
    history: dict[str, list[AuctionRecord]] = {}
    for record in records:
        history.setdefault(record.plate.canonical(), []).append(record)
    for plates in history.values():
        plates.sort(key=lambda r: r.when, reverse=True)
    return ServiceState(
        model=bundle.model,
        mdn=bundle.mdn,
        index=load_index(index_path),
        market=market,
        history=history,
        aux_mean=np.array(bundle.doc["norm"]["aux_mean"]),
        aux_std=np.array(bundle.doc["norm"]["aux_std"]),
        version=model_fingerprint(bundle.model).hex(),
    )


def _error(status: int, code: str, message: str, **extra) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": {"code": code, "message": message, **extra}})


def _estimate_log_price(state: ServiceState, plate: Plate, when: datetime) -> float:
    snap = snapshot_at(state.market, when.date())
    raw = market_features(when, snap)
    aux = ((raw - state.aux_mean) / state.aux_std)[None, :]
    out = state.model.forward(encode_plate(plate)[None, :], aux, train=False)
    return float(out.price[0])


def create_app(state: ServiceState | None = None) -> FastAPI:
    app = FastAPI(title="platemark", docs_url=None, redoc_url=None)
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["GET"], allow_headers=["*"]
    )
    app.state.platemark = state

    def current() -> ServiceState | None:
        return app.state.platemark

    def parse_query(request: Request):
        """Common plate/date validation; returns (plate, when) or an error response."""
        st = current()
        if st is None:
            return None, _error(503, "NOT_LOADED", "model not loaded")
        text = request.query_params.get("plate")
        if text is None:
            return None, _error(400, "PLATE_GRAMMAR", "missing plate parameter", grammar="EMPTY")
        try:
            plate = parse_plate(text)
        except PlateError as exc:
            return None, _error(400, "PLATE_GRAMMAR", exc.message, grammar=exc.code)
        date_text = request.query_params.get("date")
        if date_text is None:
            when = datetime.combine(date.today(), AUCTION_TIME)
        else:
            try:
                # date-only input gets the conventional auction time of day
                when = datetime.combine(date.fromisoformat(date_text), AUCTION_TIME)
            except ValueError:
                try:
                    when = datetime.fromisoformat(date_text)
                except ValueError:
                    return None, _error(422, "DATE_FORMAT", f"not an ISO date: {date_text!r}")
        if when.date() < st.market[0].date:
            return None, _error(422, "DATE_RANGE", f"{when.date()} precedes market coverage")
        return (plate, when), None

    @app.get("/api/v1/estimate")
    def estimate(request: Request):
        parsed, err = parse_query(request)
        if err is not None:
            return err
        plate, when = parsed
        st = current()
        log_price = _estimate_log_price(st, plate, when)
        return {
            "plate": plate.canonical(),
            "log_price_hkd": log_price,
            "price_hkd": math.exp(log_price),
            "model_version": st.version,
        }

    @app.get("/api/v1/distribution")
    def distribution(request: Request):
        parsed, err = parse_query(request)
        if err is not None:
            return err
        plate, when = parsed
        st = current()
        log_price = _estimate_log_price(st, plate, when)
        params = st.mdn.params_for(log_price)
        quantiles_log = {name: mixture_quantile(params, level) for name, level in QUANTILE_LEVELS}
        return {
            "plate": plate.canonical(),
            "log_price_hkd": log_price,
            "model_version": st.version,
            "components": [
                {"weight": float(w), "mu": float(m), "sigma": float(s)}
                for w, m, s in zip(params.weights, params.means, params.sigmas)
            ],
            "quantiles_log_hkd": quantiles_log,
            "quantiles_hkd": {name: math.exp(v) for name, v in quantiles_log.items()},
        }

    @app.get("/api/v1/similar")
    def similar(request: Request):
        st = current()
        if st is None:
            return _error(503, "NOT_LOADED", "model not loaded")
        text = request.query_params.get("plate")
        if text is None:
            return _error(400, "PLATE_GRAMMAR", "missing plate parameter", grammar="EMPTY")
        try:
            plate = parse_plate(text)
        except PlateError as exc:
            return _error(400, "PLATE_GRAMMAR", exc.message, grammar=exc.code)
        k_text = request.query_params.get("k", "10")
        try:
            k = int(k_text)
        except ValueError:
            return _error(422, "K_RANGE", f"k must be an integer, got {k_text!r}")
        if not 1 <= k <= 100:
            return _error(422, "K_RANGE", "k must be between 1 and 100")
        hits = query(st.index, plate, k, model=st.model)
        results = []
        for name, dist in hits:
            sale = None
            for record in st.history.get(name, []):
                if record.sold:
                    sale = {"price_hkd": record.price_hkd, "date": record.when.isoformat()}
                    break
            results.append({"plate": name, "distance": dist, "last_sale": sale})
        return {"plate": plate.canonical(), "results": results}

    @app.get("/api/v1/history")
    def history(request: Request):
        st = current()
        if st is None:
            return _error(503, "NOT_LOADED", "model not loaded")
        text = request.query_params.get("plate")
        if text is None:
            return _error(400, "PLATE_GRAMMAR", "missing plate parameter", grammar="EMPTY")
        try:
            plate = parse_plate(text)
        except PlateError as exc:
            return _error(400, "PLATE_GRAMMAR", exc.message, grammar=exc.code)
        records = st.history.get(plate.canonical(), [])
        return {
            "plate": plate.canonical(),
            "records": [
                {
                    "datetime": r.when.isoformat(),
                    "price_hkd": r.price_hkd,
                    "status": "S" if r.sold else "U",
                }
                for r in records
            ],
        }

    @app.get("/healthz")
    def healthz():
        st = current()
        if st is None:
            return _error(503, "NOT_LOADED", "model not loaded")
        return {"status": "ok", "model_version": st.version}

    return app
