"""platemark command line: corpus generation, training, evaluation, indexing,
distribution fitting, search, and serving.

Exit codes: 0 success, 1 usage error, 2 data/file error, 3 numeric failure.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from platemark.dataset import (
    DataError,
    build_dataset,
    generate_synthetic,
    load_auctions,
    load_market,
    write_auctions_csv,
    write_market_csv,
)
from platemark.mdn import fit_mdn
from platemark.model import (
    ConfigError,
    Model,
    ModelConfig,
    PersistenceError,
    load_model,
    save_model,
)
from platemark.plates import PlateError, parse_plate
from platemark.search import build_index, load_index, query, save_index
from platemark.training import (
    TrainConfig,
    TrainingDivergence,
    evaluate,
    train,
    write_run_records,
)


@click.group()
def cli():
    """License-plate price estimation toolkit."""


@cli.command()
@click.option("--n", type=int, required=True, help="number of auction records")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--noise", type=float, default=0.3, show_default=True, help="log-price noise sigma")
@click.option("--out", type=click.Path(path_type=Path), required=True, help="output directory")
def gen(n, seed, noise, out):
    """Write a synthetic corpus: auctions.csv and market.csv."""
    if n < 1:
        raise click.UsageError("--n must be >= 1")
    records, market = generate_synthetic(n, seed=seed, noise_sigma=noise)
    out.mkdir(parents=True, exist_ok=True)
    write_auctions_csv(records, out / "auctions.csv")
    write_market_csv(market, out / "market.csv")
    click.echo(f"wrote {len(records)} records to {out}")


def _load_dataset(data_dir: Path, split_seed: int):
    records = load_auctions(data_dir / "auctions.csv")
    market = load_market(data_dir / "market.csv")
    return build_dataset(records, market, seed=split_seed)


@cli.command(name="train")
@click.option("--config", "config_path", type=click.Path(path_type=Path, exists=True), required=True)
@click.option("--data", "data_dir", type=click.Path(path_type=Path, exists=True), required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True, help="output directory")
def train_cmd(config_path, data_dir, out):
    """Train a model from a JSON config; writes model.pmrk and runs.csv."""
    doc = json.loads(config_path.read_text(encoding="utf-8"))
    model_cfg = ModelConfig.from_doc(doc["model"])
    train_cfg = TrainConfig.from_doc(doc.get("train", {}))
    split_seed = int(doc.get("split_seed", 0))
    data = _load_dataset(data_dir, split_seed)

    model = Model(model_cfg)
    model, record = train(model, data, train_cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_model(
        model,
        out / "model.pmrk",
        extra_doc={
            "train": train_cfg.to_doc(),
            "split_seed": split_seed,
            "norm": {"aux_mean": data.aux_mean.tolist(), "aux_std": data.aux_std.tolist()},
        },
    )
    # metrics recomputed after the save snapped weights to 32-bit
    record.config_id = doc.get("config_id", "model")
    record.metrics = {split: evaluate(model, data.split(split)) for split in ("train", "valid", "test")}
    write_run_records([record], out / "runs.csv")
    m = record.metrics["test"]
    click.echo(f"best epoch {record.best_epoch}; test rmse {m.rmse:.4f}, r2 {m.r2:.4f}")


@cli.command(name="eval")
@click.option("--model", "model_path", type=click.Path(path_type=Path, exists=True), required=True)
@click.option("--data", "data_dir", type=click.Path(path_type=Path, exists=True), required=True)
@click.option("--calibration-out", type=click.Path(path_type=Path), default=None,
              help="also write test-split calibration bins (HK$1000 wide) as CSV")
def eval_cmd(model_path, data_dir, calibration_out):
    """Evaluate a saved model on the dataset's three splits."""
    from platemark.training import calibration_bins, write_calibration_csv

    bundle = load_model(model_path)
    data = _load_dataset(data_dir, int(bundle.doc.get("split_seed", 0)))
    for split in ("train", "valid", "test"):
        m = evaluate(bundle.model, data.split(split))
        click.echo(f"{split}\trmse\t{m.rmse!r}\tr2\t{m.r2!r}\tn\t{m.n}")
    if calibration_out is not None:
        write_calibration_csv(calibration_bins(bundle.model, data.test), calibration_out)
        click.echo(f"wrote calibration bins to {calibration_out}")


@cli.command(name="index")
@click.option("--model", "model_path", type=click.Path(path_type=Path, exists=True), required=True)
@click.option("--plates", "plates_path", type=click.Path(path_type=Path, exists=True), required=True,
              help="file with one plate per line")
@click.option("--out", type=click.Path(path_type=Path), required=True)
def index_cmd(model_path, plates_path, out):
    """Build the similar-plate index over a plate universe."""
    bundle = load_model(model_path)
    plates = []
    for line in plates_path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line:
            plates.append(parse_plate(line))
    if not plates:
        raise DataError(f"no plates in {plates_path}")
    save_index(build_index(bundle.model, plates), out)
    click.echo(f"indexed {len(plates)} plates")


@cli.command(name="mdn-fit")
@click.option("--model", "model_path", type=click.Path(path_type=Path, exists=True), required=True)
@click.option("--data", "data_dir", type=click.Path(path_type=Path, exists=True), required=True)
@click.option("--k", type=int, default=6, show_default=True, help="mixture components")
@click.option("--hidden", type=int, default=256, show_default=True)
@click.option("--epochs", type=int, default=2000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
def mdn_fit_cmd(model_path, data_dir, k, hidden, epochs, seed, out):
    """Fit the price-distribution network on frozen-model predictions."""
    bundle = load_model(model_path)
    data = _load_dataset(data_dir, int(bundle.doc.get("split_seed", 0)))
    from platemark.training import predict_log_prices

    pairs = []
    for split in ("train", "valid"):
        examples = data.split(split)
        preds = predict_log_prices(bundle.model, examples)
        pairs.append(np.stack([preds, np.array([e.target for e in examples])], axis=1))
    mdn = fit_mdn(np.concatenate(pairs), n_components=k, hidden=hidden, epochs=epochs, seed=seed)
    extra = {key: val for key, val in bundle.doc.items() if key != "config"}
    save_model(bundle.model, out, extra_doc=extra, mdn=mdn)
    click.echo(f"fitted {k}-component mixture; wrote {out}")


@cli.command(name="search")
@click.option("--index", "index_path", type=click.Path(path_type=Path, exists=True), required=True)
@click.option("--plate", "plate_text", required=True)
@click.option("--k", type=int, default=10, show_default=True)
@click.option("--model", "model_path", type=click.Path(path_type=Path, exists=True), default=None,
              help="needed when the plate is not in the index")
def search_cmd(index_path, plate_text, k, model_path):
    """Print the nearest plates, one `plate<TAB>distance` per line."""
    index = load_index(index_path)
    plate = parse_plate(plate_text)
    model = load_model(model_path).model if model_path else None
    for name, dist in query(index, plate, k, model=model):
        click.echo(f"{name}\t{dist!r}")


@cli.command(name="serve")
@click.option("--model", "model_path", type=click.Path(path_type=Path, exists=True), required=True)
@click.option("--index", "index_path", type=click.Path(path_type=Path, exists=True), required=True)
@click.option("--data", "data_dir", type=click.Path(path_type=Path, exists=True), required=True)
@click.option("--port", type=int, default=8000, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
def serve_cmd(model_path, index_path, data_dir, port, host):
    """Serve the HTTP API."""
    import uvicorn

    from platemark.service import create_app, load_service_state

    state = load_service_state(model_path, index_path, data_dir)
    uvicorn.run(create_app(state), host=host, port=port)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.ClickException as exc:
        exc.show(file=sys.stderr)
        return 1
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    except (
        DataError,
        PersistenceError,
        PlateError,
        ConfigError,
        FileNotFoundError,
        KeyError,
        TypeError,
        json.JSONDecodeError,
    ) as exc:
        click.echo(f"data error: {exc}", err=True)
        return 2
    except (TrainingDivergence, FloatingPointError, ValueError) as exc:
        click.echo(f"numeric failure: {exc}", err=True)
        return 3


if __name__ == "__main__":
    sys.exit(main())
