"""Command-line entry points: generate, train, backtest, export-hidden.

Every command writes its artifacts plus a ``manifest.json`` listing them.
Timestamps appear only in the manifest so everything else is byte-identical
across reruns with the same seed and config.  The data directory may come
from ``--data`` or from the ``CONCEPTCAST_DATA`` environment variable.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

from .backtest import (CostModel, K_GRID, grid_search_k, market_prices,
                       model_predictions, run_backtest, write_equity_csv,
                       write_trades_csv)
from .config import ConfigError, RunManifest, config_hash, load_config
from .data import DataError, Splits, load_market
from .export import (hidden_similarity_export, write_edges_csv,
                     write_heatmap_csv)
from .model import load_checkpoint
from .synthetic import SyntheticSpec, generate_synthetic, write_market_csvs
from .train import TrainingAborted, run_seeds

log = logging.getLogger(__name__)

DATA_ENV = "CONCEPTCAST_DATA"

# public flag name -> internal ablation name
ABLATION_FLAGS = {
    "disable-correction": "no_correction",
    "disable-predefined": "no_predefined",
    "disable-hidden": "no_hidden",
    "disable-individual": "no_individual",
    "predefined-only": "predefined_only",
    "gru-baseline": "gru_baseline",
}


class CliError(Exception):
    """User-facing failure; main() prints the message and exits 1."""


def _resolve_data_dir(args) -> str:
    data = args.data or os.environ.get(DATA_ENV)
    if not data:
        raise CliError(f"no data directory: pass --data or set {DATA_ENV}")
    if not os.path.isdir(data):
        raise CliError(f"data directory not found: {data}")
    return data


def _market_from_dir(data_dir):
    paths = [os.path.join(data_dir, f"{name}.csv")
             for name in ("prices", "concepts", "caps")]
    for p in paths:
        if not os.path.isfile(p):
            raise CliError(f"missing data file: {p}")
    features = os.path.join(data_dir, "features.csv")
    return load_market(*paths, features_path=features if os.path.isfile(features) else None)


def _dump_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ----------------------------------------------------------------- generate


def cmd_generate(args) -> int:
    try:
        with open(args.spec) as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read spec: {exc}")
    except json.JSONDecodeError as exc:
        raise CliError(f"spec is not valid JSON: {exc}")
    if not isinstance(payload, dict):
        raise CliError("spec must be a JSON object of SyntheticSpec fields")
    if "regime_starts" in payload:
        payload["regime_starts"] = tuple(payload["regime_starts"])
    try:
        spec = SyntheticSpec(**payload)
        spec.validate()
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid synthetic spec: {exc}")

    manifest = RunManifest(command="generate", config_path=str(args.spec),
                           config_hash=config_hash(payload),
                           seeds=[spec.seed], out_dir=str(args.out)).start()
    features, _, calendar, loadings = generate_synthetic(spec)
    os.makedirs(args.out, exist_ok=True)
    paths = write_market_csvs(args.out, features, calendar)
    artifacts = [os.path.basename(p) for p in paths.values()]

    loadings_path = os.path.join(args.out, "loadings.csv")
    with open(loadings_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["start_day", "stock"]
                   + [f"factor_{k:02d}" for k in range(spec.n_factors)])
        for start_day, B in loadings:
            for i, stock in enumerate(features.stocks):
                w.writerow([start_day, stock] + [repr(float(v)) for v in B[i]])
    artifacts.append("loadings.csv")

    _dump_json(os.path.join(args.out, "spec.json"), payload)
    artifacts.append("spec.json")

    manifest.artifacts = artifacts
    manifest.finish().write(os.path.join(args.out, "manifest.json"))
    print(f"wrote {len(artifacts)} files to {args.out}: {', '.join(sorted(artifacts))}")
    return 0


# -------------------------------------------------------------------- train


def cmd_train(args) -> int:
    run_config = load_config(args.config)
    if args.ablation:
        run_config.model.ablation = ABLATION_FLAGS[args.ablation]
    if args.seeds:
        try:
            run_config.train.seeds = tuple(int(s) for s in args.seeds.split(","))
        except ValueError:
            raise CliError(f"--seeds must be comma-separated ints, got {args.seeds!r}")
        run_config.train.validate()

    market = _market_from_dir(_resolve_data_dir(args))
    splits = run_config.splits
    for part in ("train", "valid", "test"):
        if not market.labeled_dates(splits, part):
            lo, hi = getattr(splits, part)
            raise CliError(f"config/data mismatch: no labeled dates in "
                           f"{part} split [{lo}, {hi}]")

    payload = run_config.to_dict()
    manifest = RunManifest(command="train", config_path=str(args.config),
                           config_hash=config_hash(payload),
                           seeds=list(run_config.train.seeds),
                           out_dir=str(args.out)).start()
    os.makedirs(args.out, exist_ok=True)
    summary = run_seeds(market, splits, run_config.model, run_config.train,
                        out_dir=args.out)
    _dump_json(os.path.join(args.out, "config.json"), payload)
    artifacts = summary["artifacts"] + ["config.json"]
    manifest.artifacts = artifacts
    manifest.finish().write(os.path.join(args.out, "manifest.json"))

    print(f"ablation: {summary['ablation']}   seeds: {summary['seeds']}")
    for name, agg in summary["metrics"].items():
        print(f"{name} {agg['mean']:.4f} ± {agg['std']:.4f}")
    if summary["aborted"]:
        for item in summary["aborted"]:
            print(f"error: seed {item['seed']} aborted: {item['reason']}",
                  file=sys.stderr)
        return 1
    return 0


# ----------------------------------------------------------------- backtest


def _checkpoint_splits(extra) -> Splits | None:
    if isinstance(extra, dict) and "splits" in extra:
        return Splits.from_dict(extra["splits"])
    return None


def cmd_backtest(args) -> int:
    if not os.path.isfile(args.checkpoint):
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    params, model_config, extra = load_checkpoint(args.checkpoint)
    market = _market_from_dir(_resolve_data_dir(args))
    splits = _checkpoint_splits(extra)

    if splits is not None:
        lo, hi = splits.test
        dates = [d for d in market.tradable_dates() if lo <= d <= hi]
    else:
        log.warning("checkpoint has no split record; trading every tradable date")
        dates = market.tradable_dates()
    if not dates:
        raise CliError("no tradable dates in the backtest window")

    costs = CostModel(buy_rate=0.0, sell_rate=0.0) if args.cost_free else CostModel()
    predictions = model_predictions(market, params, model_config, dates)
    prices = market_prices(market, dates)

    grid_table = None
    if args.k == "grid":
        if splits is None:
            raise CliError("--k grid needs a checkpoint that records its splits")
        lo, hi = splits.valid
        valid_dates = [d for d in market.tradable_dates() if lo <= d <= hi]
        if not valid_dates:
            raise CliError("no tradable dates in the validation window for --k grid")
        valid_preds = model_predictions(market, params, model_config, valid_dates)
        valid_prices = market_prices(market, valid_dates)

        def final_cr(k):
            return run_backtest(valid_dates, valid_preds, valid_prices, k,
                                costs=costs).final_cr

        k, grid_table = grid_search_k(final_cr, K_GRID)
        print("grid:", "  ".join(f"k={c}: {grid_table[c]:+.4f}" for c in sorted(grid_table)))
    else:
        try:
            k = int(args.k)
        except ValueError:
            raise CliError(f"--k must be an integer or 'grid', got {args.k!r}")
        if k < 1:
            raise CliError(f"--k must be positive, got {k}")

    manifest = RunManifest(command="backtest", config_path=str(args.checkpoint),
                           out_dir=str(args.out)).start()
    result = run_backtest(dates, predictions, prices, k, costs=costs)
    os.makedirs(args.out, exist_ok=True)
    write_equity_csv(os.path.join(args.out, "equity.csv"), result)
    write_trades_csv(os.path.join(args.out, "trades.csv"), result)
    _dump_json(os.path.join(args.out, "summary.json"), {
        "k": k,
        "cost_free": bool(args.cost_free),
        "initial": result.initial,
        "final_cr": result.final_cr,
        "n_dates": len(dates),
        "grid": ({str(c): v for c, v in grid_table.items()}
                 if grid_table is not None else None),
    })
    manifest.artifacts = ["equity.csv", "trades.csv", "summary.json"]
    manifest.finish().write(os.path.join(args.out, "manifest.json"))
    print(f"k={k}  dates={len(dates)}  final CR {result.final_cr:+.4f}")
    return 0


# ------------------------------------------------------------ export-hidden


def cmd_export_hidden(args) -> int:
    if not os.path.isfile(args.checkpoint):
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    params, model_config, _ = load_checkpoint(args.checkpoint)
    market = _market_from_dir(_resolve_data_dir(args))
    if args.date not in market.date_index:
        raise CliError(f"date {args.date} outside panel "
                       f"[{market.dates[0]}, {market.dates[-1]}]")
    try:
        rows, cols, matrix, edges = hidden_similarity_export(
            market, params, model_config, args.date)
    except (ValueError, DataError) as exc:
        raise CliError(str(exc))

    manifest = RunManifest(command="export-hidden", config_path=str(args.checkpoint),
                           out_dir=os.path.dirname(os.path.abspath(args.out))).start()
    stem, _ = os.path.splitext(args.out)
    edges_path = f"{stem}_edges.csv"
    write_heatmap_csv(args.out, rows, cols, matrix)
    write_edges_csv(edges_path, args.date, edges)
    manifest.artifacts = [os.path.basename(args.out), os.path.basename(edges_path)]
    manifest.finish().write(f"{stem}_manifest.json")
    print(f"{len(rows)} stocks x {len(cols)} hidden concepts -> {args.out}")
    return 0


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="conceptcast",
        description="Concept-oriented stock trend forecasting toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic market as CSV files")
    p.add_argument("--spec", required=True, help="JSON file of SyntheticSpec fields")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train over seeds and write a run directory")
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--data", help=f"data directory (default ${DATA_ENV})")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--ablation", choices=sorted(ABLATION_FLAGS),
                   help="disable a module combination")
    p.add_argument("--seeds", help="comma-separated seed list overriding the config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("backtest", help="simulate daily top-k trading from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help=f"data directory (default ${DATA_ENV})")
    p.add_argument("--k", default="30", help="portfolio size, or 'grid' to search "
                   f"{list(K_GRID)} on the validation window")
    p.add_argument("--cost-free", action="store_true", help="zero transaction costs")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_backtest)

    p = sub.add_parser("export-hidden",
                       help="write the hidden-concept similarity matrix for one date")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help=f"data directory (default ${DATA_ENV})")
    p.add_argument("--date", required=True)
    p.add_argument("--out", required=True, help="output CSV file")
    p.set_defaults(func=cmd_export_hidden)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, DataError, TrainingAborted) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
