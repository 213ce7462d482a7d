"""Training loop: one date's cross-section per optimizer step.

Each epoch shuffles the training dates, takes one Adam step per date on
that date's mean squared error against normalized labels, then scores
mean validation IC. The parameters with the best validation IC are kept;
training stops after `patience` epochs without improvement. Divergence
(non-finite loss anywhere) aborts the run with a diagnostic instead of
silently continuing.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import NumericError, backward
from .data import DataError, MarketData, Splits
from .metrics import DateScores, MetricReport, evaluate, ic, write_per_date_csv
from .model import (ModelConfig, date_loss, fit_normalizer, forward,
                    init_params, save_checkpoint)
from .optim import Adam, clip_global_norm


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    max_epochs: int = 200
    patience: int = 20
    clip_norm: float = 3.0
    seeds: tuple[int, ...] = (0,)

    def validate(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.learning_rate}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not 1 <= self.patience <= self.max_epochs:
            raise ValueError(f"patience must be in 1..max_epochs, got {self.patience}")
        if self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be > 0, got {self.clip_norm}")
        if not self.seeds:
            raise ValueError("need at least one seed")

    def to_dict(self) -> dict:
        return {"learning_rate": self.learning_rate, "max_epochs": self.max_epochs,
                "patience": self.patience, "clip_norm": self.clip_norm,
                "seeds": list(self.seeds)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "seeds" in d:
            d["seeds"] = tuple(d["seeds"])
        cfg = cls(**d)
        cfg.validate()
        return cfg


class TrainingAborted(RuntimeError):
    """The run diverged; the message says where."""


@dataclass
class RunRecord:
    seed: int
    train_losses: list[float] = field(default_factory=list)
    valid_ics: list[float] = field(default_factory=list)
    best_epoch: int = 0
    steps: int = 0
    test_report: MetricReport | None = None


def panel_loss(pairs) -> float:
    """Sum over dates of that date's mean squared error (plain numpy)."""
    return sum(float(np.mean((np.asarray(p) - np.asarray(d)) ** 2)) for p, d in pairs)


def score_dates(params, config: ModelConfig, market: MarketData,
                dates) -> list[DateScores]:
    out = []
    for date in dates:
        batch = market.batch(date)
        trace = forward(params, batch, config)
        out.append(DateScores(date, batch.ids, trace.predictions, batch.labels_raw))
    return out


def mean_valid_ic(entries: list[DateScores]) -> float:
    vals = [v for e in entries
            if (v := ic(e.predictions, e.labels_raw)) is not None]
    return float(np.mean(vals)) if vals else float("nan")


def train_one(market: MarketData, splits: Splits, model_config: ModelConfig,
              train_config: TrainConfig, seed: int,
              debug: bool = False) -> tuple[RunRecord, dict]:
    """Train on one seed; returns the record and the best parameter set."""
    model_config.validate()
    train_config.validate()
    train_dates = market.labeled_dates(splits, "train")
    valid_dates = market.labeled_dates(splits, "valid")
    test_dates = market.labeled_dates(splits, "test")
    if not train_dates:
        raise DataError("no labeled training dates inside the train split")

    params = init_params(model_config, seed)
    fit_normalizer(params, (market.batch(d).sequences for d in train_dates))
    opt = Adam(params, lr=train_config.learning_rate)
    shuffle_rng = np.random.default_rng([seed, 101])
    record = RunRecord(seed=seed)
    best_ic = -np.inf
    best_params: dict | None = None
    stale = 0

    for epoch in range(1, train_config.max_epochs + 1):
        order = shuffle_rng.permutation(len(train_dates))
        epoch_loss = 0.0
        for idx in order:
            date = train_dates[idx]
            batch = market.batch(date)
            try:
                trace = forward(params, batch, model_config, debug=debug)
                loss = date_loss(trace, batch.labels_norm, model_config.dtype)
            except NumericError as exc:
                raise TrainingAborted(
                    f"seed {seed} epoch {epoch} date {date}: {exc}") from exc
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingAborted(
                    f"seed {seed} epoch {epoch} date {date}: loss is {value}")
            grad_map = backward(loss)
            grads = {name: grad_map[p] for name, p in params.items() if p in grad_map}
            clip_global_norm(grads, train_config.clip_norm)
            opt.step(grads)
            record.steps += 1
            epoch_loss += value
        record.train_losses.append(epoch_loss)

        valid_ic = mean_valid_ic(score_dates(params, model_config, market, valid_dates))
        record.valid_ics.append(valid_ic)
        if valid_ic > best_ic:
            best_ic = valid_ic
            best_params = {k: p.data.copy() for k, p in params.items()}
            record.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= train_config.patience:
                break

    if best_params is not None:
        for name, p in params.items():
            p.data = best_params[name]
    else:
        record.best_epoch = len(record.train_losses)

    record.test_report = evaluate(score_dates(params, model_config, market, test_dates))
    return record, params


def aggregate_seed_metrics(records: list[RunRecord]) -> dict[str, dict[str, float]]:
    """Mean and population std of each test metric across seeds."""
    out = {}
    for name in records[0].test_report.flat():
        vals = [r.test_report.flat().get(name) for r in records]
        if any(v is None for v in vals):
            continue
        arr = np.array(vals)
        out[name] = {"mean": float(arr.mean()), "std": float(arr.std())}
    return out


def run_seeds(market: MarketData, splits: Splits, model_config: ModelConfig,
              train_config: TrainConfig, out_dir=None) -> dict:
    """Train every seed, aggregate metrics, optionally write the run directory.

    Aborted seeds are excluded from the aggregate and listed in the result.
    """
    records, aborted, checkpoints = [], [], {}
    for seed in train_config.seeds:
        try:
            record, params = train_one(market, splits, model_config, train_config, seed)
        except TrainingAborted as exc:
            aborted.append({"seed": seed, "reason": str(exc)})
            continue
        records.append(record)
        checkpoints[seed] = params

    summary = {
        "ablation": model_config.ablation,
        "seeds": [r.seed for r in records],
        "aborted": aborted,
        "metrics": aggregate_seed_metrics(records) if records else {},
    }

    if out_dir is not None:
        artifacts = _write_run_dir(out_dir, records, checkpoints, model_config,
                                   train_config, splits, summary)
        summary["artifacts"] = artifacts
    return summary


def _write_run_dir(out_dir, records, checkpoints, model_config, train_config,
                   splits, summary) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    artifacts = []

    def emit(rel, writer):
        path = os.path.join(out_dir, rel)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        writer(path)
        artifacts.append(rel)

    for record in records:
        seed = record.seed
        base = f"seed_{seed}"

        def write_epochs(path, record=record):
            with open(path, "w", newline="") as fh:
                fh.write("epoch,train_loss,valid_ic\n")
                for i, (tl, vi) in enumerate(zip(record.train_losses,
                                                 record.valid_ics), start=1):
                    fh.write(f"{i},{tl!r},{vi!r}\n")

        emit(f"{base}/epochs.csv", write_epochs)
        extra = {"seed": seed, "best_epoch": record.best_epoch,
                 "splits": {"train": list(splits.train), "valid": list(splits.valid),
                            "test": list(splits.test)}}
        emit(f"{base}/model.ckpt",
             lambda path, seed=seed, extra=extra: save_checkpoint(
                 path, checkpoints[seed], model_config, extra=extra))
        emit(f"{base}/test_metrics.json",
             lambda path, record=record: _dump_json(path, {
                 "seed": record.seed,
                 "metrics": record.test_report.flat(),
                 "skipped": record.test_report.skipped,
                 "best_epoch": record.best_epoch}))
        emit(f"{base}/per_date.csv",
             lambda path, record=record: write_per_date_csv(path, record.test_report))

    if records:
        for name in records[0].test_report.flat():
            emit(f"per_date/{name}.csv",
                 lambda path, name=name: _write_metric_across_seeds(path, name, records))

    metrics_json = {"ablation": summary["ablation"], "seeds": summary["seeds"],
                    "aborted": summary["aborted"], "metrics": {}}
    for name, agg in summary["metrics"].items():
        metrics_json["metrics"][name] = {"mean": agg["mean"], "std": agg["std"],
                                         "per_date_csv": f"per_date/{name}.csv"}
    emit("metrics.json", lambda path: _dump_json(path, metrics_json))
    return artifacts


def _write_metric_across_seeds(path, name, records):
    dates = sorted({d for r in records for d in r.test_report.per_date})
    with open(path, "w", newline="") as fh:
        cols = [f"seed_{r.seed}" for r in records]
        fh.write(",".join(["date"] + cols + ["mean"]) + "\n")
        for date in dates:
            vals = [r.test_report.per_date.get(date, {}).get(name) for r in records]
            present = [v for v in vals if v is not None]
            cells = [repr(v) if v is not None else "" for v in vals]
            mean = repr(float(np.mean(present))) if present else ""
            fh.write(",".join([date] + cells + [mean]) + "\n")


def _dump_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
