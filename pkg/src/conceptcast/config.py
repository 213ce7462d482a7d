"""Run configuration files and the per-run manifest.

A run config is a JSON object with three required sections and one optional
one::

    {
      "model":    {... ModelConfig keys ...},
      "train":    {... TrainConfig keys ...},
      "splits":   {"train": [lo, hi], "valid": [lo, hi], "test": [lo, hi]},
      "backtest": {"k": 30 | "grid", "cost_free": false}   # optional
    }

Dates are ISO strings matching the data panel.  Every section accepts only
known keys so typos fail loudly instead of silently using a default.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone

from .data import Splits
from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class BacktestSettings:
    k: int | str = 30
    cost_free: bool = False

    def validate(self):
        if self.k == "grid":
            return
        if not isinstance(self.k, int) or self.k < 1:
            raise ConfigError(f"backtest k must be a positive int or 'grid', got {self.k!r}")

    def to_dict(self) -> dict:
        return {"k": self.k, "cost_free": self.cost_free}


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    splits: Splits
    backtest: BacktestSettings = field(default_factory=BacktestSettings)

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(),
                "splits": {"train": list(self.splits.train),
                           "valid": list(self.splits.valid),
                           "test": list(self.splits.test)},
                "backtest": self.backtest.to_dict()}


_SECTIONS = {"model", "train", "splits", "backtest"}


def parse_config(payload: dict, source: str = "<config>") -> RunConfig:
    if not isinstance(payload, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    unknown = set(payload) - _SECTIONS
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {sorted(unknown)}")
    missing = {"model", "train", "splits"} - set(payload)
    if missing:
        raise ConfigError(f"{source}: missing section(s) {sorted(missing)}")
    try:
        model = ModelConfig.from_dict(payload["model"])
        train = TrainConfig.from_dict(payload["train"])
        splits = Splits.from_dict(payload["splits"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    bt = BacktestSettings()
    if "backtest" in payload:
        section = payload["backtest"]
        unknown = set(section) - {"k", "cost_free"}
        if unknown:
            raise ConfigError(f"{source}: unknown backtest key(s) {sorted(unknown)}")
        bt = BacktestSettings(k=section.get("k", 30),
                              cost_free=bool(section.get("cost_free", False)))
        bt.validate()
    return RunConfig(model=model, train=train, splits=splits, backtest=bt)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return parse_config(payload, source=str(path))


def config_hash(payload: dict) -> str:
    """sha256 of the canonical (sorted-keys, no-whitespace) JSON dump."""
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def default_config_payload() -> dict:
    """A complete config with every key at its default, as a template."""
    cfg = RunConfig(model=ModelConfig(), train=TrainConfig(),
                    splits=Splits(train=("", ""), valid=("", ""), test=("", "")))
    return cfg.to_dict()


@dataclass
class RunManifest:
    """What a command did: inputs, seeds, and every file it wrote.

    Timestamps live here and nowhere else, so all other artifacts can be
    compared byte for byte across reruns.
    """

    command: str
    config_path: str | None = None
    config_hash: str | None = None
    seeds: list[int] = field(default_factory=list)
    out_dir: str = ""
    started: str = ""
    finished: str = ""
    artifacts: list[str] = field(default_factory=list)

    def start(self):
        self.started = datetime.now(timezone.utc).isoformat()
        return self

    def finish(self):
        self.finished = datetime.now(timezone.utc).isoformat()
        return self

    def write(self, path):
        payload = {"command": self.command, "config_path": self.config_path,
                   "config_hash": self.config_hash, "seeds": self.seeds,
                   "out_dir": self.out_dir, "started": self.started,
                   "finished": self.finished,
                   "artifacts": sorted(self.artifacts)}
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


__all__ = ["BacktestSettings", "ConfigError", "RunConfig", "RunManifest",
           "config_hash", "default_config_payload", "load_config",
           "parse_config"]
