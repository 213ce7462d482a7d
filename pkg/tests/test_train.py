"""Training loop behavior on small synthetic markets."""

import json

import numpy as np
import pytest

from conceptcast import train as tr
from conceptcast.autodiff import NumericError, Tensor
from conceptcast.data import Splits
from conceptcast.metrics import MetricReport
from conceptcast.model import ModelConfig, date_loss, forward, load_checkpoint
from conceptcast.synthetic import SyntheticSpec, synthetic_market
from conceptcast.train import (RunRecord, TrainConfig, TrainingAborted,
                               aggregate_seed_metrics, panel_loss, run_seeds,
                               score_dates, train_one)


def tiny_market(horizon=70, n=8, seed=3):
    return synthetic_market(SyntheticSpec(
        n_stocks=n, n_factors=2, horizon=horizon, seed=seed,
        disclosed_factors=1, noise_scale=0.02))


def splits_for(market, n_train, n_valid, n_test):
    dates = market.labeled_dates()
    assert len(dates) >= n_train + n_valid + n_test
    return Splits(
        train=(dates[0], dates[n_train - 1]),
        valid=(dates[n_train], dates[n_train + n_valid - 1]),
        test=(dates[n_train + n_valid], dates[n_train + n_valid + n_test - 1]))


def model_cfg(**kw):
    base = dict(hidden_size=8, gru_layers=1, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


# --------------------------------------------------------------------- loss


def test_loss_perfect_fit_is_zero():
    labels = np.array([0.1, -0.2, 0.3])
    pred = Tensor(labels.reshape(-1, 1))
    trace = type("T", (), {"pred": pred})()
    assert float(date_loss(trace, labels, "float64").data) == 0.0


def test_loss_constant_offset_is_one():
    labels = np.array([0.5, -0.5, 1.5, 0.0])
    trace = type("T", (), {"pred": Tensor((labels + 1.0).reshape(-1, 1))})()
    assert float(date_loss(trace, labels, "float64").data) == pytest.approx(1.0, abs=1e-15)


def test_loss_matches_mean_of_squares_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(2, 40))
        p = rng.normal(size=n)
        d = rng.normal(size=n)
        trace = type("T", (), {"pred": Tensor(p.reshape(-1, 1), dtype="float64")})()
        got = float(date_loss(trace, d, "float64").data)
        want = sum((a - b) ** 2 for a, b in zip(p, d)) / n
        assert got == pytest.approx(want, abs=1e-12)


def test_panel_loss_sums_dates():
    pairs = [(np.array([1.0, 2.0]), np.array([0.0, 0.0])),
             (np.array([3.0]), np.array([1.0]))]
    assert panel_loss(pairs) == pytest.approx(2.5 + 4.0)


# ----------------------------------------------------------------- training


def test_zero_lr_is_noop_and_constant_ic():
    market = tiny_market()
    splits = splits_for(market, 5, 2, 2)
    cfg = model_cfg()
    record, params = train_one(market, splits, cfg,
                               TrainConfig(learning_rate=0.0, max_epochs=4,
                                           patience=4), seed=1)
    from conceptcast.model import init_params
    fresh = init_params(cfg, 1)
    for name in fresh:
        if name.startswith("norm."):
            continue             # normalizer buffers are fitted, not trained
        np.testing.assert_array_equal(params[name].data, fresh[name].data)
    assert len(set(record.valid_ics)) == 1
    assert record.steps == 4 * 5


def test_overfit_two_dates():
    market = tiny_market(horizon=65)
    splits = splits_for(market, 2, 1, 1)
    record, _ = train_one(market, splits, model_cfg(),
                          TrainConfig(learning_rate=0.01, max_epochs=500,
                                      patience=500), seed=2)
    assert record.train_losses[-1] < 1e-3


def test_fixed_seed_reproducible():
    market = tiny_market()
    splits = splits_for(market, 5, 2, 2)
    cfg = TrainConfig(learning_rate=1e-3, max_epochs=3, patience=3)
    r1, p1 = train_one(market, splits, model_cfg(), cfg, seed=7)
    r2, p2 = train_one(market, splits, model_cfg(), cfg, seed=7)
    assert r1.train_losses == r2.train_losses
    assert r1.valid_ics == r2.valid_ics
    assert r1.best_epoch == r2.best_epoch
    assert r1.test_report.flat() == r2.test_report.flat()
    for name in p1:
        np.testing.assert_array_equal(p1[name].data, p2[name].data)


def test_best_epoch_tracks_max_valid_ic():
    market = tiny_market()
    splits = splits_for(market, 5, 2, 2)
    record, _ = train_one(market, splits, model_cfg(),
                          TrainConfig(learning_rate=1e-3, max_epochs=6, patience=6),
                          seed=4)
    assert record.valid_ics[record.best_epoch - 1] == max(record.valid_ics)


def test_patience_stops_early():
    market = tiny_market()
    splits = splits_for(market, 5, 2, 2)
    record, _ = train_one(market, splits, model_cfg(),
                          TrainConfig(learning_rate=0.0, max_epochs=50, patience=2),
                          seed=5)
    # constant validation IC: first epoch wins, then patience runs out
    assert len(record.valid_ics) == 3


def test_loss_mostly_non_increasing_at_paper_lr():
    market = tiny_market(horizon=66)
    splits = splits_for(market, 3, 1, 1)
    record, _ = train_one(market, splits, model_cfg(),
                          TrainConfig(learning_rate=2e-4, max_epochs=15, patience=15),
                          seed=6)
    losses = record.train_losses
    drops = sum(1 for a, b in zip(losses, losses[1:]) if b <= a)
    assert drops / (len(losses) - 1) >= 0.9


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_divergence_aborts_with_diagnostic():
    market = tiny_market()
    splits = splits_for(market, 5, 2, 2)
    with pytest.raises(TrainingAborted) as exc:
        train_one(market, splits, model_cfg(dtype="float32"),
                  TrainConfig(learning_rate=1e30, max_epochs=3, patience=3), seed=8)
    assert "seed 8" in str(exc.value)


def test_checkpoint_reload_reproduces_metrics(tmp_path):
    market = tiny_market()
    splits = splits_for(market, 5, 2, 2)
    cfg = model_cfg(dtype="float32")
    record, params = train_one(market, splits, cfg,
                               TrainConfig(learning_rate=1e-3, max_epochs=2,
                                           patience=2), seed=9)
    from conceptcast.model import save_checkpoint
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params, cfg)
    loaded, lcfg, _ = load_checkpoint(path)
    test_dates = market.labeled_dates(splits, "test")
    before = score_dates(params, cfg, market, test_dates)
    after = score_dates(loaded, lcfg, market, test_dates)
    for a, b in zip(before, after):
        np.testing.assert_array_equal(a.predictions, b.predictions)


# ---------------------------------------------------------------- run_seeds


def fabricated_record(seed, ic_value):
    report = MetricReport(ic_mean=ic_value, rank_ic_mean=ic_value / 2,
                          precision_mean={3: 50.0}, per_date={}, skipped={})
    return RunRecord(seed=seed, test_report=report)


def test_aggregate_population_std():
    records = [fabricated_record(s, v) for s, v in enumerate([0.1, 0.2, 0.3])]
    agg = aggregate_seed_metrics(records)
    assert agg["IC"]["mean"] == pytest.approx(0.2)
    assert agg["IC"]["std"] == pytest.approx(0.081649658, abs=1e-9)
    assert agg["Precision@3"]["std"] == 0.0


def test_single_seed_std_zero():
    agg = aggregate_seed_metrics([fabricated_record(0, 0.15)])
    assert agg["IC"]["std"] == 0.0


def test_run_seeds_writes_run_dir(tmp_path):
    market = tiny_market()
    splits = splits_for(market, 5, 2, 2)
    out = tmp_path / "run"
    summary = run_seeds(market, splits, model_cfg(dtype="float32"),
                        TrainConfig(learning_rate=1e-3, max_epochs=2, patience=2,
                                    seeds=(0, 1)), out_dir=out)
    assert summary["seeds"] == [0, 1]
    assert summary["aborted"] == []
    for rel in ("seed_0/epochs.csv", "seed_0/model.ckpt", "seed_0/test_metrics.json",
                "seed_0/per_date.csv", "seed_1/model.ckpt", "metrics.json",
                "per_date/IC.csv"):
        assert (out / rel).exists(), rel
        assert rel in summary["artifacts"]
    payload = json.loads((out / "metrics.json").read_text())
    assert payload["metrics"]["IC"]["per_date_csv"] == "per_date/IC.csv"
    ckpt_params, ckpt_cfg, extra = load_checkpoint(out / "seed_0" / "model.ckpt")
    assert extra["seed"] == 0
    assert extra["splits"]["test"] == list(splits.test)


def test_run_seeds_metrics_json_deterministic(tmp_path):
    market = tiny_market()
    splits = splits_for(market, 5, 2, 2)
    cfg = TrainConfig(learning_rate=1e-3, max_epochs=2, patience=2, seeds=(3,))
    run_seeds(market, splits, model_cfg(dtype="float32"), cfg, out_dir=tmp_path / "a")
    run_seeds(market, splits, model_cfg(dtype="float32"), cfg, out_dir=tmp_path / "b")
    assert ((tmp_path / "a" / "metrics.json").read_bytes()
            == (tmp_path / "b" / "metrics.json").read_bytes())
    assert ((tmp_path / "a" / "seed_3" / "model.ckpt").read_bytes()
            == (tmp_path / "b" / "seed_3" / "model.ckpt").read_bytes())


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_run_seeds_flags_aborted(tmp_path):
    market = tiny_market()
    splits = splits_for(market, 5, 2, 2)
    summary = run_seeds(market, splits, model_cfg(dtype="float32"),
                        TrainConfig(learning_rate=1e30, max_epochs=2, patience=2,
                                    seeds=(0, 1)))
    assert summary["seeds"] == []
    assert [a["seed"] for a in summary["aborted"]] == [0, 1]
    assert summary["metrics"] == {}


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1.0).validate()
    with pytest.raises(ValueError):
        TrainConfig(patience=50, max_epochs=20).validate()
    with pytest.raises(ValueError):
        TrainConfig(seeds=()).validate()
