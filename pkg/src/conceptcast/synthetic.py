"""Synthetic factor-model market data for desk-scale verification.

Price construction: each stock follows P[t] = P[t-1] * exp(r[t]) with
r[t] = B @ f[t] + eps, where f is a per-factor AR(1) process and B assigns
every stock one dominant factor plus small cross loadings. Open is the
previous close with overnight noise, high/low wrap the close with
half-normal spreads, vwap is the open/close midpoint with noise, and
volume is lognormal. Group-level volume shocks can optionally lead the
next day's group return, putting signal in the cross-section that no
single stock's history resolves. Predefined concepts disclose the
dominant-factor groups for a subset of factors (with membership noise);
the undisclosed factors are what the hidden-concept module is supposed
to find.
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass

import numpy as np

from .data import (ConceptCalendar, DataError, FeaturePanel, MarketData,
                   build_label_panel)

MIN_HORIZON = 62  # 60-day lookback + divisor day + next-day label


@dataclass
class SyntheticSpec:
    n_stocks: int = 100
    n_factors: int = 5
    horizon: int = 750
    regime_starts: tuple[int, ...] = ()   # days where loadings are redrawn
    noise_scale: float = 0.04             # idiosyncratic daily return sd
    seed: int = 0
    factor_vol: float = 0.03              # stationary sd of each factor
    persistence: float = 0.95             # AR(1) coefficient
    cross_loading: float = 0.1            # sd of non-dominant loadings
    adjust_delay: float = 0.0             # weight of yesterday's factors in returns
    volume_signal: float = 0.0            # group log-volume shock sd
    volume_lead: float = 0.0              # next-day return kick per unit shock
    concept_style: str = "dominant"       # "dominant" or "spread"
    disclosed_factors: int = 3            # how many factor groups become concepts
    membership_noise: float = 0.05        # per-stock membership flip probability
    start_date: str = "2015-01-01"

    def validate(self):
        if self.n_stocks < 1:
            raise DataError(f"need at least 1 stock, got {self.n_stocks}")
        if self.n_factors < 1:
            raise DataError(f"need at least 1 factor, got {self.n_factors}")
        if self.horizon < MIN_HORIZON:
            raise DataError(f"horizon must be >= {MIN_HORIZON}, got {self.horizon}")
        if not 0 <= self.disclosed_factors <= self.n_factors:
            raise DataError(f"disclosed_factors {self.disclosed_factors} outside "
                            f"0..{self.n_factors}")
        if any(not 0 < s < self.horizon for s in self.regime_starts):
            raise DataError(f"regime starts {self.regime_starts} outside 1..{self.horizon - 1}")
        if self.noise_scale < 0:
            raise DataError(f"noise scale must be >= 0, got {self.noise_scale}")
        if not 0 <= self.adjust_delay < 1:
            raise DataError(f"adjust delay must be in [0, 1), got {self.adjust_delay}")
        if self.volume_signal < 0:
            raise DataError(f"volume signal must be >= 0, got {self.volume_signal}")
        if self.concept_style not in ("dominant", "spread"):
            raise DataError(f"unknown concept style {self.concept_style!r}")


def _draw_loadings(rng, n: int, m: int, cross: float) -> tuple[np.ndarray, np.ndarray]:
    """Balanced dominant-factor assignment with small cross loadings."""
    dominant = np.empty(n, dtype=int)
    dominant[rng.permutation(n)] = np.arange(n) % m
    b = rng.normal(0.0, cross, size=(n, m))
    b[np.arange(n), dominant] = 1.0
    return b, dominant


def _spread_loadings(rng, n: int, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Dense standard-normal loadings; every stock touches every factor."""
    b = rng.normal(0.0, 1.0, size=(n, m))
    return b, np.abs(b).argmax(axis=1)


def generate_synthetic(spec: SyntheticSpec):
    """Build (FeaturePanel, LabelPanel, ConceptCalendar, loadings) in memory.

    ``loadings`` is a list of (start_day, B) pairs, one per loading regime.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, m, days = spec.n_stocks, spec.n_factors, spec.horizon

    start = dt.date.fromisoformat(spec.start_date)
    dates = [(start + dt.timedelta(days=i)).isoformat() for i in range(days)]
    stocks = [f"S{i:04d}" for i in range(n)]

    regime_days = [0] + sorted(set(spec.regime_starts))
    regimes = []
    for day in regime_days:
        if spec.concept_style == "spread":
            b, dominant = _spread_loadings(rng, n, m)
        else:
            b, dominant = _draw_loadings(rng, n, m, spec.cross_loading)
        regimes.append((day, b, dominant))

    sigma_eta = spec.factor_vol * np.sqrt(max(1.0 - spec.persistence ** 2, 1e-12))
    f = rng.normal(0.0, spec.factor_vol, size=m)
    shocks = rng.normal(0.0, 1.0, size=(days, m))

    def exposures(regime):
        _, b, dominant = regime
        if spec.concept_style == "spread":
            return b, np.abs(b)
        onehot = np.zeros((n, m))
        onehot[np.arange(n), dominant] = 1.0
        return onehot, onehot

    vol_sig = np.empty((days, n))
    close = np.empty((days, n))
    close[0] = 50.0 * np.exp(rng.normal(0.0, 0.3, size=n))
    regime_idx = 0
    signed, unsigned = exposures(regimes[0])
    vol_sig[0] = spec.volume_signal * (unsigned @ shocks[0])
    for t in range(1, days):
        while regime_idx + 1 < len(regimes) and regimes[regime_idx + 1][0] <= t:
            regime_idx += 1
            signed, unsigned = exposures(regimes[regime_idx])
        b = regimes[regime_idx][1]
        f_new = spec.persistence * f + rng.normal(0.0, sigma_eta, size=m)
        # Prices absorb factor moves with a one-day partial lag, so part of
        # today's factor state is only visible in the cross-section.
        mixed = (1.0 - spec.adjust_delay) * f_new + spec.adjust_delay * f
        f = f_new
        # Yesterday's volume shock bleeds into today's returns with signed
        # exposure, while volume itself responds unsigned: a single stock's
        # history shows that something is moving but not which way.
        r = (b @ mixed + spec.volume_lead * (signed @ shocks[t - 1])
             + rng.normal(0.0, spec.noise_scale, size=n))
        close[t] = close[t - 1] * np.exp(r)
        vol_sig[t] = spec.volume_signal * (unsigned @ shocks[t])

    prev_close = np.vstack([close[:1], close[:-1]])
    opens = prev_close * np.exp(rng.normal(0.0, 0.003, size=(days, n)))
    high = np.maximum(close, opens) * np.exp(np.abs(rng.normal(0.0, 0.005, size=(days, n))))
    low = np.minimum(close, opens) * np.exp(-np.abs(rng.normal(0.0, 0.005, size=(days, n))))
    vwap = 0.5 * (opens + close) * np.exp(rng.normal(0.0, 0.002, size=(days, n)))
    base_volume = np.exp(rng.normal(np.log(1e6), 0.5, size=n))
    volume = base_volume * np.exp(vol_sig + rng.normal(0.0, 0.4, size=(days, n)))

    raw = np.stack([opens, close, high, low, vwap, volume], axis=2)
    features = FeaturePanel(dates, stocks, raw)
    labels = build_label_panel(close, features.tradable, dates, stocks)

    caps_row = np.exp(rng.normal(np.log(1e9), 1.0, size=n))
    caps = np.broadcast_to(caps_row, (days, n)).copy()

    def noisy(members: set) -> set:
        keep_one = min(members) if members else None
        flips = np.flatnonzero(rng.random(n) < spec.membership_noise)
        for i in flips:
            members.symmetric_difference_update({int(i)})
        if not members and keep_one is not None:
            members = {keep_one}
        return members

    blocks: dict[int, dict[str, np.ndarray]] = {}
    for day, b, dominant in regimes:
        block = {}
        for k in range(spec.disclosed_factors):
            if spec.concept_style == "spread":
                # Disclose who loads strongly on each side of the factor.
                col = b[:, k]
                named = {
                    f"C{k:02d}P": set(np.flatnonzero(col >= np.quantile(col, 0.75))),
                    f"C{k:02d}N": set(np.flatnonzero(col <= np.quantile(col, 0.25))),
                }
            else:
                named = {f"C{k:02d}": set(np.flatnonzero(dominant == k))}
            for name, members in named.items():
                members = noisy(members)
                if members:
                    block[name] = np.array(sorted(members), dtype=int)
        blocks[day] = block

    memberships = {}
    current: dict[str, np.ndarray] = {}
    for t in range(days):
        if t in blocks:
            current = blocks[t]
        memberships[t] = current
    calendar = ConceptCalendar(dates, stocks, memberships, caps)

    loadings = [(day, b) for day, b, _ in regimes]
    return features, labels, calendar, loadings


def synthetic_market(spec: SyntheticSpec) -> MarketData:
    features, labels, calendar, _ = generate_synthetic(spec)
    return MarketData(features, labels, calendar)


def write_market_csvs(out_dir, features: FeaturePanel, calendar: ConceptCalendar):
    """Write prices/concepts/caps CSVs.

    Concept rows are emitted only on dates whose block differs from the
    previous date's, which exercises the carry-forward rule on reload.
    """
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = {name: os.path.join(out_dir, f"{name}.csv")
             for name in ("prices", "concepts", "caps")}

    with open(paths["prices"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "stock", "open", "close", "high", "low", "vwap", "volume"])
        for t, date in enumerate(features.dates):
            for i, stock in enumerate(features.stocks):
                row = features.raw[t, i]
                if np.isnan(row[0]):
                    continue
                w.writerow([date, stock] + [repr(float(v)) for v in row])

    with open(paths["concepts"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "stock", "concept"])
        previous = None
        for t, date in enumerate(calendar.dates):
            block = calendar.memberships.get(t, {})
            key = {name: tuple(map(int, members)) for name, members in block.items()}
            if key == previous:
                continue
            previous = key
            for name in sorted(block):
                for i in block[name]:
                    w.writerow([date, calendar.stocks[i], name])

    with open(paths["caps"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "stock", "market_cap"])
        for t, date in enumerate(calendar.dates):
            for i, stock in enumerate(calendar.stocks):
                value = calendar.caps[t, i]
                if not np.isnan(value):
                    w.writerow([date, stock, repr(float(value))])

    return paths
