"""Panels for prices, labels and concept memberships, plus per-date batches.

Layout conventions (canonical for the whole package):

* Daily fields per stock, in order: open, close, high, low, vwap, volume.
* The feature vector at date t is field-major: six blocks of 60 entries,
  each block covering the 60 days before t (oldest first, t excluded).
  Price blocks are divided by the date-t close, the volume block by the
  date-t volume, so every vector is scale free.
* A stock is tradable at t only if it has rows for all 61 consecutive
  calendar slots t-60 .. t (no imputation).
* A stock is labeled at t if it is tradable and also has a row at t+1.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

FIELDS = ("open", "close", "high", "low", "vwap", "volume")
LOOKBACK = 60
FEATURE_DIM = LOOKBACK * len(FIELDS)  # 360

_PRICES_HEADER = ["date", "stock"] + list(FIELDS)
_CONCEPTS_HEADER = ["date", "stock", "concept"]
_CAPS_HEADER = ["date", "stock", "market_cap"]


class DataError(ValueError):
    """A data file or panel violates its contract."""


class FeaturePanel:
    """Per (date, stock) feature vectors, computed lazily from daily fields.

    ``raw`` holds the six daily fields as (dates, stocks, 6); missing rows
    are NaN. Feature vectors are window slices of ``raw``, so the panel
    stays small even though each vector has 360 entries.
    """

    def __init__(self, dates, stocks, raw: np.ndarray,
                 overrides: dict[tuple[int, int], np.ndarray] | None = None):
        self.dates = tuple(dates)
        self.stocks = tuple(stocks)
        self.raw = raw
        self.overrides = overrides or {}
        self.date_index = {d: i for i, d in enumerate(self.dates)}
        self.stock_index = {s: i for i, s in enumerate(self.stocks)}
        self.tradable = _tradable_mask(~np.isnan(raw[:, :, 1]))

    def matrix(self, date: str, stock_idx: np.ndarray) -> np.ndarray:
        """Feature vectors (len(stock_idx), 360) for one date."""
        t = self.date_index[date]
        if t < LOOKBACK:
            raise DataError(f"date {date} lacks a full {LOOKBACK}-day lookback window")
        window = self.raw[t - LOOKBACK:t, stock_idx, :]      # (60, n, 6)
        blocks = window.transpose(1, 2, 0).copy()            # (n, 6, 60) field-major
        close_t = self.raw[t, stock_idx, 1]
        vol_t = self.raw[t, stock_idx, 5]
        blocks[:, :5, :] /= close_t[:, None, None]
        blocks[:, 5, :] /= vol_t[:, None]
        out = blocks.reshape(len(stock_idx), FEATURE_DIM)
        for j, s in enumerate(stock_idx):
            key = (t, int(s))
            if key in self.overrides:
                out[j] = self.overrides[key]
        return out

    def vector(self, date: str, stock: str) -> np.ndarray:
        i = self.stock_index[stock]
        return self.matrix(date, np.array([i]))[0]

    def sequences(self, date: str, stock_idx: np.ndarray) -> np.ndarray:
        """Same content as matrix() but shaped (n, 60, 6), time-major."""
        m = self.matrix(date, stock_idx)
        return m.reshape(len(stock_idx), len(FIELDS), LOOKBACK).transpose(0, 2, 1)


def _tradable_mask(present: np.ndarray) -> np.ndarray:
    """Tradable at t needs presence on all 61 slots t-60 .. t."""
    n_dates, n_stocks = present.shape
    out = np.zeros((n_dates, n_stocks), dtype=bool)
    if n_dates >= LOOKBACK + 1:
        win = np.lib.stride_tricks.sliding_window_view(present, LOOKBACK + 1, axis=0)
        out[LOOKBACK:] = win.all(axis=-1)
    return out


@dataclass
class LabelPanel:
    """Raw next-day trends and their per-date z-scored form.

    ``raw`` is NaN where the stock lacks a row at t or t+1; ``normalized``
    is NaN outside the labeled set (tradable stocks with a raw label).
    """

    raw: np.ndarray
    normalized: np.ndarray
    labeled: np.ndarray  # bool, tradable & has raw label


def compute_trend(close: np.ndarray, dates, stocks) -> np.ndarray:
    """Next-day change rate (close[t+1] - close[t]) / close[t] per (date, stock).

    ``close`` is (dates, stocks) with NaN for missing rows. Nonpositive
    prices are a data error (reported with stock and date); the final date
    has no label.
    """
    bad = np.argwhere(np.nan_to_num(close, nan=1.0) <= 0)
    if bad.size:
        t, i = bad[0]
        raise DataError(f"nonpositive close for stock {stocks[i]} at {dates[t]}")
    raw = np.full_like(close, np.nan)
    raw[:-1] = (close[1:] - close[:-1]) / close[:-1]
    return raw


def normalize_labels(values: np.ndarray) -> np.ndarray:
    """Z-score one date's labels with the population std; degenerate -> zeros."""
    values = np.asarray(values, dtype=np.float64)
    std = values.std()
    if std < 1e-12:
        return np.zeros_like(values)
    return (values - values.mean()) / std


def build_label_panel(close: np.ndarray, tradable: np.ndarray, dates, stocks) -> LabelPanel:
    raw = compute_trend(close, dates, stocks)
    labeled = tradable & ~np.isnan(raw)
    normalized = np.full_like(raw, np.nan)
    for t in range(raw.shape[0]):
        mask = labeled[t]
        if mask.any():
            normalized[t, mask] = normalize_labels(raw[t, mask])
    return LabelPanel(raw=raw, normalized=normalized, labeled=labeled)


class ConceptCalendar:
    """Per-date concept membership and market caps.

    ``memberships`` maps a date index to {concept name -> sorted stock
    indices}. Dates without their own block in the concepts file inherit
    the closest earlier block; dates before the first block have no
    concepts. ``caps`` is (dates, stocks) with NaN where absent.
    """

    def __init__(self, dates, stocks, memberships: dict[int, dict[str, np.ndarray]],
                 caps: np.ndarray):
        self.dates = tuple(dates)
        self.stocks = tuple(stocks)
        self.date_index = {d: i for i, d in enumerate(self.dates)}
        self.memberships = memberships
        self.caps = caps

    def concepts_at(self, date: str) -> dict[str, np.ndarray]:
        return self.memberships.get(self.date_index[date], {})

    def caps_at(self, date: str) -> np.ndarray:
        return self.caps[self.date_index[date]]


def _read_csv(path, header: list[str]) -> list[list[str]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected header {','.join(header)}") from None
        if first != header:
            raise DataError(f"{path}: bad header {first!r}, expected {header!r}")
        return [row for row in reader if row]


def load_panels(prices_path, concepts_path, caps_path, features_path=None):
    """Load aligned (FeaturePanel, LabelPanel, ConceptCalendar) from CSV files.

    ``features_path`` optionally supplies precomputed feature vectors
    (header ``date,stock`` plus exactly 360 value columns) that override
    the price-derived ones for the listed (date, stock) pairs.
    """
    rows = _read_csv(prices_path, _PRICES_HEADER)
    dates = sorted({r[0] for r in rows})
    stocks = sorted({r[1] for r in rows})
    date_index = {d: i for i, d in enumerate(dates)}
    stock_index = {s: i for i, s in enumerate(stocks)}

    raw = np.full((len(dates), len(stocks), len(FIELDS)), np.nan)
    for r in rows:
        if len(r) != len(_PRICES_HEADER):
            raise DataError(f"{prices_path}: row of width {len(r)}, expected {len(_PRICES_HEADER)}")
        t, i = date_index[r[0]], stock_index[r[1]]
        if not np.isnan(raw[t, i, 0]):
            raise DataError(f"{prices_path}: duplicate row for stock {r[1]} at {r[0]}")
        vals = np.array([float(v) for v in r[2:]])
        if (vals <= 0).any() or not np.isfinite(vals).all():
            raise DataError(f"{prices_path}: nonpositive field for stock {r[1]} at {r[0]}")
        raw[t, i] = vals

    overrides = {}
    if features_path is not None:
        with open(features_path, newline="") as fh:
            reader = csv.reader(fh)
            head = next(reader, None)
            if head is None or head[:2] != ["date", "stock"] or len(head) != 2 + FEATURE_DIM:
                width = 0 if head is None else len(head)
                raise DataError(f"{features_path}: feature row of width {width}, "
                                f"expected {2 + FEATURE_DIM} columns")
            for r in reader:
                if not r:
                    continue
                if len(r) != 2 + FEATURE_DIM:
                    raise DataError(f"{features_path}: feature row of width {len(r)}, "
                                    f"expected {2 + FEATURE_DIM} columns")
                if r[0] not in date_index or r[1] not in stock_index:
                    raise DataError(f"{features_path}: unknown date/stock {r[0]},{r[1]}")
                key = (date_index[r[0]], stock_index[r[1]])
                overrides[key] = np.array([float(v) for v in r[2:]])

    features = FeaturePanel(dates, stocks, raw, overrides)
    labels = build_label_panel(raw[:, :, 1], features.tradable, dates, stocks)
    calendar = load_calendar(concepts_path, caps_path, dates, stocks)
    return features, labels, calendar


def load_calendar(concepts_path, caps_path, dates, stocks) -> ConceptCalendar:
    date_index = {d: i for i, d in enumerate(dates)}
    stock_index = {s: i for i, s in enumerate(stocks)}

    blocks: dict[int, dict[str, set]] = {}
    for r in _read_csv(concepts_path, _CONCEPTS_HEADER):
        if r[0] not in date_index:
            raise DataError(f"{concepts_path}: unknown date {r[0]}")
        if r[1] not in stock_index:
            raise DataError(f"{concepts_path}: concept {r[2]} names unknown stock {r[1]}")
        blocks.setdefault(date_index[r[0]], {}).setdefault(r[2], set()).add(stock_index[r[1]])

    memberships: dict[int, dict[str, np.ndarray]] = {}
    current: dict[str, np.ndarray] = {}
    for t in range(len(dates)):
        if t in blocks:
            current = {name: np.array(sorted(members), dtype=int)
                       for name, members in sorted(blocks[t].items())}
        memberships[t] = current

    caps = np.full((len(dates), len(stocks)), np.nan)
    for r in _read_csv(caps_path, _CAPS_HEADER):
        if r[0] not in date_index:
            raise DataError(f"{caps_path}: unknown date {r[0]}")
        if r[1] not in stock_index:
            raise DataError(f"{caps_path}: unknown stock {r[1]}")
        value = float(r[2])
        if value <= 0:
            raise DataError(f"{caps_path}: nonpositive market cap for stock {r[1]} at {r[0]}")
        caps[date_index[r[0]], stock_index[r[1]]] = value

    return ConceptCalendar(dates, stocks, memberships, caps)


@dataclass
class Splits:
    """Closed date ranges for train/valid/test."""

    train: tuple[str, str]
    valid: tuple[str, str]
    test: tuple[str, str]

    @classmethod
    def from_dict(cls, d: dict) -> "Splits":
        out = {}
        for name in ("train", "valid", "test"):
            if name not in d:
                raise DataError(f"split config missing range {name!r}")
            lo, hi = d[name]
            if lo > hi:
                raise DataError(f"split {name}: empty range {lo}..{hi}")
            out[name] = (lo, hi)
        return cls(**out)

    def contains(self, name: str, date: str) -> bool:
        lo, hi = getattr(self, name)
        return lo <= date <= hi


@dataclass
class DateBatch:
    """One cross-section: every model step consumes exactly one of these."""

    date: str
    stock_idx: np.ndarray          # global indices into market.stocks
    ids: tuple[str, ...]
    sequences: np.ndarray          # (n, 60, 6)
    labels_raw: np.ndarray         # (n,)
    labels_norm: np.ndarray        # (n,)
    caps: np.ndarray               # (n,), NaN where absent
    concepts: dict[str, np.ndarray]  # name -> local indices into this batch


class MarketData:
    """Bundle of aligned panels with per-date batch assembly."""

    def __init__(self, features: FeaturePanel, labels: LabelPanel, calendar: ConceptCalendar):
        self.features = features
        self.labels = labels
        self.calendar = calendar
        self.dates = features.dates
        self.stocks = features.stocks
        self.date_index = features.date_index

    @property
    def close(self) -> np.ndarray:
        return self.features.raw[:, :, 1]

    def labeled_dates(self, split: Splits | None = None, part: str = "train",
                      min_stocks: int = 2) -> list[str]:
        out = []
        for t, date in enumerate(self.dates):
            if split is not None and not split.contains(part, date):
                continue
            if self.labels.labeled[t].sum() >= min_stocks:
                out.append(date)
        return out

    def tradable_dates(self, min_stocks: int = 1) -> list[str]:
        return [d for t, d in enumerate(self.dates)
                if self.features.tradable[t].sum() >= min_stocks]

    def batch(self, date: str, require_label: bool = True) -> DateBatch:
        t = self.date_index[date]
        mask = self.labels.labeled[t] if require_label else self.features.tradable[t]
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            raise DataError(f"no eligible stocks at {date}")
        local = {int(g): j for j, g in enumerate(idx)}
        concepts = {}
        for name, members in self.calendar.concepts_at(date).items():
            kept = np.array([local[int(m)] for m in members if int(m) in local], dtype=int)
            if kept.size:
                concepts[name] = kept
        return DateBatch(
            date=date,
            stock_idx=idx,
            ids=tuple(self.stocks[i] for i in idx),
            sequences=self.features.sequences(date, idx),
            labels_raw=self.labels.raw[t, idx],
            labels_norm=self.labels.normalized[t, idx],
            caps=self.calendar.caps_at(date)[idx],
            concepts=concepts,
        )


def load_market(prices_path, concepts_path, caps_path, features_path=None) -> MarketData:
    features, labels, calendar = load_panels(prices_path, concepts_path, caps_path, features_path)
    return MarketData(features, labels, calendar)
