"""Daily cross-sectional evaluation: IC, Rank IC, Precision@N.

All metrics are computed per date over that date's cross-section and then
averaged. IC and Rank IC use raw labels; per-date z-scoring is a positive
affine map, so correlations against normalized labels are identical.
Precision@N counts strictly positive raw trends among the top N
predictions (ties at the cutoff go to the smaller stock id).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

PRECISION_NS = (3, 5, 10, 30)


@dataclass
class DateScores:
    """One date's predictions and realized raw labels, aligned by position."""

    date: str
    ids: tuple[str, ...]
    predictions: np.ndarray
    labels_raw: np.ndarray


@dataclass
class MetricReport:
    ic_mean: float | None
    rank_ic_mean: float | None
    precision_mean: dict[int, float | None]
    per_date: dict[str, dict[str, float]]
    skipped: dict[str, int] = field(default_factory=dict)

    def flat(self) -> dict[str, float]:
        """Name -> value map; metrics with no qualifying date are left out."""
        out = {"IC": self.ic_mean, "RankIC": self.rank_ic_mean}
        for n, v in self.precision_mean.items():
            out[f"Precision@{n}"] = v
        return {k: v for k, v in out.items() if v is not None}


def pearson(x: np.ndarray, y: np.ndarray) -> float | None:
    """Plain Pearson correlation; None when either side is degenerate."""
    if len(x) < 2 or x.std() == 0.0 or y.std() == 0.0:
        return None
    return float(np.corrcoef(x, y)[0, 1])


def ic(predictions: np.ndarray, labels: np.ndarray) -> float | None:
    return pearson(np.asarray(predictions, dtype=np.float64),
                   np.asarray(labels, dtype=np.float64))


def rank_ic(predictions: np.ndarray, labels: np.ndarray) -> float | None:
    """Pearson correlation of average-tie ranks."""
    if len(predictions) < 2:
        return None
    pr = stats.rankdata(predictions, method="average")
    lr = stats.rankdata(labels, method="average")
    return pearson(pr, lr)


def top_n_order(predictions: np.ndarray, ids) -> list[int]:
    """Positions sorted by descending prediction, ties by ascending stock id."""
    return sorted(range(len(predictions)), key=lambda i: (-predictions[i], ids[i]))


def precision_at_n(predictions: np.ndarray, labels_raw: np.ndarray, ids,
                   n: int) -> float | None:
    """Percent of the top-n predictions whose raw trend is strictly positive."""
    if len(predictions) < n:
        return None
    top = top_n_order(predictions, ids)[:n]
    return 100.0 * float(np.count_nonzero(labels_raw[np.array(top)] > 0)) / n


def evaluate(entries: list[DateScores], precision_ns=PRECISION_NS) -> MetricReport:
    """Aggregate per-date metrics over a test period; skipped dates are counted."""
    per_date: dict[str, dict[str, float]] = {}
    series: dict[str, list[float]] = {"IC": [], "RankIC": []}
    for n in precision_ns:
        series[f"Precision@{n}"] = []
    skipped = {name: 0 for name in series}

    for entry in entries:
        row: dict[str, float] = {}
        pred = np.asarray(entry.predictions, dtype=np.float64)
        label = np.asarray(entry.labels_raw, dtype=np.float64)
        for name, fn in (("IC", ic), ("RankIC", rank_ic)):
            value = fn(pred, label)
            if value is None:
                skipped[name] += 1
            else:
                row[name] = value
                series[name].append(value)
        for n in precision_ns:
            value = precision_at_n(pred, label, entry.ids, n)
            if value is None:
                skipped[f"Precision@{n}"] += 1
            else:
                row[f"Precision@{n}"] = value
                series[f"Precision@{n}"].append(value)
        per_date[entry.date] = row

    def mean(vals):
        return float(np.mean(vals)) if vals else None

    return MetricReport(
        ic_mean=mean(series["IC"]),
        rank_ic_mean=mean(series["RankIC"]),
        precision_mean={n: mean(series[f"Precision@{n}"]) for n in precision_ns},
        per_date=per_date,
        skipped=skipped,
    )


def write_per_date_csv(path, report: MetricReport):
    """One row per date; a blank cell means the metric was skipped there."""
    import csv

    precisions = sorted({int(k.split("@")[1]) for row in report.per_date.values()
                         for k in row if k.startswith("Precision")})
    names = ["IC", "RankIC"] + [f"Precision@{n}" for n in precisions]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date"] + names)
        for date in sorted(report.per_date):
            row = report.per_date[date]
            w.writerow([date] + [repr(row[n]) if n in row else "" for n in names])
