"""Exports the discovered hidden-concept structure for one date as CSV data.

The similarity matrix keeps only surviving concepts as columns.  Rows and
columns are independently reordered by average-linkage hierarchical
clustering on Euclidean distance so that block structure is visible when the
CSV is rendered as a heatmap by any plotting tool.
"""

from __future__ import annotations

import csv

import numpy as np
from scipy.cluster.hierarchy import leaves_list, linkage

from .data import MarketData
from .model import ModelConfig, forward


def cluster_order(matrix: np.ndarray) -> np.ndarray:
    """Leaf order of average-linkage clustering over the matrix's rows."""
    n = matrix.shape[0]
    if n < 2:
        return np.arange(n)
    return np.asarray(leaves_list(linkage(matrix, method="average",
                                          metric="euclidean")))


def hidden_similarity_export(market: MarketData, params, config: ModelConfig,
                             date: str):
    """Returns (row ids, column ids, reordered matrix, edge rows) for a date.

    Columns are the stocks whose candidate hidden concepts survived; edge
    rows are (stock, concept owner, similarity) using raw similarity values.
    """
    batch = market.batch(date, require_label=False)
    trace = forward(params, batch, config)
    if trace.gamma is None:
        raise ValueError(f"no hidden concepts on {date}: "
                         "cross-section too small or hidden module disabled")
    survivors = np.asarray(trace.survivors)
    sub = trace.gamma[survivors, :].T  # sub[i, j]: stock i vs surviving concept j
    row_order = cluster_order(sub)
    col_order = cluster_order(sub.T)
    rows = [trace.ids[i] for i in row_order]
    cols = [trace.ids[survivors[j]] for j in col_order]
    matrix = sub[np.ix_(row_order, col_order)]
    edges = [(trace.ids[i], trace.ids[k], float(trace.gamma[k, i]))
             for i, k in trace.edges]
    return rows, cols, matrix, edges


def write_heatmap_csv(path, rows, cols, matrix):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stock"] + list(cols))
        for name, line in zip(rows, matrix):
            writer.writerow([name] + [repr(float(v)) for v in line])


def write_edges_csv(path, date, edges):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", "stock", "hidden_concept", "weight"])
        for stock, owner, weight in edges:
            writer.writerow([date, stock, owner, repr(weight)])


__all__ = ["cluster_order", "hidden_similarity_export", "write_edges_csv",
           "write_heatmap_csv"]
