"""Hidden-concept matrix export: clustering order, CSV contents."""

import csv

import numpy as np
import pytest

from conceptcast.export import (cluster_order, hidden_similarity_export,
                                write_edges_csv, write_heatmap_csv)
from conceptcast.model import ModelConfig, forward, init_params
from conceptcast.synthetic import SyntheticSpec, synthetic_market


def small_setup(n=8, seed=2):
    market = synthetic_market(SyntheticSpec(
        n_stocks=n, n_factors=2, horizon=64, seed=seed, disclosed_factors=1))
    config = ModelConfig(hidden_size=8, gru_layers=1, dtype="float64")
    params = init_params(config, seed)
    return market, params, config


def test_cluster_order_groups_blocks():
    rng = np.random.default_rng(0)
    # rows alternate between two templates; clustering must un-shuffle them
    a = np.array([5.0, 5.0, 0.0, 0.0])
    b = np.array([0.0, 0.0, 5.0, 5.0])
    rows = np.vstack([(a if i % 2 == 0 else b) + rng.normal(scale=0.05, size=4)
                      for i in range(6)])
    order = cluster_order(rows)
    parity = [i % 2 for i in order]
    assert parity == sorted(parity) or parity == sorted(parity, reverse=True)


def test_cluster_order_tiny_inputs():
    assert list(cluster_order(np.zeros((1, 3)))) == [0]
    assert list(cluster_order(np.zeros((0, 3)))) == []


def test_two_stock_matrix_has_unit_self_similarity():
    market, params, config = small_setup(n=2)
    date = market.labeled_dates()[0]
    rows, cols, matrix, edges = hidden_similarity_export(market, params, config, date)
    assert sorted(rows) == sorted(cols)
    assert matrix.shape == (2, 2)
    for i, stock in enumerate(rows):
        j = cols.index(stock)
        # self-similarity differs from 1 only by the epsilon smoothing
        assert matrix[i, j] == pytest.approx(1.0, abs=1e-9)


def test_columns_are_exactly_the_survivors():
    market, params, config = small_setup(n=8)
    date = market.labeled_dates()[0]
    batch = market.batch(date, require_label=False)
    trace = forward(params, batch, config)
    rows, cols, matrix, edges = hidden_similarity_export(market, params, config, date)
    assert set(cols) == {trace.ids[kk] for kk in trace.survivors}
    assert set(rows) == set(trace.ids)
    assert matrix.shape == (len(rows), len(cols))
    # unpicked candidates must not appear as columns
    dropped = set(trace.ids) - set(cols)
    assert dropped.isdisjoint(cols)
    assert {owner for _, owner, _ in edges} == set(cols)


def test_matrix_values_match_forward_gamma():
    market, params, config = small_setup(n=6, seed=9)
    date = market.labeled_dates()[1]
    batch = market.batch(date, require_label=False)
    trace = forward(params, batch, config)
    rows, cols, matrix, edges = hidden_similarity_export(market, params, config, date)
    pos = {sid: i for i, sid in enumerate(trace.ids)}
    for i, stock in enumerate(rows):
        for j, owner in enumerate(cols):
            assert matrix[i, j] == trace.gamma[pos[owner], pos[stock]]
    for stock, owner, weight in edges:
        assert weight == trace.gamma[pos[owner], pos[stock]]


def test_csv_round_trip(tmp_path):
    market, params, config = small_setup(n=5, seed=4)
    date = market.labeled_dates()[0]
    rows, cols, matrix, edges = hidden_similarity_export(market, params, config, date)

    heat = tmp_path / "heat.csv"
    write_heatmap_csv(heat, rows, cols, matrix)
    with open(heat, newline="") as fh:
        reader = list(csv.reader(fh))
    assert reader[0] == ["stock"] + cols
    for line, stock, values in zip(reader[1:], rows, matrix):
        assert line[0] == stock
        assert [float(c) for c in line[1:]] == list(values)

    edge_path = tmp_path / "edges.csv"
    write_edges_csv(edge_path, date, edges)
    with open(edge_path, newline="") as fh:
        reader = list(csv.reader(fh))
    assert reader[0] == ["date", "stock", "hidden_concept", "weight"]
    assert len(reader) - 1 == len(edges)
    for line, (stock, owner, weight) in zip(reader[1:], edges):
        assert line[:3] == [date, stock, owner]
        assert float(line[3]) == weight
