"""Concept-oriented forecasting model.

Per-date forward pass over one cross-section of stocks:

1. a 2-layer GRU encodes each stock's (60 steps x 6 fields) window into a
   base embedding X0 (last hidden state of the top layer),
2. the predefined-concept module pools member stocks into concept reps
   (cap-weighted init, then a cosine/softmax correction over all stocks),
   hands shared information back to every stock, and emits a backcast and
   a forecast,
3. the hidden-concept module seeds one candidate concept per stock from
   the residual X1 = X0 - backcast0, keeps only concepts that win at
   least one stock's argmax, and aggregates with raw cosine weights,
4. an individual module forecasts from the remaining residual X2,
5. the prediction head maps the summed forecasts to one scalar per stock.

The discrete hidden-concept edge structure is a constant of each forward
pass: gradients flow through the cosine weights and embeddings, never
through the argmax itself. Argmax ties go to the candidate owned by the
smallest stable stock id, which keeps the pass equivariant to input
stock order.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DTYPES, NumericError, ShapeError, Tensor
from .data import FEATURE_DIM, LOOKBACK, DataError, DateBatch, FIELDS

log = logging.getLogger(__name__)

ABLATIONS = ("none", "no_correction", "no_predefined", "no_hidden",
             "no_individual", "predefined_only", "gru_baseline")

_CKPT_MAGIC = b"CONCEPTCAST-CKPT1\n"


@dataclass
class ModelConfig:
    hidden_size: int = 128
    gru_layers: int = 2
    dtype: str = "float32"
    ablation: str = "none"
    leaky_slope: float = 0.01
    # hidden module queries its own input X1; set False to query with X0
    hidden_query_residual: bool = True

    def validate(self):
        if self.hidden_size < 1:
            raise ValueError(f"hidden_size must be positive, got {self.hidden_size}")
        if self.gru_layers < 1:
            raise ValueError(f"gru_layers must be positive, got {self.gru_layers}")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype {self.dtype!r} not in {sorted(DTYPES)}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation {self.ablation!r} not in {ABLATIONS}")

    def to_dict(self) -> dict:
        return {"hidden_size": self.hidden_size, "gru_layers": self.gru_layers,
                "dtype": self.dtype, "ablation": self.ablation,
                "leaky_slope": self.leaky_slope,
                "hidden_query_residual": self.hidden_query_residual}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


def init_params(config: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Fan-in uniform weights in [-1/sqrt(fan_in), 1/sqrt(fan_in)], zero biases."""
    config.validate()
    rng = np.random.default_rng(seed)
    d = config.hidden_size
    dt = config.dtype
    params: dict[str, Tensor] = {}

    def weight(name, fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = Tensor(rng.uniform(-bound, bound, size=shape),
                              requires_grad=True, dtype=dt)

    def bias(name, width):
        params[name] = Tensor(np.zeros(width), requires_grad=True, dtype=dt)

    in_width = len(FIELDS)
    for layer in range(config.gru_layers):
        fan = in_width if layer == 0 else d
        weight(f"gru{layer}.w_ih", fan, (fan, 3 * d))
        weight(f"gru{layer}.w_hh", d, (d, 3 * d))
        bias(f"gru{layer}.b_ih", 3 * d)
        bias(f"gru{layer}.b_hh", 3 * d)

    for name in ("predef.correct", "predef.agg", "predef.backcast", "predef.forecast",
                 "hidden.concept", "hidden.agg", "hidden.backcast", "hidden.forecast",
                 "indiv.forecast"):
        weight(f"{name}.w", d, (d, d))
        bias(f"{name}.b", d)
    weight("head.w", d, (d, 1))
    bias("head.b", 1)
    # Input-normalizer buffers, identity until fitted on a train split.
    # They ride along in the params dict (and checkpoints) but never get
    # gradients, so the optimizer leaves them alone.
    params["norm.mean"] = Tensor(np.zeros((LOOKBACK, len(FIELDS))), dtype=dt)
    params["norm.std"] = Tensor(np.ones((LOOKBACK, len(FIELDS))), dtype=dt)
    return params


def fit_normalizer(params: dict[str, Tensor], sequence_batches) -> None:
    """Set norm.mean / norm.std from per-(step, field) moments.

    Raw inputs are ratios hugging 1.0, which leaves almost no angular
    spread between stocks; standardizing each slot restores it. Slots
    that never vary keep scale 1 so they pass through unchanged.
    """
    count = 0
    total = np.zeros((LOOKBACK, len(FIELDS)))
    total_sq = np.zeros((LOOKBACK, len(FIELDS)))
    for seq in sequence_batches:
        arr = np.asarray(seq, dtype=np.float64)
        count += arr.shape[0]
        total += arr.sum(axis=0)
        total_sq += (arr ** 2).sum(axis=0)
    if count == 0:
        raise DataError("cannot fit the input normalizer on zero rows")
    mean = total / count
    var = np.maximum(total_sq / count - mean ** 2, 0.0)
    std = np.sqrt(var)
    std[std < 1e-8] = 1.0
    dt = params["norm.mean"].data.dtype
    params["norm.mean"].data = mean.astype(dt)
    params["norm.std"].data = std.astype(dt)


def encode(params: dict[str, Tensor], sequences: np.ndarray, config: ModelConfig) -> Tensor:
    """Run the GRU stack; X0 is the top layer's last hidden state, one row per stock.

    Accepts either flat 360-vectors (reshaped to 60 steps x 6 fields) or
    ready-made (stocks, steps, 6) sequences.
    """
    if sequences.ndim == 2:
        if sequences.shape[1] != FEATURE_DIM:
            raise ShapeError("encode", sequences.shape, (None, FEATURE_DIM))
        sequences = (sequences.reshape(-1, len(FIELDS), LOOKBACK)
                     .transpose(0, 2, 1))
    if sequences.ndim != 3 or sequences.shape[2] != len(FIELDS):
        raise ShapeError("encode", sequences.shape, (None, None, len(FIELDS)))
    if "norm.mean" in params:
        # Shorter sequences align against the most recent normalizer slots.
        steps = sequences.shape[1]
        mean = params["norm.mean"].data[-steps:]
        std = params["norm.std"].data[-steps:]
        sequences = (sequences - mean) / std
    out = Tensor(sequences, dtype=config.dtype)
    for layer in range(config.gru_layers):
        out = ad.gru_layer(out, params[f"gru{layer}.w_ih"], params[f"gru{layer}.w_hh"],
                           params[f"gru{layer}.b_ih"], params[f"gru{layer}.b_hh"])
    return ad.last_step(out)


def concept_weights(caps: np.ndarray, concepts: dict[str, np.ndarray],
                    n_stocks: int, dtype: str) -> tuple[list[str], np.ndarray]:
    """Cap-proportional membership weights, one row per concept.

    Missing caps take the within-concept mean of the present ones; if a
    concept has no caps at all its members get equal weights.
    """
    names = sorted(concepts)
    alpha0 = np.zeros((len(names), n_stocks), dtype=DTYPES[dtype])
    for k, name in enumerate(names):
        members = concepts[name]
        c = caps[members].astype(np.float64)
        present = ~np.isnan(c)
        if present.any():
            c[~present] = c[present].mean()
        else:
            c[:] = 1.0
        alpha0[k, members] = c / c.sum()
    return names, alpha0


def init_predefined(x0: Tensor, alpha0: np.ndarray) -> Tensor:
    """Initial concept reps: cap-weighted averages of member embeddings."""
    return ad.matmul(Tensor(alpha0), x0)


def correct_predefined(params, x0: Tensor, e0: Tensor,
                       config: ModelConfig) -> tuple[Tensor, Tensor]:
    """Re-weight every stock into every concept by normalized cosine similarity."""
    sim = ad.cosine_rows(e0, x0)               # (concepts, stocks)
    alpha1 = ad.softmax_rows(sim)              # rows sum to 1 over stocks
    pooled = ad.matmul(alpha1, x0)
    e1 = ad.leaky_relu(ad.linear(pooled, params["predef.correct.w"],
                                 params["predef.correct.b"]), config.leaky_slope)
    return e1, alpha1


@dataclass
class HiddenGraph:
    """Result of hidden-concept discovery for one date."""

    gamma: np.ndarray                 # (n, n) cosine of (concept k, stock i)
    edges: list[tuple[int, int]]      # (stock position, concept position)
    survivors: list[int]              # concept positions with >= 1 edge, id order
    reps: Tensor | None               # (len(survivors), hidden) aggregated reps


def discover_hidden(params, x1: Tensor, ids, config: ModelConfig) -> HiddenGraph:
    """Seed one candidate concept per stock and keep the argmax winners.

    Every stock connects to its most similar candidate other than itself
    (ties: smallest stable stock id). Candidates nobody picked are deleted;
    a stock gains a self-edge only if its own candidate survived. Surviving
    reps aggregate connected stocks with raw cosine weights.
    """
    n = x1.data.shape[0]
    gamma_t = ad.cosine_rows(x1, x1)           # gamma[k, i] = cos(x_k, x_i)
    gamma = gamma_t.data
    ids_arr = np.asarray(ids)

    edges = []
    for i in range(n):
        col = np.delete(gamma[:, i], i)
        best = col.max()
        ties = np.flatnonzero(gamma[:, i] == best)
        ties = ties[ties != i]
        k = ties[np.argmin(ids_arr[ties])]
        edges.append((i, int(k)))
    survivors = sorted({k for _, k in edges})
    for i in range(n):
        if i in survivors:
            edges.append((i, i))

    mask = np.zeros((n, n), dtype=DTYPES[config.dtype])
    for i, k in edges:
        mask[k, i] = 1.0
    weighted = ad.mul(gamma_t, Tensor(mask))
    kept = ad.gather_rows(weighted, np.array(survivors, dtype=int))
    pooled = ad.matmul(kept, x1)
    reps = ad.leaky_relu(ad.linear(pooled, params["hidden.concept.w"],
                                   params["hidden.concept.b"]), config.leaky_slope)
    return HiddenGraph(gamma=gamma, edges=edges, survivors=survivors, reps=reps)


def aggregate_to_stocks(params, group: str, queries: Tensor, reps: Tensor,
                        config: ModelConfig) -> tuple[Tensor, Tensor]:
    """Route concept reps back to stocks with a softmax over concepts."""
    sim = ad.cosine_rows(queries, reps)        # (stocks, concepts)
    beta = ad.softmax_rows(sim)
    pooled = ad.matmul(beta, reps)
    shat = ad.leaky_relu(ad.linear(pooled, params[f"{group}.agg.w"],
                                   params[f"{group}.agg.b"]), config.leaky_slope)
    return shat, beta


def module_outputs(params, group: str, shat: Tensor,
                   config: ModelConfig) -> tuple[Tensor, Tensor]:
    """Backcast (what the module explained) and forecast (what it predicts)."""
    backcast = ad.leaky_relu(ad.linear(shat, params[f"{group}.backcast.w"],
                                       params[f"{group}.backcast.b"]), config.leaky_slope)
    forecast = ad.leaky_relu(ad.linear(shat, params[f"{group}.forecast.w"],
                                       params[f"{group}.forecast.b"]), config.leaky_slope)
    return backcast, forecast


def individual_forecast(params, x2: Tensor, config: ModelConfig) -> Tensor:
    return ad.leaky_relu(ad.linear(x2, params["indiv.forecast.w"],
                                   params["indiv.forecast.b"]), config.leaky_slope)


@dataclass
class ForwardTrace:
    """Everything one forward pass produced, for loss, tests and export."""

    date: str
    ids: tuple[str, ...]
    pred: Tensor                       # (n, 1), feeds the loss
    predictions: np.ndarray            # (n,)
    x0: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    backcast0: np.ndarray
    backcast1: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    y2: np.ndarray
    concept_names: list[str] = field(default_factory=list)
    alpha0: np.ndarray | None = None
    alpha1: np.ndarray | None = None
    e0: np.ndarray | None = None
    e1: np.ndarray | None = None
    beta_predef: np.ndarray | None = None
    gamma: np.ndarray | None = None
    edges: list[tuple[int, int]] = field(default_factory=list)
    survivors: list[int] = field(default_factory=list)
    u1: np.ndarray | None = None
    beta_hidden: np.ndarray | None = None
    row_sum_dev: float = 0.0


def _zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros_like(x.data))


def forward(params: dict[str, Tensor], batch: DateBatch, config: ModelConfig,
            debug: bool = False) -> ForwardTrace:
    """One full pass over a date's cross-section; see the module docstring."""
    config.validate()
    n = len(batch.ids)
    x0 = encode(params, batch.sequences, config)

    if config.ablation == "gru_baseline":
        pred = ad.linear(x0, params["head.w"], params["head.b"])
        zero = np.zeros_like(x0.data)
        return ForwardTrace(date=batch.date, ids=batch.ids, pred=pred,
                            predictions=pred.data[:, 0].copy(), x0=x0.data,
                            x1=x0.data, x2=x0.data, backcast0=zero, backcast1=zero,
                            y0=zero, y1=zero, y2=zero)

    trace = ForwardTrace(date=batch.date, ids=batch.ids, pred=None,
                         predictions=None, x0=x0.data, x1=None, x2=None,
                         backcast0=None, backcast1=None, y0=None, y1=None, y2=None)
    row_devs = [0.0]

    use_predef = config.ablation != "no_predefined" and len(batch.concepts) > 0
    if use_predef:
        names, alpha0 = concept_weights(batch.caps, batch.concepts, n, config.dtype)
        e0 = init_predefined(x0, alpha0)
        trace.concept_names, trace.alpha0, trace.e0 = names, alpha0, e0.data
        if config.ablation == "no_correction":
            reps = e0
        else:
            reps, alpha1 = correct_predefined(params, x0, e0, config)
            trace.alpha1, trace.e1 = alpha1.data, reps.data
            row_devs.append(float(np.abs(alpha1.data.sum(axis=1) - 1.0).max()))
        shat0, beta0 = aggregate_to_stocks(params, "predef", x0, reps, config)
        trace.beta_predef = beta0.data
        row_devs.append(float(np.abs(beta0.data.sum(axis=1) - 1.0).max()))
        xhat0, y0 = module_outputs(params, "predef", shat0, config)
        x1 = ad.sub(x0, xhat0)
    else:
        if config.ablation != "no_predefined" and not batch.concepts:
            log.info("date %s: no predefined concepts, module bypassed", batch.date)
        xhat0, y0 = _zeros_like(x0), _zeros_like(x0)
        x1 = x0

    hidden_off = config.ablation in ("no_hidden", "predefined_only")
    use_hidden = not hidden_off and n >= 2
    if use_hidden:
        graph = discover_hidden(params, x1, batch.ids, config)
        trace.gamma = graph.gamma
        trace.edges = graph.edges
        trace.survivors = graph.survivors
        trace.u1 = graph.reps.data
        queries = x1 if config.hidden_query_residual else x0
        shat1, beta1 = aggregate_to_stocks(params, "hidden", queries, graph.reps, config)
        trace.beta_hidden = beta1.data
        row_devs.append(float(np.abs(beta1.data.sum(axis=1) - 1.0).max()))
        xhat1, y1 = module_outputs(params, "hidden", shat1, config)
        x2 = ad.sub(x1, xhat1)
    else:
        if not hidden_off:
            log.info("date %s: fewer than 2 stocks, hidden module bypassed", batch.date)
        xhat1, y1 = _zeros_like(x0), _zeros_like(x0)
        x2 = x1

    if config.ablation in ("no_individual", "predefined_only"):
        y2 = _zeros_like(x0)
    else:
        y2 = individual_forecast(params, x2, config)

    total = ad.add(ad.add(y0, y1), y2)
    pred = ad.linear(total, params["head.w"], params["head.b"])

    trace.pred = pred
    trace.predictions = pred.data[:, 0].copy()
    trace.x1, trace.x2 = x1.data, x2.data
    trace.backcast0, trace.backcast1 = xhat0.data, xhat1.data
    trace.y0, trace.y1, trace.y2 = y0.data, y1.data, y2.data
    trace.row_sum_dev = max(row_devs)

    if debug:
        _debug_checks(trace)
    return trace


def _debug_checks(trace: ForwardTrace):
    if trace.row_sum_dev > 1e-6:
        raise NumericError(f"date {trace.date}: attention row sums drift "
                           f"{trace.row_sum_dev:.3e} from 1")
    if not np.array_equal(trace.x1, trace.x0 - trace.backcast0):
        raise NumericError(f"date {trace.date}: first residual identity broken")
    if not np.array_equal(trace.x2, trace.x1 - trace.backcast1):
        raise NumericError(f"date {trace.date}: second residual identity broken")
    if trace.survivors:
        touched = {k for _, k in trace.edges}
        if touched != set(trace.survivors):
            raise NumericError(f"date {trace.date}: surviving concepts and edges disagree")


def date_loss(trace: ForwardTrace, labels: np.ndarray, dtype: str) -> Tensor:
    """Mean squared error over the date's cross-section."""
    target = Tensor(labels.reshape(-1, 1), dtype=dtype)
    return ad.mse(trace.pred, target)


# ----------------------------------------------------------- checkpoint io


def save_checkpoint(path, params: dict[str, Tensor], config: ModelConfig,
                    extra: dict | None = None):
    """Single-file binary checkpoint with a JSON header and raw tensor bytes.

    The layout is deliberately timestamp-free so identical params and
    config always produce byte-identical files.
    """
    names = sorted(params)
    tensors = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(params[name].data)
        tensors.append({"name": name, "dtype": str(arr.dtype),
                        "shape": list(arr.shape), "offset": offset,
                        "nbytes": arr.nbytes})
        offset += arr.nbytes
    header = {"config": config.to_dict(), "tensors": tensors, "extra": extra or {}}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(params[name].data).tobytes())


def load_checkpoint(path) -> tuple[dict[str, Tensor], ModelConfig, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(blob_len).decode())
        params = {}
        for meta in header["tensors"]:
            raw = fh.read(meta["nbytes"])
            arr = np.frombuffer(raw, dtype=meta["dtype"]).reshape(meta["shape"]).copy()
            params[meta["name"]] = Tensor(arr, requires_grad=True)
    config = ModelConfig.from_dict(header["config"])
    return params, config, header.get("extra", {})
