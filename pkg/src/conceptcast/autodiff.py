"""Dense-tensor computation graph with reverse-mode differentiation.

Every tensor op records its parents and a vector-Jacobian product closure.
The graph is implicit: tensors carry a monotonically increasing creation id,
so creation order is already a topological order (an op's inputs always
exist before its output). ``backward`` walks the reachable subgraph once,
in descending id order.

Repeated ``backward`` calls on the same loss recompute gradients from
scratch and overwrite ``.grad`` on the leaves, so they yield identical
results (gradients are never accumulated across calls).
"""

from __future__ import annotations

import itertools

import numpy as np

_ids = itertools.count()

DTYPES = {"float32": np.float32, "float64": np.float64}


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {self.shapes}")


class NumericError(ArithmeticError):
    """An op produced NaN or Inf."""


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode autodiff.

    ``parents`` is a tuple of ``(tensor, vjp)`` pairs where ``vjp`` maps the
    upstream gradient to this parent's gradient contribution.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_id")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is not None:
            key = str(dtype)
            if key not in DTYPES:
                raise ValueError(f"unsupported dtype {dtype!r}, expected one of {sorted(DTYPES)}")
            dtype = DTYPES[key]
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.parents = ()
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, grad={self.requires_grad})"

    # Convenience operators; all defer to the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _check_finite(op: str, arr: np.ndarray):
    if not np.isfinite(arr).all():
        raise NumericError(f"{op}: produced non-finite values")


def _make(op, data, parents):
    """Wrap an op result; parents is a sequence of (tensor, vjp) pairs."""
    _check_finite(op, data)
    out = Tensor(data)
    kept = tuple((p, vjp) for p, vjp in parents if p.requires_grad)
    out.requires_grad = bool(kept)
    out.parents = kept
    out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary_shapes(op, a, b):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(op, a.data.shape, b.data.shape) from None


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("add", a, b)
    return _make("add", a.data + b.data, [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(g, b.data.shape)),
    ])


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("sub", a, b)
    return _make("sub", a.data - b.data, [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(-g, b.data.shape)),
    ])


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("mul", a, b)
    return _make("mul", a.data * b.data, [
        (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
    ])


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, [(a, lambda g: -g)])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError("matmul", a.data.shape, b.data.shape)
    return _make("matmul", a.data @ b.data, [
        (a, lambda g: g @ b.data.T),
        (b, lambda g: a.data.T @ g),
    ])


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.data.shape)
    return _make("transpose", a.data.T.copy(), [(a, lambda g: g.T)])


def concat_rows(tensors) -> Tensor:
    tensors = list(tensors)
    widths = {t.data.shape[1:] for t in tensors}
    if len(widths) != 1:
        raise ShapeError("concat_rows", *[t.data.shape for t in tensors])
    counts = [t.data.shape[0] for t in tensors]
    offsets = np.cumsum([0] + counts)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]
        return lambda g: g[lo:hi]

    return _make("concat_rows", np.concatenate([t.data for t in tensors], axis=0),
                 [(t, make_vjp(i)) for i, t in enumerate(tensors)])


def asum(a: Tensor, axis=None) -> Tensor:
    data = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return np.full_like(a.data, g)
        return np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy()

    return _make("sum", data, [(a, vjp)])


def amean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    data = a.data.mean(axis=axis)

    def vjp(g):
        if axis is None:
            return np.full_like(a.data, g / n)
        return np.broadcast_to(np.expand_dims(g / n, axis), a.data.shape).copy()

    return _make("mean", data, [(a, vjp)])


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    # exp on the negative half-line only, for stability in both dtypes
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_stable(a.data)
    return _make("sigmoid", out, [(a, lambda g: g * out * (1.0 - out))])


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make("tanh", out, [(a, lambda g: g * (1.0 - out * out))])


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, slope * a.data)
    return _make("leaky_relu", out, [(a, lambda g: g * np.where(mask, 1.0, slope))])


def softmax_rows(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("softmax_rows", a.data.shape)
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return out * (g - (g * out).sum(axis=1, keepdims=True))

    return _make("softmax_rows", out, [(a, vjp)])


def l2norm_rows(a: Tensor) -> Tensor:
    """Euclidean norm of each row, shape (rows, 1). Zero rows get subgradient 0."""
    if a.data.ndim != 2:
        raise ShapeError("l2norm_rows", a.data.shape)
    n = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))

    def vjp(g):
        safe = np.where(n > 0, n, 1.0)
        return np.where(n > 0, g * a.data / safe, 0.0)

    return _make("l2norm_rows", n, [(a, vjp)])


def cosine_rows(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Cosine similarity between every row of ``a`` and every row of ``b``.

    Output ``C[i, j] = cos(a_i, b_j)``. Each norm carries an ``eps`` guard so
    an all-zero row yields similarity 0 instead of NaN.
    """
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ShapeError("cosine_rows", a.data.shape, b.data.shape)
    na = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))  # (ra, 1)
    nb = np.sqrt((b.data * b.data).sum(axis=1, keepdims=True))  # (rb, 1)
    denom = (na + eps) * (nb + eps).T
    out = (a.data @ b.data.T) / denom

    # d cos / d a_i needs a_i / |a_i|; zero rows get direction 0.
    ua = np.where(na > 0, a.data / np.where(na > 0, na, 1.0), 0.0)
    ub = np.where(nb > 0, b.data / np.where(nb > 0, nb, 1.0), 0.0)

    def vjp_a(g):
        gd = g / denom
        return gd @ b.data - ((g * out).sum(axis=1, keepdims=True) / (na + eps)) * ua

    def vjp_b(g):
        gd = g / denom
        return gd.T @ a.data - ((g * out).sum(axis=0)[:, None] / (nb + eps)) * ub

    return _make("cosine_rows", out, [(a, vjp_a), (b, vjp_b)])


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements; returns a scalar tensor."""
    if a.data.shape != b.data.shape:
        raise ShapeError("mse", a.data.shape, b.data.shape)
    diff = a.data - b.data
    n = a.data.size
    out = np.asarray((diff * diff).sum() / n, dtype=a.data.dtype)
    return _make("mse", out, [
        (a, lambda g: (2.0 * g / n) * diff),
        (b, lambda g: (-2.0 * g / n) * diff),
    ])


def gather_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return z

    return _make("gather_rows", a.data[idx], [(a, vjp)])


def last_step(a: Tensor) -> Tensor:
    """Last timestep of a (rows, steps, width) sequence tensor."""
    if a.data.ndim != 3:
        raise ShapeError("last_step", a.data.shape)

    def vjp(g):
        z = np.zeros_like(a.data)
        z[:, -1, :] = g
        return z

    return _make("last_step", a.data[:, -1, :].copy(), [(a, vjp)])


def gru_layer(seq: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor) -> Tensor:
    """One GRU layer over a (rows, steps, in) sequence; returns all hidden states.

    Gate layout along the last axis of the fused weights is [reset, update,
    candidate]. The candidate's hidden-side preactivation is gated by the
    reset gate before the tanh. Backward is hand-rolled BPTT; it is what the
    finite-difference suite exercises hardest.
    """
    x = seq.data
    if x.ndim != 3 or w_ih.data.ndim != 2 or x.shape[2] != w_ih.data.shape[0]:
        raise ShapeError("gru_layer", x.shape, w_ih.data.shape)
    d3 = w_ih.data.shape[1]
    if d3 % 3 != 0 or w_hh.data.shape != (d3 // 3, d3):
        raise ShapeError("gru_layer", w_ih.data.shape, w_hh.data.shape)
    rows, steps, _ = x.shape
    d = d3 // 3

    wi, wh = w_ih.data, w_hh.data
    # Input-side preactivations for every step in one matmul.
    pi = (x.reshape(rows * steps, -1) @ wi + b_ih.data).reshape(rows, steps, d3)
    h = np.zeros((rows, d), dtype=x.dtype)
    hs = np.empty((rows, steps, d), dtype=x.dtype)
    rs = np.empty_like(hs)
    zs = np.empty_like(hs)
    cs = np.empty_like(hs)
    hlin = np.empty_like(hs)  # hidden-side candidate preactivation, pre-gating
    for t in range(steps):
        ph = h @ wh + b_hh.data
        pre_r = pi[:, t, :d] + ph[:, :d]
        pre_z = pi[:, t, d:2 * d] + ph[:, d:2 * d]
        r = _sigmoid_stable(pre_r)
        z = _sigmoid_stable(pre_z)
        c = np.tanh(pi[:, t, 2 * d:] + r * ph[:, 2 * d:])
        rs[:, t], zs[:, t], cs[:, t], hlin[:, t] = r, z, c, ph[:, 2 * d:]
        h = (1.0 - z) * c + z * h
        hs[:, t] = h

    def backward(g):
        d_pi = np.empty((rows, steps, d3), dtype=x.dtype)
        d_whh = np.zeros_like(wh)
        d_bhh = np.zeros_like(b_hh.data)
        carry = np.zeros((rows, d), dtype=x.dtype)
        for t in range(steps - 1, -1, -1):
            gh = g[:, t, :] + carry
            r, z, c = rs[:, t], zs[:, t], cs[:, t]
            h_prev = hs[:, t - 1] if t > 0 else np.zeros((rows, d), dtype=x.dtype)
            dc = gh * (1.0 - z)
            dz = gh * (h_prev - c)
            carry = gh * z
            dpn = dc * (1.0 - c * c)
            dr = dpn * hlin[:, t]
            d_ph = np.concatenate(
                [dr * r * (1.0 - r), dz * z * (1.0 - z), dpn * r], axis=1)
            d_pi[:, t, :d] = d_ph[:, :d]
            d_pi[:, t, d:2 * d] = d_ph[:, d:2 * d]
            d_pi[:, t, 2 * d:] = dpn
            d_whh += h_prev.T @ d_ph
            d_bhh += d_ph.sum(axis=0)
            carry = carry + d_ph @ wh.T
        flat = d_pi.reshape(rows * steps, d3)
        d_x = (flat @ wi.T).reshape(rows, steps, -1)
        d_wih = x.reshape(rows * steps, -1).T @ flat
        d_bih = flat.sum(axis=0)
        return d_x, d_wih, d_bih, d_whh, d_bhh

    cache = {}

    def run(g):
        # All five VJPs share one BPTT sweep per upstream gradient.
        if cache.get("g") is not g:
            cache["g"] = g
            cache["val"] = backward(g)
        return cache["val"]

    return _make("gru_layer", hs, [
        (seq, lambda g: run(g)[0]),
        (w_ih, lambda g: run(g)[1]),
        (b_ih, lambda g: run(g)[2]),
        (w_hh, lambda g: run(g)[3]),
        (b_hh, lambda g: run(g)[4]),
    ])


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with w of shape (in, out) and b of shape (out,)."""
    return add(matmul(x, w), b)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Returns a map from every ``requires_grad`` leaf tensor to its gradient
    array, and mirrors each gradient onto the leaf's ``.grad``. Creation ids
    give the topological order, so every node is visited exactly once.
    """
    if loss.data.size != 1:
        raise ShapeError("backward", loss.data.shape)
    if not loss.requires_grad and not loss.parents:
        return {}

    nodes = {loss._id: loss}
    stack = [loss]
    while stack:
        node = stack.pop()
        for parent, _ in node.parents:
            if parent._id not in nodes:
                nodes[parent._id] = parent
                stack.append(parent)

    grads = {loss._id: np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if not node.parents:
            if node.requires_grad:
                leaves[node] = g
                node.grad = g
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + contrib
            else:
                grads[parent._id] = contrib
    return leaves
