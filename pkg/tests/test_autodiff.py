"""Gradient checks for every autodiff primitive against central finite differences."""

import numpy as np
import pytest

from conceptcast import autodiff as ad
from conceptcast.autodiff import NumericError, ShapeError, Tensor, backward


def fd_grad(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar f at x, one coordinate at a time."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * step)
    return g


def check_op(build, leaves, rtol: float = 1e-6, floor: float = 1e-7):
    """Compare backward() grads on `leaves` against finite differences of build().

    build() must construct the graph from the leaves' current .data and
    return a scalar Tensor.
    """
    loss = build()
    grads = backward(loss)
    for leaf in leaves:
        analytic = grads[leaf]
        numeric = fd_grad(lambda: float(build().data), leaf.data)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        rel = np.abs(analytic - numeric) / denom
        assert rel.max() < rtol, f"rel err {rel.max():.3e} on shape {leaf.data.shape}"


def leaf(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True, dtype="float64")


# ---------------------------------------------------------------- primitives


def test_add_mul_sub_neg_grads():
    rng = np.random.default_rng(0)
    a = leaf(rng, 3, 4)
    b = leaf(rng, 3, 4)
    check_op(lambda: ad.asum(ad.mul(ad.add(a, b), ad.sub(a, ad.neg(b)))), [a, b])


def test_broadcast_add_grads():
    rng = np.random.default_rng(1)
    a = leaf(rng, 5, 3)
    b = leaf(rng, 3)          # row broadcast, the bias case
    check_op(lambda: ad.asum(ad.mul(ad.add(a, b), ad.add(a, b))), [a, b])


def test_matmul_grads():
    rng = np.random.default_rng(2)
    a = leaf(rng, 4, 3)
    b = leaf(rng, 3, 5)
    check_op(lambda: ad.asum(ad.mul(ad.matmul(a, b), ad.matmul(a, b))), [a, b])


def test_matmul_identity():
    a = np.arange(9, dtype=np.float64).reshape(3, 3)
    out = ad.matmul(Tensor(np.eye(3)), Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_transpose_and_sum_axis_grads():
    rng = np.random.default_rng(3)
    a = leaf(rng, 4, 6)
    check_op(lambda: ad.asum(ad.mul(ad.asum(ad.transpose(a), axis=1),
                                    ad.asum(ad.transpose(a), axis=1))), [a])
    check_op(lambda: ad.asum(ad.mul(ad.asum(a, axis=0), ad.asum(a, axis=0))), [a])


def test_mean_grad_is_uniform():
    a = Tensor(np.ones((2, 5)), requires_grad=True, dtype="float64")
    grads = backward(ad.amean(a))
    np.testing.assert_allclose(grads[a], np.full((2, 5), 0.1))


def test_sigmoid_tanh_grads():
    rng = np.random.default_rng(4)
    a = leaf(rng, 3, 3, lo=-2.0, hi=2.0)
    check_op(lambda: ad.asum(ad.sigmoid(a)), [a])
    check_op(lambda: ad.asum(ad.tanh(a)), [a])


def test_sigmoid_extreme_inputs_stay_finite():
    a = Tensor(np.array([[-800.0, 800.0]]))
    out = ad.sigmoid(a)
    np.testing.assert_allclose(out.data, [[0.0, 1.0]], atol=1e-12)


def test_leaky_relu_values_and_grads():
    a = Tensor(np.array([[-1.0, 2.0]]), requires_grad=True, dtype="float64")
    out = ad.leaky_relu(a, slope=0.01)
    np.testing.assert_allclose(out.data, [[-0.01, 2.0]])
    grads = backward(ad.asum(out))
    np.testing.assert_allclose(grads[a], [[0.01, 1.0]])
    # away from the kink the FD check applies too
    rng = np.random.default_rng(5)
    b = Tensor(rng.uniform(0.5, 1.5, (3, 3)) * rng.choice([-1.0, 1.0], (3, 3)),
               requires_grad=True, dtype="float64")
    check_op(lambda: ad.asum(ad.mul(ad.leaky_relu(b), ad.leaky_relu(b))), [b])


def test_softmax_rows_uniform_on_zeros():
    out = ad.softmax_rows(Tensor(np.zeros((2, 3))))
    np.testing.assert_allclose(out.data, np.full((2, 3), 1.0 / 3.0))


def test_softmax_rows_grads_and_shift_invariance():
    rng = np.random.default_rng(6)
    a = leaf(rng, 4, 5, lo=-3.0, hi=3.0)
    w = Tensor(rng.uniform(-1, 1, (4, 5)))  # fixed weights make the loss non-trivial
    check_op(lambda: ad.asum(ad.mul(ad.softmax_rows(a), w)), [a])
    shifted = ad.softmax_rows(Tensor(a.data + 1000.0))
    np.testing.assert_allclose(shifted.data, ad.softmax_rows(a).data, atol=1e-12)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(7)
    for _ in range(20):
        x = rng.normal(size=(6, 8)) * rng.uniform(0.1, 50)
        s = ad.softmax_rows(Tensor(x)).data
        np.testing.assert_allclose(s.sum(axis=1), np.ones(6), atol=1e-12)
        assert (s >= 0).all()


def test_l2norm_rows_grads():
    rng = np.random.default_rng(8)
    a = leaf(rng, 4, 3)
    a.data += np.sign(a.data) * 0.2  # keep rows away from the origin
    check_op(lambda: ad.asum(ad.l2norm_rows(a)), [a])


def test_l2norm_zero_row_subgradient_is_zero():
    a = Tensor(np.zeros((1, 3)), requires_grad=True, dtype="float64")
    grads = backward(ad.asum(ad.l2norm_rows(a)))
    np.testing.assert_array_equal(grads[a], np.zeros((1, 3)))


def test_cosine_rows_known_values():
    a = Tensor(np.array([[1.0, 0.0], [3.0, 0.0]]))
    b = Tensor(np.array([[0.0, 1.0], [2.0, 0.0], [-1.0, 0.0]]))
    out = ad.cosine_rows(a, b)
    np.testing.assert_allclose(out.data, [[0.0, 1.0, -1.0], [0.0, 1.0, -1.0]], atol=1e-15)


def test_cosine_rows_zero_vector_maps_to_zero():
    a = Tensor(np.zeros((1, 3)))
    b = Tensor(np.array([[1.0, 2.0, 3.0]]))
    np.testing.assert_array_equal(ad.cosine_rows(a, b).data, [[0.0]])


def test_cosine_rows_grads():
    rng = np.random.default_rng(9)
    a = leaf(rng, 3, 4)
    b = leaf(rng, 5, 4)
    a.data += np.sign(a.data) * 0.3
    b.data += np.sign(b.data) * 0.3
    w = Tensor(rng.uniform(-1, 1, (3, 5)))
    check_op(lambda: ad.asum(ad.mul(ad.cosine_rows(a, b), w)), [a, b])


def test_cosine_rows_bounded():
    rng = np.random.default_rng(10)
    for _ in range(50):
        a = rng.normal(size=(4, 6)) * rng.uniform(0.01, 100)
        b = rng.normal(size=(7, 6)) * rng.uniform(0.01, 100)
        c = ad.cosine_rows(Tensor(a), Tensor(b)).data
        assert (np.abs(c) <= 1.0 + 1e-12).all()


def test_mse_value_and_grad():
    w = Tensor(np.array([[3.0]]), requires_grad=True, dtype="float64")
    loss = ad.mse(w, Tensor(np.array([[0.0]])))
    assert float(loss.data) == 9.0
    grads = backward(loss)
    np.testing.assert_allclose(grads[w], [[6.0]])


def test_mse_grads_fd():
    rng = np.random.default_rng(11)
    a = leaf(rng, 6, 1)
    b = Tensor(rng.uniform(-1, 1, (6, 1)))
    check_op(lambda: ad.mse(a, b), [a])


def test_gather_rows_scatter_adds():
    a = Tensor(np.array([[1.0], [2.0], [3.0]]), requires_grad=True, dtype="float64")
    picked = ad.gather_rows(a, np.array([0, 0, 2]))
    np.testing.assert_array_equal(picked.data, [[1.0], [1.0], [3.0]])
    grads = backward(ad.asum(picked))
    np.testing.assert_array_equal(grads[a], [[2.0], [0.0], [1.0]])


def test_concat_rows_grads():
    rng = np.random.default_rng(12)
    a = leaf(rng, 2, 3)
    b = leaf(rng, 4, 3)
    check_op(lambda: ad.asum(ad.mul(ad.concat_rows([a, b]), ad.concat_rows([a, b]))), [a, b])


def test_last_step_grads():
    rng = np.random.default_rng(13)
    a = leaf(rng, 3, 5, 4)
    check_op(lambda: ad.asum(ad.mul(ad.last_step(a), ad.last_step(a))), [a])


def test_gru_layer_grads_all_parameters():
    rng = np.random.default_rng(14)
    rows, steps, fin, d = 3, 4, 2, 3
    x = leaf(rng, rows, steps, fin)
    w_ih = leaf(rng, fin, 3 * d, lo=-0.5, hi=0.5)
    w_hh = leaf(rng, d, 3 * d, lo=-0.5, hi=0.5)
    b_ih = leaf(rng, 3 * d, lo=-0.1, hi=0.1)
    b_hh = leaf(rng, 3 * d, lo=-0.1, hi=0.1)
    w = Tensor(rng.uniform(-1, 1, (rows, steps, d)))

    def build():
        return ad.asum(ad.mul(ad.gru_layer(x, w_ih, w_hh, b_ih, b_hh), w))

    check_op(build, [x, w_ih, w_hh, b_ih, b_hh], rtol=1e-5)


def test_gru_layer_zero_weights_zero_output():
    x = Tensor(np.ones((2, 3, 4)))
    z = lambda *s: Tensor(np.zeros(s))
    out = ad.gru_layer(x, z(4, 9), z(3, 9), z(9), z(9))
    # all gates at 0.5, candidate tanh(0) = 0, so h stays at 0 forever
    np.testing.assert_array_equal(out.data, np.zeros((2, 3, 3)))


def test_gru_layer_matches_manual_recurrence():
    """Step-by-step recurrence in plain numpy, the layer must agree exactly."""
    rng = np.random.default_rng(15)
    rows, steps, fin, d = 2, 5, 3, 4
    x = rng.uniform(-1, 1, (rows, steps, fin))
    w_ih = rng.uniform(-0.5, 0.5, (fin, 3 * d))
    w_hh = rng.uniform(-0.5, 0.5, (d, 3 * d))
    b_ih = rng.uniform(-0.1, 0.1, 3 * d)
    b_hh = rng.uniform(-0.1, 0.1, 3 * d)

    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    h = np.zeros((rows, d))
    expect = np.zeros((rows, steps, d))
    for t in range(steps):
        pi = x[:, t, :] @ w_ih + b_ih
        ph = h @ w_hh + b_hh
        r = sig(pi[:, :d] + ph[:, :d])
        z = sig(pi[:, d:2 * d] + ph[:, d:2 * d])
        n = np.tanh(pi[:, 2 * d:] + r * ph[:, 2 * d:])
        h = (1.0 - z) * n + z * h
        expect[:, t, :] = h

    out = ad.gru_layer(Tensor(x), Tensor(w_ih), Tensor(w_hh), Tensor(b_ih), Tensor(b_hh))
    np.testing.assert_allclose(out.data, expect, atol=1e-14)


def test_gru_layer_two_losses_same_node():
    """Backward through two different losses sharing one gru node must not mix caches."""
    rng = np.random.default_rng(16)
    x = leaf(rng, 2, 3, 2)
    w_ih = leaf(rng, 2, 6, lo=-0.5, hi=0.5)
    w_hh = leaf(rng, 2, 6, lo=-0.5, hi=0.5)
    b_ih = leaf(rng, 6, lo=-0.1, hi=0.1)
    b_hh = leaf(rng, 6, lo=-0.1, hi=0.1)
    out = ad.gru_layer(x, w_ih, w_hh, b_ih, b_hh)
    g1 = backward(ad.asum(out))
    w = Tensor(rng.uniform(1.0, 2.0, out.data.shape))
    g2 = backward(ad.asum(ad.mul(out, w)))
    assert not np.allclose(g1[w_ih], g2[w_ih])
    g1_again = backward(ad.asum(out))
    np.testing.assert_array_equal(g1[w_ih], g1_again[w_ih])


# ------------------------------------------------------------------- engine


def test_repeated_backward_identical():
    rng = np.random.default_rng(17)
    a = leaf(rng, 3, 3)
    loss = ad.mse(ad.tanh(ad.matmul(a, ad.transpose(a))), Tensor(np.zeros((3, 3))))
    first = backward(loss)[a].copy()
    second = backward(loss)[a]
    np.testing.assert_array_equal(first, second)


def test_grad_accumulates_across_shared_subexpression():
    a = Tensor(np.array([[2.0]]), requires_grad=True, dtype="float64")
    b = ad.mul(a, a)                     # a^2
    loss = ad.asum(ad.add(b, b))         # 2 a^2, d/da = 4a = 8
    np.testing.assert_allclose(backward(loss)[a], [[8.0]])


def test_backward_rejects_non_scalar():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(ad.add(a, a))


def test_shape_error_reports_op_and_shapes():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((2, 3)))
    with pytest.raises(ShapeError) as exc:
        ad.matmul(a, b)
    assert "matmul" in str(exc.value)
    assert "(2, 3)" in str(exc.value)


def test_non_finite_raises_numeric_error():
    a = Tensor(np.array([[1e308]]))
    with np.errstate(over="ignore"), pytest.raises(NumericError):
        ad.mul(a, a)


def test_dtype_validation():
    with pytest.raises(ValueError):
        Tensor(np.ones(3), dtype="float16")


def test_leaf_grad_attribute_set():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True, dtype="float64")
    backward(ad.asum(ad.mul(a, a)))
    np.testing.assert_allclose(a.grad, [2.0, 4.0])
