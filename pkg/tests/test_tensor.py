import math

import numpy as np
import pytest

from linerec import Tensor, backward, no_grad
from linerec import tensor as T
from linerec.errors import ContractError, NumericError, ShapeError

from oracles import central_diff, max_rel_error, pick_coords

GRAD_TOL = 1e-4


def t64(data, requires_grad=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


def test_matmul_identity():
    a = t64([[1.0, 2.0], [3.0, 4.0]])
    eye = t64(np.eye(2))
    out = T.matmul(eye, a)
    np.testing.assert_array_equal(out.data, a.data)


def test_matmul_hand_case():
    a = t64([[1.0, 2.0]])
    b = t64([[3.0], [4.0]])
    assert T.matmul(a, b).data[0, 0] == 11.0


def test_matmul_shape_error_names_both_shapes():
    a = t64(np.zeros((2, 3)))
    b = t64(np.zeros((2, 3)))
    with pytest.raises(ShapeError, match=r"\(2, 3\)"):
        T.matmul(a, b)


def test_matmul_gradient_against_finite_differences():
    rng = np.random.default_rng(7)
    A = Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)
    B = Tensor(rng.normal(size=(4, 2)), requires_grad=True, dtype=np.float64)
    backward(T.tensor_sum(T.matmul(A, B)))

    # grad of sum(AB) wrt A is B summed over columns, broadcast over rows
    expected_A = np.tile(B.data.sum(axis=1), (3, 1))
    np.testing.assert_allclose(A.grad, expected_A, rtol=1e-12)

    def f(a):
        with no_grad():
            return float((a @ B.data).sum())

    fd = central_diff(f, A.data.copy(), pick_coords(rng, A.size, 12))
    assert max_rel_error(A.grad, fd) < GRAD_TOL


@pytest.mark.parametrize("x,expected", [
    ([0.0, 0.0, 0.0], [1 / 3, 1 / 3, 1 / 3]),
    ([1000.0, 0.0], [1.0, 0.0]),
])
def test_softmax_special_cases(x, expected):
    out = T.softmax(t64(x), axis=-1)
    np.testing.assert_allclose(out.data, expected, atol=1e-12)
    assert np.isfinite(out.data).all()


def test_softmax_matches_brute_force():
    x = np.array([1.0, 2.0, 3.0])
    e = np.exp(x)
    np.testing.assert_allclose(T.softmax(t64(x)).data, e / e.sum(), atol=1e-6)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    x = Tensor(rng.uniform(-1e4, 1e4, size=(20, 9)), dtype=np.float64)
    out = T.softmax(x, axis=-1)
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)


def test_softmax_rejects_nan():
    with pytest.raises(NumericError):
        T.softmax(t64([1.0, math.nan]))


def test_softmax_all_neg_inf_row_gives_zeros():
    out = T.softmax(t64([-math.inf, -math.inf]))
    np.testing.assert_array_equal(out.data, [0.0, 0.0])


def test_layer_norm_constant_slice_is_zero():
    x = t64([5.0, 5.0, 5.0])
    out = T.layer_norm(x, t64([1.0] * 3), t64([0.0] * 3))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_layer_norm_standardizes():
    out = T.layer_norm(t64([1.0, 2.0, 3.0]), t64([1.0] * 3), t64([0.0] * 3))
    assert abs(out.data.mean()) < 1e-6
    assert abs(out.data.var() - 1.0) < 1e-5


def test_layer_norm_gradient():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(4, 6)), requires_grad=True, dtype=np.float64)
    gain = Tensor(rng.normal(size=6), requires_grad=True, dtype=np.float64)
    bias = Tensor(rng.normal(size=6), requires_grad=True, dtype=np.float64)
    w = rng.normal(size=(4, 6))  # weighting makes the scalar non-trivial
    loss = T.tensor_sum(T.mul(T.layer_norm(x, gain, bias), Tensor(w, dtype=np.float64)))
    backward(loss)

    for leaf in (x, gain, bias):
        def f(v, leaf=leaf):
            saved = leaf.data
            leaf.data = v
            try:
                out = T.mul(T.layer_norm(x, gain, bias), Tensor(w, dtype=np.float64))
                return float(out.data.sum())
            finally:
                leaf.data = saved
        fd = central_diff(f, leaf.data.copy(), pick_coords(rng, leaf.size, 10))
        assert max_rel_error(leaf.grad, fd) < GRAD_TOL


@pytest.mark.parametrize("x,expected", [
    ([math.log(2), math.log(3)], math.log(5)),
    ([-math.inf, 1.5], 1.5),
    ([0.0, 0.0, 0.0, 0.0], math.log(4)),
])
def test_log_sum_exp_values(x, expected):
    out = T.log_sum_exp(t64(x), axis=-1)
    assert abs(out.item() - expected) < 1e-9


def test_log_sum_exp_all_neg_inf():
    out = T.log_sum_exp(t64([-math.inf, -math.inf]))
    assert out.item() == -math.inf
    assert not np.isnan(out.data).any()


def test_backward_sum_gives_ones():
    x = t64([[1.0, -2.0], [0.5, 3.0]])
    x.requires_grad = True
    backward(T.tensor_sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 2)))


def test_backward_square_gives_2x():
    x = t64([1.0, -2.0, 0.5])
    x.requires_grad = True
    backward(T.tensor_sum(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-12)


def test_backward_requires_scalar():
    x = t64([1.0, 2.0])
    x.requires_grad = True
    y = T.scale(x, 2.0)
    with pytest.raises(ContractError):
        backward(y)


def test_shared_subexpression_grads_add():
    x = t64([1.0, 2.0])
    x.requires_grad = True
    y = T.scale(x, 3.0)
    z = T.add(T.tensor_sum(y), T.tensor_sum(T.mul(x, x)))
    backward(z)
    np.testing.assert_allclose(x.grad, 3.0 + 2 * x.data, rtol=1e-12)


def test_tape_cleared_after_backward():
    x = t64([1.0])
    x.requires_grad = True
    backward(T.tensor_sum(T.exp(x)))
    assert len(T.active_tape()) == 0


def test_composite_attention_like_graph_gradient():
    # linear -> softmax-weighted mix -> layer norm -> linear, checked at
    # random coordinates against central differences.
    rng = np.random.default_rng(11)
    d = 5
    x = Tensor(rng.normal(size=(4, d)), requires_grad=True, dtype=np.float64)
    w1 = Tensor(rng.normal(size=(d, d)), requires_grad=True, dtype=np.float64)
    gain = Tensor(np.ones(d), requires_grad=True, dtype=np.float64)
    bias = Tensor(np.zeros(d), requires_grad=True, dtype=np.float64)
    w2 = Tensor(rng.normal(size=(d, 3)), requires_grad=True, dtype=np.float64)

    def forward():
        h = T.matmul(x, w1)
        att = T.softmax(T.matmul(h, T.transpose(h)), axis=-1)
        mixed = T.matmul(att, h)
        normed = T.layer_norm(mixed, gain, bias)
        return T.tensor_sum(T.gelu(T.matmul(normed, w2)))

    backward(forward())
    leaves = {"x": x, "w1": w1, "gain": gain, "bias": bias, "w2": w2}
    for name, leaf in leaves.items():
        def f(v, leaf=leaf):
            saved = leaf.data
            leaf.data = v
            try:
                return forward().item()
            finally:
                leaf.data = saved
        fd = central_diff(f, leaf.data.copy(), pick_coords(rng, leaf.size, 5))
        assert max_rel_error(leaf.grad, fd) < 1e-3, name


@pytest.mark.parametrize("op", ["add", "sub", "mul"])
def test_broadcast_elementwise_gradients(op):
    rng = np.random.default_rng(5)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)
    b = Tensor(rng.normal(size=(4,)), requires_grad=True, dtype=np.float64)
    fn = getattr(T, op)
    backward(T.tensor_sum(T.mul(fn(a, b), fn(a, b))))
    for leaf in (a, b):
        def f(v, leaf=leaf):
            saved = leaf.data
            leaf.data = v
            try:
                out = fn(a, b)
                return float((out.data * out.data).sum())
            finally:
                leaf.data = saved
        fd = central_diff(f, leaf.data.copy(), pick_coords(rng, leaf.size, 8))
        assert max_rel_error(leaf.grad, fd) < GRAD_TOL


@pytest.mark.parametrize("prim", ["exp", "log", "gelu"])
def test_unary_primitive_gradients(prim):
    rng = np.random.default_rng(13)
    raw = rng.uniform(0.2, 2.0, size=7) if prim == "log" else rng.normal(size=7)
    x = Tensor(raw, requires_grad=True, dtype=np.float64)
    fn = getattr(T, prim)
    backward(T.tensor_sum(fn(x)))

    def f(v):
        saved = x.data
        x.data = v
        try:
            return float(fn(x).data.sum())
        finally:
            x.data = saved

    fd = central_diff(f, x.data.copy(), list(range(7)))
    assert max_rel_error(x.grad, fd) < GRAD_TOL


def test_log_sum_exp_gradient():
    rng = np.random.default_rng(17)
    x = Tensor(rng.normal(size=(3, 5)), requires_grad=True, dtype=np.float64)
    backward(T.tensor_sum(T.log_sum_exp(x, axis=-1)))

    def f(v):
        saved = x.data
        x.data = v
        try:
            return float(T.log_sum_exp(x, axis=-1).data.sum())
        finally:
            x.data = saved

    fd = central_diff(f, x.data.copy(), pick_coords(rng, x.size, 10))
    assert max_rel_error(x.grad, fd) < GRAD_TOL


def test_softmax_gradient():
    rng = np.random.default_rng(19)
    x = Tensor(rng.normal(size=(2, 6)), requires_grad=True, dtype=np.float64)
    w = rng.normal(size=(2, 6))
    backward(T.tensor_sum(T.mul(T.softmax(x, axis=-1), Tensor(w, dtype=np.float64))))

    def f(v):
        saved = x.data
        x.data = v
        try:
            return float((T.softmax(x, axis=-1).data * w).sum())
        finally:
            x.data = saved

    fd = central_diff(f, x.data.copy(), pick_coords(rng, x.size, 10))
    assert max_rel_error(x.grad, fd) < GRAD_TOL


def test_embedding_gather_and_scatter_grad():
    table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True, dtype=np.float64)
    out = T.embedding(table, [2, 0, 2])
    np.testing.assert_array_equal(out.data, table.data[[2, 0, 2]])
    backward(T.tensor_sum(out))
    np.testing.assert_array_equal(table.grad, [[1, 1, 1], [0, 0, 0], [2, 2, 2], [0, 0, 0]])


def test_embedding_rejects_bad_ids():
    table = t64(np.zeros((4, 3)))
    with pytest.raises(ContractError):
        T.embedding(table, [4])


def test_select_index_grad():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True, dtype=np.float64)
    out = T.select_index(x, [2, 0])
    np.testing.assert_array_equal(out.data, [2.0, 3.0])
    backward(T.tensor_sum(out))
    np.testing.assert_array_equal(x.grad, [[0, 0, 1], [1, 0, 0]])


def test_masked_fill_blocks_gradient():
    x = Tensor(np.ones((2, 2)), requires_grad=True, dtype=np.float64)
    mask = np.array([[True, False], [False, False]])
    out = T.masked_fill(x, mask, -np.inf)
    assert out.data[0, 0] == -np.inf
    backward(T.tensor_sum(T.mul(T.softmax(out, axis=-1), x)))
    assert x.grad is not None


def test_concat_and_narrow_roundtrip_grads():
    a = Tensor(np.ones((2, 2)), requires_grad=True, dtype=np.float64)
    b = Tensor(np.full((2, 3), 2.0), requires_grad=True, dtype=np.float64)
    cat = T.concat([a, b], axis=1)
    assert cat.shape == (2, 5)
    piece = T.narrow(cat, 1, 1, 3)
    backward(T.tensor_sum(piece))
    np.testing.assert_array_equal(a.grad, [[0, 1], [0, 1]])
    np.testing.assert_array_equal(b.grad, [[1, 1, 0], [1, 1, 0]])


def test_reshape_transpose_grads():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True, dtype=np.float64)
    y = T.transpose(T.reshape(x, (3, 2)))
    w = Tensor(np.arange(6.0).reshape(2, 3), dtype=np.float64)
    backward(T.tensor_sum(T.mul(y, w)))
    np.testing.assert_array_equal(x.grad, w.data.T.reshape(2, 3))


def test_dropout_determinism_and_eval_identity():
    x = Tensor(np.ones((8, 8)), requires_grad=True, dtype=np.float64)
    a = T.dropout(x, 0.5, np.random.default_rng(42), training=True)
    b = T.dropout(x, 0.5, np.random.default_rng(42), training=True)
    np.testing.assert_array_equal(a.data, b.data)
    assert set(np.unique(a.data)) <= {0.0, 2.0}
    c = T.dropout(x, 0.5, np.random.default_rng(42), training=False)
    assert c is x


def test_dropout_gradient_uses_mask():
    x = Tensor(np.ones(16), requires_grad=True, dtype=np.float64)
    out = T.dropout(x, 0.25, np.random.default_rng(1), training=True)
    backward(T.tensor_sum(out))
    np.testing.assert_array_equal(x.grad, out.data)  # mask * 1/(1-p)


def test_no_grad_suppresses_recording():
    x = t64([1.0, 2.0])
    x.requires_grad = True
    with no_grad():
        y = T.scale(x, 2.0)
    assert len(T.active_tape()) == 0
    assert not np.isnan(y.data).any()


def test_mixed_dtype_rejected():
    a = Tensor(np.zeros(2), dtype=np.float32)
    b = Tensor(np.zeros(2), dtype=np.float64)
    with pytest.raises(ShapeError):
        T.add(a, b)
