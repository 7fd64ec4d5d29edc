import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from dfmed.numerics import (
    DimensionError,
    FeedForward,
    GRUCell,
    LayerNorm,
    ParamStore,
    Tensor,
    TransformerLayer,
    default_dtype,
    functional as F,
    grad_check,
    no_grad,
    scaled_dot_attention,
)

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def param(store, name, shape, seed=0):
    return store.add(name, np.random.default_rng(seed).normal(size=shape))


# -- forward values -------------------------------------------------------------

def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_allclose((a @ Tensor(np.eye(2))).data, [[1, 2], [3, 4]])


def test_matmul_shape_error_names_op_and_shapes():
    with pytest.raises(DimensionError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        F.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_concat_shape_error():
    with pytest.raises(DimensionError, match="concat"):
        F.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=-1)


def test_sigmoid_zero():
    assert F.sigmoid(Tensor(0.0)).item() == pytest.approx(0.5)


def test_mean_value_and_gradient():
    x = Tensor(np.array([1.0, 2.0, 3.0, 6.0]), requires_grad=True)
    m = F.mean(x)
    assert m.item() == pytest.approx(3.0)
    m.backward()
    np.testing.assert_allclose(x.grad, 0.25)


@pytest.mark.parametrize("logits,expected", [
    ([0.0, 0.0, 0.0], [1 / 3, 1 / 3, 1 / 3]),
    ([1000.0, 0.0], [1.0, 0.0]),
    ([math.log(2.0), 0.0], [2 / 3, 1 / 3]),
])
def test_softmax_examples(logits, expected):
    p = F.softmax(Tensor(np.array(logits)), axis=-1).data
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p, expected, atol=1e-6)


def test_masked_softmax_row_without_keys_is_zero():
    p = F.softmax(Tensor(np.ones((2, 3))), axis=-1, mask=np.array([[True, False, True], [False] * 3]))
    np.testing.assert_allclose(p.data, [[0.5, 0, 0.5], [0, 0, 0]])


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6), elements=finite),
       st.floats(-50, 50))
def test_softmax_normalized_and_shift_invariant(x, c):
    with default_dtype(np.float64):
        p = F.softmax(Tensor(x), axis=-1).data
        q = F.softmax(Tensor(x + c), axis=-1).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(p, q, atol=1e-6)


# -- attention --------------------------------------------------------------------

def test_attention_single_key_returns_value():
    rng = np.random.default_rng(1)
    V = rng.normal(size=(1, 5))
    out = scaled_dot_attention(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(1, 4))), Tensor(V))
    np.testing.assert_allclose(out.data, np.repeat(V, 3, 0), atol=1e-6)


def test_attention_identical_keys_average_values():
    K = Tensor(np.ones((2, 4)))
    V = np.array([[1.0, 0.0], [3.0, 2.0]])
    out = scaled_dot_attention(Tensor(np.ones((1, 4))), K, Tensor(V))
    np.testing.assert_allclose(out.data, [[2.0, 1.0]], atol=1e-6)


def test_attention_orthogonal_query_is_uniform():
    Q = Tensor(np.array([[1.0, 0.0, 0.0]]))
    K = Tensor(np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 5.0], [0.0, -2.0, 1.0]]))
    V = np.random.default_rng(0).normal(size=(3, 2))
    out = scaled_dot_attention(Q, K, Tensor(V))
    np.testing.assert_allclose(out.data, V.mean(axis=0, keepdims=True), atol=1e-6)


def test_attention_empty_keys_gives_zeros():
    out = scaled_dot_attention(Tensor(np.ones((2, 4))), Tensor(np.zeros((0, 4))), Tensor(np.zeros((0, 3))))
    assert out.shape == (2, 3) and not out.data.any()


def test_attention_multi_head_dim_check():
    with pytest.raises(DimensionError):
        scaled_dot_attention(Tensor(np.ones((1, 6))), Tensor(np.ones((2, 6))), Tensor(np.ones((2, 6))), n_heads=4)


# -- GRU, feed-forward -------------------------------------------------------------

def _zero(store):
    for p in store.values():
        p.data[...] = 0.0


def test_gru_zero_weights_halves_state():
    ps = ParamStore()
    cell = GRUCell(ps, "g", 3, 2)
    _zero(ps)
    h = np.array([[0.8, -0.4]])
    np.testing.assert_allclose(cell(Tensor(np.ones((1, 3))), Tensor(h)).data, 0.5 * h, atol=1e-7)
    assert not cell(Tensor(np.ones((1, 3))), Tensor(np.zeros((1, 2)))).data.any()


def test_gru_dim_mismatch():
    cell = GRUCell(ParamStore(), "g", 3, 2)
    with pytest.raises(DimensionError, match="gru_cell"):
        cell(Tensor(np.ones((1, 4))), Tensor(np.zeros((1, 2))))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), hnp.arrays(np.float64, (2, 4), elements=st.floats(-3, 3)))
def test_gru_output_bounded_by_state_or_one(seed, h):
    with default_dtype(np.float64):
        ps = ParamStore(np.random.default_rng(seed))
        cell = GRUCell(ps, "g", 5, 4)
        x = np.random.default_rng(seed + 1).normal(size=(2, 5)) * 3
        out = cell(Tensor(x), Tensor(h)).data
    assert np.all(np.abs(out) <= np.maximum(np.abs(h), 1.0) + 1e-12)


def test_feed_forward_zero_weights_give_second_bias():
    ps = ParamStore()
    ff = FeedForward(ps, "ff", 2)
    _zero(ps)
    ff.lin2.b.data[:] = [0.3, -0.7]
    np.testing.assert_allclose(ff(Tensor(np.ones((3, 2)))).data, [[0.3, -0.7]] * 3, atol=1e-7)


def test_feed_forward_hand_computed_at_d2():
    ps = ParamStore()
    ff = FeedForward(ps, "ff", 2, hidden=2)
    _zero(ps)
    ff.lin1.W.data[:] = np.eye(2)
    ff.lin2.W.data[:] = np.eye(2)
    np.testing.assert_allclose(ff(Tensor(np.array([[1.5, -2.0]]))).data, [[1.5, 0.0]], atol=1e-7)


# -- gradient checks ----------------------------------------------------------------

def test_grad_check_square_sum(f64):
    ps = ParamStore()
    x = ps.add("x", np.array([1.0, 2.0]))
    err = grad_check(lambda: (x * x).sum(), ps)
    assert err < 1e-8
    ps.zero_grad()
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_grad_check_rejects_non_finite(f64):
    ps = ParamStore()
    x = ps.add("x", np.array([0.0]))
    with pytest.raises(FloatingPointError), np.errstate(divide="ignore"):
        grad_check(lambda: F.log(x).sum(), ps)


UNARY = {
    "sigmoid": F.sigmoid, "tanh": F.tanh, "exp": F.exp, "elu": F.elu,
    "leaky_relu": lambda a: F.leaky_relu(a, 0.2), "relu": F.relu,
    "log": lambda a: F.log(F.exp(a) + 1.0), "power": lambda a: F.power(F.exp(a), 1.5),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, f64):
    ps = ParamStore()
    # keep clear of the kinks of relu-type ops
    x = ps.add("x", np.array([[0.7, -1.3, 0.4], [-0.2, 1.1, -0.6]]))
    w = np.arange(6.0).reshape(2, 3) - 2.5
    assert grad_check(lambda: (UNARY[name](x) * Tensor(w)).sum(), ps) < 1e-4


def test_binary_and_structural_gradients(f64):
    ps = ParamStore()
    a = param(ps, "a", (2, 3, 4), 0)
    b = param(ps, "b", (4, 5), 1)
    c = param(ps, "c", (3, 1), 2)
    d = ps.add("d", np.abs(np.random.default_rng(3).normal(size=(3, 4))) + 0.5)

    def f():
        y = F.matmul(a, b)                                   # N-D @ 2-D
        y = F.concat([y, F.broadcast_to(c, (2, 3, 1))], axis=-1)
        y = F.swapaxes(y, 0, 1).reshape(3, -1)
        z = (a / d - c) * a[1]
        s = F.stack([z.sum(axis=0), F.max(a, axis=0)], axis=0)
        return F.mean(y * y) + s.sum() + F.expand_dims(F.where(a.data[0] > 0, a[0], d), 0).sum()

    assert grad_check(f, ps) < 1e-4


def test_batched_matmul_gradient(f64):
    ps = ParamStore()
    a = param(ps, "a", (2, 3, 4), 0)
    b = param(ps, "b", (2, 4, 2), 1)
    assert grad_check(lambda: (F.matmul(a, b) ** 2).sum(), ps) < 1e-4


def test_indexing_gradients(f64):
    ps = ParamStore()
    a = param(ps, "a", (5, 3), 0)
    idx = np.array([[0, 4], [4, 2], [1, 1]])
    w = np.random.default_rng(9).normal(size=(3, 2, 3))
    assert grad_check(lambda: (F.take_rows(a, idx) * Tensor(w)).sum() + (a[np.array([0, 0, 3])] ** 2).sum(), ps) < 1e-4


def test_segment_ops_values_and_gradients(f64):
    ps = ParamStore()
    a = param(ps, "a", (6, 2), 0)
    seg = np.array([0, 0, 2, 2, 2, 3])
    out = F.segment_softmax(a, seg, 5).data
    for s in (0, 2, 3):
        np.testing.assert_allclose(out[seg == s].sum(axis=0), 1.0)
    sums = F.segment_sum(a, seg, 5).data
    np.testing.assert_allclose(sums[1], 0.0)
    np.testing.assert_allclose(sums[2], a.data[2:5].sum(axis=0))
    w = np.random.default_rng(4).normal(size=(6, 2))
    assert grad_check(lambda: (F.segment_softmax(a, seg, 5) * Tensor(w)).sum()
                      + (F.segment_sum(a * a, seg, 5) * Tensor(w[:5])).sum(), ps) < 1e-4


def test_softmax_family_and_layer_norm_gradients(f64):
    ps = ParamStore()
    x = param(ps, "x", (3, 5), 0)
    ln = LayerNorm(ps, "ln", 5)
    ln.gamma.data += 0.3
    mask = np.array([[1, 1, 0, 1, 1], [1, 0, 0, 0, 0], [1] * 5], dtype=bool)
    w = np.random.default_rng(5).normal(size=(3, 5))

    def f():
        return ((F.softmax(x, mask=mask) * Tensor(w)).sum() + (F.log_softmax(x, mask=mask) * Tensor(w)).sum()
                + (ln(x) * Tensor(w)).sum())

    assert grad_check(f, ps) < 1e-4


def test_loss_gradients(f64):
    ps = ParamStore()
    z = param(ps, "z", (2, 3, 6), 0)
    y = np.array([[0, 5, 2], [1, 1, 3]])
    m = np.array([[1, 1, 0], [1, 1, 1]], dtype=bool)
    lab = (np.random.default_rng(1).random((2, 3, 6)) > 0.5).astype(float)
    assert grad_check(lambda: F.cross_entropy(z, y, m) + F.bce_with_logits(z, lab).mean(), ps) < 1e-4


def test_bce_at_half_is_ln2():
    loss = F.bce_with_logits(Tensor(np.zeros((4, 7))), np.eye(4, 7)).data
    np.testing.assert_allclose(loss, math.log(2.0), atol=1e-6)


def test_gru_gradient_wrt_input(f64):
    ps = ParamStore(np.random.default_rng(2))
    cell = GRUCell(ps, "g", 4, 3)
    x = param(ps, "x", (2, 4), 7)
    h = param(ps, "h", (2, 3), 8)
    assert grad_check(lambda: (cell(x, h) ** 2).sum(), ps) < 1e-4


def test_feed_forward_and_attention_block_gradients(f64):
    ps = ParamStore(np.random.default_rng(3))
    ff = FeedForward(ps, "ff", 4)
    layer = TransformerLayer(ps, "tl", 4, 2)
    x = param(ps, "x", (2, 3, 4), 1)
    causal = np.tril(np.ones((3, 3), dtype=bool))
    assert grad_check(lambda: (layer(ff(x), causal) ** 2).sum(), ps) < 1e-4


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad


def test_param_store_rejects_duplicates_and_bad_shapes():
    ps = ParamStore()
    ps.zeros("w", (2,))
    with pytest.raises(KeyError):
        ps.zeros("w", (2,))
    with pytest.raises(DimensionError):
        ps.load_state_dict({"w": np.zeros(3)})
    assert list(ps) == ["w"] and all(p.requires_grad for p in ps.values())
