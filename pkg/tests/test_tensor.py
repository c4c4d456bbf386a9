import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opamp import tensor as T
from opamp.gradcheck import check_gradients, numerical_gradient, relative_error
from opamp.tensor import DegenerateRowError, GraphError, ShapeError, Tape, Tensor


def leaf(arr, dtype=np.float64):
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


def triple_loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


# -- matmul -----------------------------------------------------------------


def test_matmul_identity_and_zero():
    a = np.random.default_rng(0).normal(size=(3, 3))
    assert np.array_equal(T.matmul(Tensor(a), Tensor(np.eye(3))).data, a)
    assert np.array_equal(T.matmul(Tensor(a), Tensor(np.zeros((3, 2)))).data, np.zeros((3, 2)))


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, triple_loop_matmul(a, b), atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 16), st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**31 - 1))
def test_matmul_random_shapes_both_precisions(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
    ref = triple_loop_matmul(a, b)
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, ref, atol=1e-12, rtol=0)
    a32, b32 = a.astype(np.float32), b.astype(np.float32)
    np.testing.assert_allclose(
        T.matmul(Tensor(a32), Tensor(b32)).data, triple_loop_matmul(a32.astype(np.float64), b32.astype(np.float64)),
        atol=1e-6 * max(1, k), rtol=1e-5,
    )


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


# -- softmax ----------------------------------------------------------------


def test_softmax_constant_row_and_singleton():
    out = T.softmax_rows(Tensor(np.full((1, 3), 7.0))).data
    np.testing.assert_allclose(out, [[1 / 3] * 3], atol=1e-15)
    assert T.softmax_rows(Tensor([[4.2]])).data[0, 0] == 1.0


def test_softmax_direct_evaluation():
    x = np.array([1.0, 2.0, 3.0])
    expected = [math.exp(v - 3) / sum(math.exp(u - 3) for u in x) for v in x]
    np.testing.assert_allclose(T.softmax_rows(Tensor(x[None])).data[0], expected, atol=1e-9)


def test_softmax_mask_zeroes_entries_and_degenerate_row_raises():
    mask = np.tril(np.ones((3, 3), dtype=bool))
    out = T.softmax_rows(Tensor(np.random.default_rng(0).normal(size=(3, 3))), mask).data
    assert np.all(out[~mask] == 0.0)
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-12)
    with pytest.raises(DegenerateRowError):
        T.softmax_rows(Tensor(np.zeros((2, 2))), np.array([[True, False], [False, False]]))


def test_softmax_large_logits_stay_finite():
    out = T.softmax_rows(Tensor(np.array([[1e4, 1e4 - 1, -1e4]]))).data
    assert np.all(np.isfinite(out))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31 - 1), st.floats(0.1, 50))
def test_softmax_rows_are_distributions(m, n, seed, spread):
    x = np.random.default_rng(seed).normal(scale=spread, size=(m, n))
    out = T.softmax_rows(Tensor(x)).data
    assert out.min() >= 0 and out.max() <= 1
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)


# -- elementwise ------------------------------------------------------------


def test_gelu_at_origin_and_known_value():
    assert T.gelu(Tensor([0.0])).data[0] == 0.0
    # x * Phi(x) at x = 1
    np.testing.assert_allclose(T.gelu(Tensor([1.0])).data[0], 0.5 * (1 + math.erf(1 / math.sqrt(2))), rtol=1e-12)


def test_cross_entropy_uniform_logits_is_log_vocab():
    v = 17
    loss = T.cross_entropy(Tensor(np.zeros((1, v))), np.array([5]))
    assert loss.data == pytest.approx(math.log(v), abs=1e-12)


def test_cross_entropy_rejects_empty_mask():
    with pytest.raises(ValueError, match="no positions"):
        T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 1]), np.array([False, False]))


def test_layer_norm_statistics():
    x = np.random.default_rng(3).normal(loc=5, scale=3, size=(6, 32))
    out = T.layer_norm(Tensor(x), Tensor(np.ones(32)), Tensor(np.zeros(32))).data
    np.testing.assert_allclose(out.mean(-1), 0.0, atol=1e-5)
    np.testing.assert_allclose(out.var(-1), 1.0, atol=1e-5)


def test_shape_mismatches_raise():
    a, b = Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2)))
    for op in (T.add, T.sub, T.mul):
        with pytest.raises(ShapeError):
            op(a, b)
    with pytest.raises(ShapeError):
        T.add_bias(a, Tensor(np.zeros(2)))


def test_precision_is_preserved():
    a = Tensor(np.ones((2, 2), np.float32), requires_grad=True)
    out = T.sum_all(T.gelu(T.layer_norm(T.matmul(a, a), Tensor(np.ones(2, np.float32)), Tensor(np.zeros(2, np.float32)))))
    assert out.dtype == np.float32
    T.backward(out)
    assert a.grad.dtype == np.float32


# -- backward ---------------------------------------------------------------


def test_sum_of_squares_gradient():
    x = leaf([1.0, -2.0, 0.5])
    T.backward(T.sum_all(T.mul(x, x)))
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_independent_leaf_gets_zero_gradient():
    x, y = leaf([1.0, 2.0]), leaf([3.0, 4.0])
    T.backward(T.sum_all(T.mul(x, x)), inputs=[x, y])
    np.testing.assert_array_equal(y.grad, [0.0, 0.0])
    # participating with zero derivative
    z = leaf([5.0, 6.0])
    T.backward(T.sum_all(T.add(x, T.scale(z, 0.0))))
    np.testing.assert_array_equal(z.grad, [0.0, 0.0])


def test_backward_accumulates_across_calls():
    x = leaf([1.0, 2.0])
    T.backward(T.sum_all(T.mul(x, x)))
    T.backward(T.sum_all(T.mul(x, x)))
    np.testing.assert_array_equal(x.grad, 4 * x.data)


def test_backward_errors():
    x = leaf([1.0, 2.0])
    with pytest.raises(GraphError, match="scalar"):
        T.backward(T.mul(x, x))
    with pytest.raises(GraphError, match="tape"):
        T.backward(T.sum_all(Tensor([1.0, 2.0])))


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad and y.is_leaf


def test_tape_is_topological_and_visits_once():
    x = leaf(np.ones((2, 2)))
    h = T.matmul(x, x)
    loss = T.sum_all(T.add(h, h))  # h is reused
    tape = Tape.from_output(loss)
    assert tape.is_topological()
    assert len({id(n) for n in tape.nodes}) == len(tape.nodes) == 4
    T.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * (np.ones((2, 2)) @ np.ones((2, 2)) * 2))


def _two_layer_net(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(5, 4)))
    # fan-in scaled, as at initialisation
    w1, b1 = leaf(rng.normal(size=(4, 6)) / 2), leaf(rng.normal(size=6) / 2)
    w2 = leaf(rng.normal(size=(6, 3)) / np.sqrt(6))
    gamma, beta = leaf(rng.normal(size=3) + 1), leaf(rng.normal(size=3))
    targets = rng.integers(0, 3, size=5)
    for name, t in zip(("w1", "b1", "w2", "gamma", "beta"), (w1, b1, w2, gamma, beta)):
        t.name = name

    def f():
        h = T.gelu(T.add_bias(T.matmul(x, w1), b1))
        return T.cross_entropy(T.layer_norm(T.matmul(h, w2), gamma, beta), targets)

    return f, [w1, b1, w2, gamma, beta]


@pytest.mark.parametrize("seed", range(20))
def test_two_layer_network_matches_finite_differences(seed):
    f, params = _two_layer_net(seed)
    report = check_gradients(f, params, step=1e-4)
    assert max(report.values()) <= 1e-4, report


def _op_cases(rng):
    a = leaf(rng.normal(size=(3, 4)))
    b = leaf(rng.normal(size=(3, 4)))
    w = leaf(rng.normal(size=(4, 2)))
    bb = leaf(rng.normal(size=(2, 4, 3)))
    bias = leaf(rng.normal(size=4))
    g, be = leaf(rng.normal(size=4)), leaf(rng.normal(size=4))
    mask = np.tril(np.ones((3, 4), dtype=bool))
    r = Tensor(rng.normal(size=(3, 4)))
    tgt = rng.integers(0, 4, size=3)
    table = leaf(rng.normal(size=(5, 4)))
    ids = rng.integers(0, 5, size=(2, 3))
    batched = leaf(rng.normal(size=(2, 3, 4)))
    return {
        "matmul": (lambda: T.sum_all(T.mul(T.matmul(a, w), Tensor(rng_fixed(3, 2)))), [a, w]),
        "matmul_batched": (lambda: T.sum_all(T.tanh(T.matmul(batched, bb))), [batched, bb]),
        "matmul_shared": (lambda: T.sum_all(T.tanh(T.matmul(batched, w))), [batched, w]),
        "add_sub_mul": (lambda: T.sum_all(T.mul(T.sub(T.add(a, b), r), a)), [a, b]),
        "scale_neg": (lambda: T.sum_all(T.mul(T.neg(T.scale(a, 2.5)), r)), [a]),
        "add_bias": (lambda: T.sum_all(T.tanh(T.add_bias(a, bias))), [a, bias]),
        "gelu": (lambda: T.sum_all(T.mul(T.gelu(a), r)), [a]),
        "relu": (lambda: T.sum_all(T.mul(T.relu(T.add(a, Tensor(np.sign(a.data) * 0.5))), r)), [a]),
        "tanh": (lambda: T.sum_all(T.mul(T.tanh(a), r)), [a]),
        "layer_norm": (lambda: T.sum_all(T.mul(T.layer_norm(a, g, be), r)), [a, g, be]),
        "softmax": (lambda: T.sum_all(T.mul(T.softmax_rows(a), r)), [a]),
        "softmax_masked": (lambda: T.sum_all(T.mul(T.softmax_rows(a, mask), r)), [a]),
        "cross_entropy": (lambda: T.cross_entropy(a, tgt, np.array([True, False, True])), [a]),
        "transpose_permute_reshape": (
            lambda: T.sum_all(T.mul(T.reshape(T.permute(T.transpose(batched), (1, 0, 2)), (4, 6)), Tensor(rng_fixed(4, 6)))),
            [batched],
        ),
        "embedding": (lambda: T.sum_all(T.tanh(T.embedding(table, ids))), [table]),
    }


def rng_fixed(*shape):
    return np.random.default_rng(12345).normal(size=shape)


@pytest.mark.parametrize("seed", range(20))
def test_every_op_matches_finite_differences(seed):
    cases = _op_cases(np.random.default_rng(seed))
    for name, (f, params) in cases.items():
        report = check_gradients(f, params, step=1e-4)
        assert max(report.values()) <= 1e-4, (name, report)


def test_backward_is_bitwise_deterministic():
    grads = []
    for _ in range(2):
        f, params = _two_layer_net(7)
        T.backward(f())
        grads.append([p.grad.copy() for p in params])
    for g1, g2 in zip(*grads):
        assert np.array_equal(g1, g2)


def test_outputs_finite_on_finite_inputs():
    rng = np.random.default_rng(0)
    f, params = _two_layer_net(0)
    for p in params:
        p.data = p.data * 100
    loss = f()
    T.backward(loss)
    assert np.isfinite(loss.data) and all(np.all(np.isfinite(p.grad)) for p in params)
    assert np.isfinite(T.gelu(Tensor(rng.normal(scale=1e3, size=10))).data).all()


def test_relative_error_floor():
    assert relative_error(np.array([1e-12]), np.array([0.0])) < 1e-5
    assert relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)


def test_numerical_gradient_restores_input():
    x = leaf([1.0, 2.0])
    before = x.data.copy()
    numerical_gradient(lambda: T.sum_all(T.mul(x, x)), x)
    assert np.array_equal(x.data, before)
