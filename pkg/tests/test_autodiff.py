"""Core engine tests: op semantics, gradients vs finite differences,
seeded initialization."""

import numpy as np
import pytest

import carmil.autodiff as ad
from carmil.autodiff import ParamStore, backward, constant, finite_difference_check


def rand(rows, cols, seed, lo=-2.0, hi=2.0):
    rng = np.random.default_rng(seed)
    return rng.uniform(lo, hi, size=(rows, cols))


class TestForwardSemantics:
    def test_matmul_identity(self):
        m = constant(rand(3, 3, 0))
        out = ad.matmul(constant(np.eye(3)), m)
        np.testing.assert_array_equal(out.value, m.value)

    def test_matmul_hand_case(self):
        a = constant([[1.0, 2.0], [3.0, 4.0]])
        b = constant([[0.0], [1.0]])
        np.testing.assert_array_equal(ad.matmul(a, b).value, [[2.0], [4.0]])

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.matmul(constant(rand(2, 3, 0)), constant(rand(2, 3, 1)))

    def test_relu_sign_split(self):
        out = ad.relu(constant([[-1.0, 2.0]]))
        np.testing.assert_array_equal(out.value, [[0.0, 2.0]])

    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(constant([[0.0]])).value[0, 0] == 0.5

    def test_sigmoid_symmetry(self):
        x = rand(4, 5, 1, -30.0, 30.0)
        s = ad.sigmoid(constant(x)).value + ad.sigmoid(constant(-x)).value
        np.testing.assert_allclose(s, 1.0, atol=1e-12)

    def test_sigmoid_open_interval(self):
        s = ad.sigmoid(constant(rand(10, 10, 2, -36.0, 36.0))).value
        assert np.all(s > 0.0) and np.all(s < 1.0)

    def test_relu_nonnegative(self):
        assert np.all(ad.relu(constant(rand(6, 6, 3))).value >= 0.0)

    def test_transpose_involution(self):
        m = rand(3, 5, 4)
        np.testing.assert_array_equal(ad.transpose(ad.transpose(constant(m))).value, m)

    def test_log_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            ad.log(constant([[1.0, 0.0]]))

    def test_softmax_is_distribution(self):
        s = ad.softmax_col(constant(rand(7, 1, 5))).value
        assert np.all(s > 0)
        assert abs(s.sum() - 1.0) < 1e-12

    def test_stack_scalars(self):
        nodes = [constant([[float(i)]]) for i in range(4)]
        np.testing.assert_array_equal(ad.stack_scalars(nodes).value, [[0.0], [1.0], [2.0], [3.0]])

    def test_gather_rows(self):
        m = constant(rand(5, 3, 6))
        out = ad.gather_rows(m, [3, 0, 3])
        np.testing.assert_array_equal(out.value, m.value[[3, 0, 3]])


class TestBackward:
    def test_loss_must_be_scalar(self):
        with pytest.raises(ValueError):
            backward(constant(rand(2, 2, 0)))

    def test_sum_gradient_all_ones(self):
        store = ParamStore(seed=0)
        w = store.param("w", 3, 4)
        backward(ad.sum_all(w), store)
        np.testing.assert_array_equal(w.grad, np.ones((3, 4)))

    def test_quadratic_gradient(self):
        store = ParamStore(seed=0)
        w = store.param("w", 3, 3)
        backward(ad.sum_all(ad.hadamard(w, w)), store)
        np.testing.assert_allclose(w.grad, 2.0 * w.value, atol=1e-14)

    def test_gradients_accumulate_without_zeroing(self):
        store = ParamStore(seed=0)
        w = store.param("w", 2, 2)
        backward(ad.sum_all(w), store)
        backward(ad.sum_all(w), store)
        np.testing.assert_array_equal(w.grad, 2.0 * np.ones((2, 2)))

    def test_fanout_accumulates(self):
        store = ParamStore(seed=1)
        w = store.param("w", 2, 2)
        backward(ad.sum_all(ad.add(w, w)), store)
        np.testing.assert_array_equal(w.grad, 2.0 * np.ones((2, 2)))

    def test_matmul_grad_vs_transpose_rule(self):
        # d sum(A B) / dA = 1 B^T
        store = ParamStore(seed=2)
        a = store.param("a", 3, 4)
        b = constant(rand(4, 2, 7))
        backward(ad.sum_all(ad.matmul(a, b)), store)
        np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.value.T, atol=1e-13)

    def test_untouched_param_gets_zero_grad(self):
        store = ParamStore(seed=3)
        w = store.param("w", 2, 2)
        unused = store.param("unused", 2, 2)
        backward(ad.sum_all(w), store)
        np.testing.assert_array_equal(unused.grad, np.zeros((2, 2)))


def composite_loss(store):
    """Three-layer composite touching most ops."""
    x = constant(rand(6, 5, 42, 0.1, 2.0))
    h1 = ad.tanh(ad.matmul(x, store["w1"]))
    h2 = ad.sigmoid(ad.add_bias(ad.matmul(h1, store["w2"]), store["b2"]))
    h3 = ad.matmul(ad.relu(h2), store["w3"])
    col = ad.softmax_col(ad.matmul(h3, store["w4"]))
    return ad.sum_all(ad.hadamard(col, ad.log(ad.clip(col, 1e-9, 1.0))))


def structural_loss(store):
    """Composite exercising the structural ops: sub, scale, transpose,
    row_mean, gather_rows, stack_scalars."""
    x = constant(rand(5, 4, 43))
    h = ad.sub(ad.matmul(x, store["w1"]), ad.scale(ad.matmul(x, store["w2"]), 0.3))
    g = ad.gather_rows(ad.transpose(ad.matmul(ad.transpose(h), h)), [2, 0, 1])
    parts = [ad.sum_all(ad.row_mean(g)), ad.sum_all(ad.exp(ad.scale(g, 0.1)))]
    return ad.sum_all(ad.stack_scalars(parts))


class TestFiniteDifferences:
    def test_three_layer_composite(self):
        store = ParamStore(seed=9)
        store.param("w1", 5, 4)
        store.param("w2", 4, 3)
        store.param("b2", 1, 3)
        store.param("w3", 3, 2)
        store.param("w4", 2, 1)
        err = finite_difference_check(lambda: composite_loss(store), store, step=1e-6)
        assert err < 1e-5

    def test_structural_composite(self):
        store = ParamStore(seed=10)
        store.param("w1", 4, 3)
        store.param("w2", 4, 3)
        err = finite_difference_check(lambda: structural_loss(store), store, step=1e-6)
        assert err < 1e-5

    @pytest.mark.parametrize("op", [ad.relu, ad.sigmoid, ad.tanh, ad.exp])
    def test_elementwise_ops(self, op):
        store = ParamStore(seed=11)
        w = store.param("w", 4, 4)
        # keep relu away from its kink
        w.value = np.where(np.abs(w.value) < 1e-3, 0.1, w.value)
        err = finite_difference_check(lambda: ad.sum_all(ad.hadamard(op(w), op(w))), store, 1e-6)
        assert err < 1e-5

    def test_log_positive_inputs(self):
        store = ParamStore(seed=13)
        w = store.param("w", 3, 3)
        w.value = np.abs(w.value) + 0.5
        err = finite_difference_check(lambda: ad.sum_all(ad.log(w)), store, 1e-6)
        assert err < 1e-5

    def test_sum_of_squares_tight(self):
        store = ParamStore(seed=15)
        store.param("w", 4, 3)
        err = finite_difference_check(
            lambda: ad.sum_all(ad.hadamard(store["w"], store["w"])), store, 1e-6
        )
        assert err < 1e-7

    def test_constant_function_zero_error(self):
        store = ParamStore(seed=17)
        store.param("w", 2, 2)
        err = finite_difference_check(lambda: constant([[3.0]]), store, 1e-6)
        assert err == 0.0

    def test_rejects_nonpositive_step(self):
        store = ParamStore(seed=19)
        store.param("w", 2, 2)
        with pytest.raises(ValueError):
            finite_difference_check(lambda: constant([[1.0]]), store, 0.0)


class TestParamStore:
    def test_same_seed_bit_identical(self):
        a, b = ParamStore(seed=123), ParamStore(seed=123)
        for s in (a, b):
            s.param("w1", 4, 7)
            s.param("w2", 7, 2)
        for name in a.names():
            assert a[name].value.tobytes() == b[name].value.tobytes()

    def test_different_seed_differs(self):
        a, b = ParamStore(seed=1), ParamStore(seed=2)
        a.param("w", 4, 4)
        b.param("w", 4, 4)
        assert not np.array_equal(a["w"].value, b["w"].value)

    def test_duplicate_name_rejected(self):
        store = ParamStore(seed=0)
        store.param("w", 2, 2)
        with pytest.raises(ValueError):
            store.param("w", 2, 2)

    def test_glorot_bounds(self):
        store = ParamStore(seed=5)
        w = store.param("w", 30, 20)
        bound = np.sqrt(6.0 / 50)
        assert np.all(np.abs(w.value) <= bound)

    def test_state_dict_roundtrip(self):
        a = ParamStore(seed=7)
        a.param("w", 3, 3)
        b = ParamStore(seed=8)
        b.param("w", 3, 3)
        b.load_state_dict(a.state_dict())
        assert a["w"].value.tobytes() == b["w"].value.tobytes()

    def test_zero_grad(self):
        store = ParamStore(seed=9)
        w = store.param("w", 2, 2)
        backward(ad.sum_all(w), store)
        store.zero_grad()
        np.testing.assert_array_equal(w.grad, np.zeros((2, 2)))


class TestMatrixValidation:
    def test_rejects_nonfinite(self):
        with pytest.raises(FloatingPointError):
            ad.as_matrix([[np.nan, 1.0]])

    def test_rejects_wrong_ndim(self):
        with pytest.raises(ValueError):
            ad.as_matrix([1.0, 2.0])
