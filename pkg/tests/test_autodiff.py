import numpy as np
import pytest

from sanmove.src import autodiff as ad
from sanmove.src.autodiff import Tensor, backward, grad_check, gradients
from sanmove.src.errors import ShapeError


def weighted_sum(out, weights):
    """Scalar readout sum(out * weights) so every output element carries gradient."""
    return ad.sum(ad.mul(out, weights))


def check_op(op, x_data, rng, tol=1e-6):
    x = Tensor(x_data, requires_grad=True)
    weights = rng.normal(size=op(Tensor(x_data)).shape)
    error = grad_check(lambda t: weighted_sum(op(t), weights), x)
    assert error < tol


class TestTensor:
    def test_data_is_copied_to_float64(self):
        source = np.arange(6, dtype=np.int32).reshape(2, 3)
        t = Tensor(source)
        source[0, 0] = 99
        assert t.data.dtype == np.float64
        assert t.data.flags["C_CONTIGUOUS"]
        assert t.data[0, 0] == 0.0

    def test_results_only_record_parents_when_needed(self):
        a = Tensor(np.ones(3))
        b = Tensor(np.ones(3), requires_grad=True)
        assert ad.add(a, a)._parents == ()
        assert not ad.add(a, a).requires_grad
        assert ad.add(a, b).requires_grad

    def test_item_needs_a_single_value(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones(2)).item()


class TestShapes:
    def test_broadcast_add(self):
        a = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(np.arange(4.0), requires_grad=True)
        backward(ad.sum(ad.add(a, b)))
        np.testing.assert_array_equal(b.grad, np.full(4, 3.0))
        np.testing.assert_array_equal(a.grad, np.ones((3, 4)))

    def test_incompatible_broadcast(self):
        with pytest.raises(ShapeError):
            ad.add(Tensor(np.ones((3, 4))), Tensor(np.ones(3)))

    def test_matmul_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    def test_gather_out_of_range(self):
        with pytest.raises(IndexError):
            ad.gather_rows(Tensor(np.ones((3, 2))), [0, 3])

    def test_backward_needs_a_scalar(self):
        with pytest.raises(ShapeError):
            backward(Tensor(np.ones(2), requires_grad=True) * 2.0)


class TestOperatorGradients:
    def test_matmul(self, rng):
        b = Tensor(rng.normal(size=(4, 2)))
        check_op(lambda t: ad.matmul(t, b), rng.normal(size=(3, 4)), rng)
        a = Tensor(rng.normal(size=(3, 4)))
        check_op(lambda t: ad.matmul(a, t), rng.normal(size=(4, 2)), rng)

    def test_elementwise(self, rng):
        other = Tensor(rng.normal(size=(3, 4)))
        check_op(lambda t: ad.mul(t, other), rng.normal(size=(3, 4)), rng)
        check_op(lambda t: ad.sub(other, t), rng.normal(size=(3, 4)), rng)
        check_op(lambda t: ad.add(other, t), rng.normal(size=(4,)), rng)
        check_op(lambda t: ad.scale(t, -2.5), rng.normal(size=(3,)), rng)

    def test_nonlinearities(self, rng):
        away_from_zero = rng.uniform(0.2, 2.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))
        check_op(ad.relu, away_from_zero, rng)
        check_op(ad.sigmoid, rng.normal(size=(3, 4)), rng)
        check_op(ad.tanh, rng.normal(size=(3, 4)), rng)
        check_op(ad.exp, rng.normal(size=(3, 4)), rng)
        check_op(ad.log, rng.uniform(0.5, 2.0, size=(3, 4)), rng)

    def test_softmax(self, rng):
        mask = np.tril(np.ones((4, 4), dtype=bool))
        check_op(lambda t: ad.softmax(t, axis=1), rng.normal(size=(4, 5)), rng)
        check_op(lambda t: ad.softmax(t, axis=0), rng.normal(size=(4, 5)), rng)
        check_op(lambda t: ad.softmax(t, axis=1, mask=mask), rng.normal(size=(4, 4)), rng)

    def test_structural(self, rng):
        check_op(ad.transpose, rng.normal(size=(3, 4)), rng)
        check_op(lambda t: ad.reshape(t, (4, 3)), rng.normal(size=(3, 4)), rng)
        check_op(lambda t: ad.mean(t, axis=0), rng.normal(size=(3, 4)), rng)
        check_op(lambda t: ad.sum(t, axis=1), rng.normal(size=(3, 4)), rng)
        check_op(lambda t: ad.gather_rows(t, [2, 0, 2, 2]), rng.normal(size=(3, 4)), rng)
        check_op(lambda t: ad.pick(t, [0, 1, 1], [3, 0, 2]), rng.normal(size=(3, 4)), rng)
        check_op(lambda t: ad.slice_rows(t, 1, 3), rng.normal(size=(4, 2)), rng)
        check_op(lambda t: ad.slice_cols(t, 1, 3), rng.normal(size=(2, 4)), rng)

    def test_concat(self, rng):
        other = Tensor(rng.normal(size=(2, 3)))
        check_op(lambda t: ad.concat([t, other, t], axis=1), rng.normal(size=(2, 2)), rng)
        check_op(lambda t: ad.concat([other, t], axis=0), rng.normal(size=(1, 3)), rng)

    def test_softmax_sum_has_zero_gradient(self, rng):
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        f = lambda t: ad.sum(ad.softmax(t, axis=1))  # noqa: E731
        backward(f(x))
        np.testing.assert_allclose(x.grad, 0.0, atol=1e-12)
        np.testing.assert_allclose(ad.numeric_gradient(f, x), 0.0, atol=1e-9)


class TestSoftmax:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            rows, cols = rng.integers(1, 9, size=2)
            logits = rng.normal(scale=rng.uniform(0.1, 30.0), size=(rows, cols))
            mask = rng.random((rows, cols)) < 0.7
            mask[np.arange(rows), rng.integers(cols, size=rows)] = True
            y = ad.softmax(Tensor(logits), axis=1, mask=mask).data
            np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
            assert (y[~mask] == 0.0).all()

    def test_fully_masked_row(self):
        mask = np.array([[True, False], [False, False]])
        with pytest.raises(ValueError, match="fully masked"):
            ad.softmax(Tensor(np.zeros((2, 2))), axis=1, mask=mask)


class TestBackward:
    def test_shared_node_is_visited_once(self):
        x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        y = ad.add(ad.mul(x, x), x)
        backward(ad.sum(y))
        np.testing.assert_allclose(x.grad, 2 * x.data + 1)

    def test_gradients_accumulate_across_calls(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        backward(ad.sum(ad.scale(x, 3.0)))
        backward(ad.sum(ad.scale(x, 3.0)))
        np.testing.assert_array_equal(x.grad, [6.0, 6.0])
        x.zero_grad()
        assert x.grad is None

    def test_gradients_leave_grad_fields_untouched(self):
        w = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
        unused = Tensor(np.ones(3), requires_grad=True)
        loss = ad.sum(ad.matmul(Tensor(np.ones((1, 2))), w))
        gw, gu = gradients(loss, [w, unused])
        np.testing.assert_array_equal(gw, np.ones((2, 2)))
        np.testing.assert_array_equal(gu, np.zeros(3))
        assert w.grad is None

    def test_topological_order_puts_parents_first(self):
        x = Tensor(np.ones(2), requires_grad=True)
        h = ad.tanh(x)
        y = ad.sum(ad.mul(h, h))
        order = ad.topological_order(y)
        assert order.index(x) < order.index(h) < order.index(y)
        assert len(order) == len({id(n) for n in order})

    def test_deep_chain_does_not_recurse(self):
        x = Tensor(np.array([0.5]), requires_grad=True)
        y = x
        for _ in range(5000):
            y = ad.scale(y, 1.0)
        backward(ad.sum(y))
        np.testing.assert_array_equal(x.grad, [1.0])

    def test_global_norm(self):
        assert ad.global_norm([np.array([3.0]), np.array([[4.0]])]) == pytest.approx(5.0)
