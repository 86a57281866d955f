import threading

import numpy as np
import pytest

from flowup import ops
from flowup.errors import DimensionError, GraphError
from flowup.tensor import Tensor, default_dtype, get_default_dtype, grad_enabled, no_grad, ones, zeros


class TestTensorBasics:
    def test_default_dtype_is_float32(self):
        assert Tensor([1.0, 2.0]).dtype == np.float32

    def test_default_dtype_context_is_scoped(self):
        with default_dtype(np.float64):
            assert Tensor([1.0]).dtype == np.float64
            assert zeros((2,)).dtype == np.float64
        assert get_default_dtype() == np.float32

    def test_shape_matches_buffer(self):
        t = ones((2, 3, 4))
        assert t.shape == (2, 3, 4)
        assert t.size == t.data.size == 24

    def test_leaf_flags(self):
        x = Tensor([1.0], requires_grad=True)
        y = x * 2
        assert x.is_leaf and not y.is_leaf


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones(3))

    def test_softmax_sum_has_zero_gradient(self, f64):
        x = Tensor(np.array([0.3, -1.2, 2.0, 0.0]), requires_grad=True)
        ops.softmax(x, axis=0).sum().backward()
        np.testing.assert_allclose(x.grad, 0.0, atol=1e-12)

    def test_shared_tensor_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        (x * x + x).sum().backward()
        np.testing.assert_allclose(x.grad, [5.0])

    def test_grads_accumulate_across_graphs(self):
        x = Tensor([1.0, 1.0], requires_grad=True)
        (x * 3).sum().backward()
        (x * 4).sum().backward()
        np.testing.assert_allclose(x.grad, [7.0, 7.0])

    def test_second_backward_raises(self):
        x = Tensor([1.0], requires_grad=True)
        y = (x * 2).sum()
        y.backward()
        with pytest.raises(GraphError):
            y.backward()

    def test_nonscalar_needs_seed(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(GraphError):
            (x * 2).backward()
        y = x * 2
        y.backward(np.array([1.0, 0.5]))
        np.testing.assert_allclose(x.grad, [2.0, 1.0])

    def test_every_reachable_requires_grad_tensor_gets_grad(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = Tensor([3.0, 4.0], requires_grad=True)
        mid = a * b
        out = (mid + a).sum()
        out.backward()
        for t in (a, b, mid):
            assert t.grad is not None and t.grad.shape == t.shape

    def test_constant_branch_gets_no_grad(self):
        a = Tensor([1.0], requires_grad=True)
        c = Tensor([5.0])
        (a * c).sum().backward()
        assert c.grad is None

    def test_diamond_graph_visits_once(self):
        x = Tensor([1.5], requires_grad=True)
        y = ops.exp(x)
        z = (y * y + y).sum()
        z.backward()
        e = np.exp(1.5)
        np.testing.assert_allclose(x.grad, [2 * e * e + e], rtol=1e-6)


class TestNoGrad:
    def test_no_graph_recorded(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = x * 2
            assert not grad_enabled()
        assert not y.requires_grad
        assert grad_enabled()

    def test_no_grad_is_thread_local(self):
        seen = {}

        def worker():
            seen["enabled"] = grad_enabled()

        with no_grad():
            t = threading.Thread(target=worker)
            t.start()
            t.join()
        assert seen["enabled"] is True


def test_shape_mismatch_names_axes():
    with pytest.raises(DimensionError, match="axis"):
        ops.conv2d(Tensor(np.zeros((3, 5, 5))), Tensor(np.zeros((2, 4, 3, 3))))
