import numpy as np
import pytest

from resattn import ops
from resattn.errors import ShapeError
from resattn.tensor import Tensor, clear_tape, no_grad, tape_size


def test_tensor_basics():
    t = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert t.shape == (2, 2)
    assert t.dtype in (np.float32, np.float64)  # float dtypes pass through
    assert not t.requires_grad and t.grad is None
    assert Tensor(np.array([1, 2])).dtype == np.float32  # ints promote to f32


def test_shape_invariant_grad():
    t = Tensor(np.zeros((2, 3)), requires_grad=True)
    with pytest.raises(ShapeError):
        t.accumulate_grad(np.zeros((3, 2)))


def test_backward_requires_scalar():
    t = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        t.backward()


def test_fanout_accumulates_sum_of_consumer_grads():
    # a tensor feeding two consumers gets the sum of both gradients
    t = Tensor(np.array([2.0, -3.0]), requires_grad=True, dtype=np.float64)
    y = ops.add(ops.mul(t, t), t)  # y = t^2 + t
    ops.tensor_sum(y).backward()
    np.testing.assert_allclose(t.grad, 2 * t.data + 1)

    # equals the sum of the two single-consumer gradients
    t1 = Tensor(t.data.copy(), requires_grad=True, dtype=np.float64)
    ops.tensor_sum(ops.mul(t1, t1)).backward()
    t2 = Tensor(t.data.copy(), requires_grad=True, dtype=np.float64)
    ops.tensor_sum(t2).backward()
    np.testing.assert_allclose(t.grad, t1.grad + t2.grad)


def test_backward_runs_each_node_once_and_clears_tape():
    t = Tensor(np.ones(4), requires_grad=True)
    y = ops.relu(t)
    z = ops.tensor_sum(y)
    assert tape_size() == 2
    z.backward()
    assert tape_size() == 0


def test_no_grad_suppresses_tape():
    t = Tensor(np.ones(4), requires_grad=True)
    with no_grad():
        y = ops.relu(t)
    assert tape_size() == 0
    assert not y.requires_grad


def test_requires_grad_propagates():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3))
    y = ops.add(a, b)
    assert y.requires_grad
    ops.tensor_sum(y).backward()
    np.testing.assert_array_equal(a.grad, np.ones(3))
    assert b.grad is None


def test_forward_deterministic_bitwise(rng):
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    with no_grad():
        y1 = ops.conv2d(Tensor(x), Tensor(w), 1, 1).data
        y2 = ops.conv2d(Tensor(x.copy()), Tensor(w.copy()), 1, 1).data
    assert np.array_equal(y1, y2)


def test_forward_backward_values_stay_finite(rng):
    x = Tensor(rng.uniform(-1, 1, (2, 3, 8, 8)), requires_grad=True, dtype=np.float64)
    w = Tensor(rng.uniform(-1, 1, (4, 3, 3, 3)), requires_grad=True, dtype=np.float64)
    y = ops.sigmoid(ops.conv2d(x, w, 1, 1))
    loss = ops.tensor_sum(y)
    assert np.all(np.isfinite(y.data))
    loss.backward()
    assert np.all(np.isfinite(x.grad)) and np.all(np.isfinite(w.grad))
