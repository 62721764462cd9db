import numpy as np
import pytest

from resattn import ops
from resattn.errors import ShapeError
from resattn.gradsuite import run_primitive_suite
from resattn.tensor import Tensor, no_grad


def T(data, **kw):
    return Tensor(np.asarray(data, dtype=np.float64), **kw)


def naive_conv2d(x, w, stride, pad):
    """Six-loop reference convolution (cross-correlation)."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    y = np.zeros((n, cout, oh, ow))
    for b in range(n):
        for o in range(cout):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    y[b, o, i, j] = (patch * w[o]).sum()
    return y


class TestConv2d:
    def test_ones_kernel_sums_window(self):
        x = T(np.ones((1, 1, 3, 3)))
        w = T(np.ones((1, 1, 3, 3)))
        y = ops.conv2d(x, w, 1, 0)
        assert y.shape == (1, 1, 1, 1)
        assert y.item() == 9.0

    def test_identity_kernel(self, rng):
        x = T(rng.standard_normal((1, 1, 4, 4)))
        w = T([[[[1.0]]]])
        y = ops.conv2d(x, w, 1, 0)
        np.testing.assert_array_equal(y.data, x.data)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (3, 2)])
    def test_matches_naive_reference(self, rng, stride, pad):
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal((4, 3, 3, 3))
        got = ops.conv2d(T(x), T(w), stride, pad)
        np.testing.assert_allclose(got.data, naive_conv2d(x, w, stride, pad), atol=1e-12)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="channels"):
            ops.conv2d(T(np.zeros((1, 3, 4, 4))), T(np.zeros((2, 4, 1, 1))), 1, 0)

    def test_kernel_larger_than_padded_input_rejected(self):
        with pytest.raises(ShapeError, match="larger"):
            ops.conv2d(T(np.zeros((1, 1, 4, 4))), T(np.zeros((1, 1, 7, 7))), 1, 1)

    def test_linearity_in_input(self, rng):
        x1 = rng.standard_normal((1, 2, 6, 6))
        x2 = rng.standard_normal((1, 2, 6, 6))
        w = T(rng.standard_normal((3, 2, 3, 3)))
        a, b = 0.7, -1.3
        lhs = ops.conv2d(T(a * x1 + b * x2), w, 1, 1).data
        rhs = a * ops.conv2d(T(x1), w, 1, 1).data + b * ops.conv2d(T(x2), w, 1, 1).data
        np.testing.assert_allclose(lhs, rhs, rtol=1e-10)


class TestMaxPool:
    def test_two_by_two(self):
        x = T([[[[1.0, 2.0], [3.0, 4.0]]]])
        y = ops.max_pool2d(x, 2, 2)
        assert y.data.reshape(-1).tolist() == [4.0]

    def test_constant_input_constant_output(self):
        x = T(np.full((1, 2, 6, 6), 3.5))
        y = ops.max_pool2d(x, 3, 2)
        assert np.all(y.data == 3.5)

    def test_tie_routes_gradient_to_first_in_scan_order(self):
        x = T(np.full((1, 1, 2, 2), 7.0), requires_grad=True)
        y = ops.max_pool2d(x, 2, 2)
        ops.tensor_sum(y).backward()
        np.testing.assert_array_equal(
            x.grad.reshape(2, 2), [[1.0, 0.0], [0.0, 0.0]]
        )

    def test_window_larger_than_input_rejected(self):
        with pytest.raises(ShapeError, match="window"):
            ops.max_pool2d(T(np.zeros((1, 1, 2, 2))), 4, 1)

    def test_padding_must_be_less_than_window(self):
        with pytest.raises(ShapeError, match="padding"):
            ops.max_pool2d(T(np.zeros((1, 1, 4, 4))), 2, 2, padding=2)


class TestBilinearUpsample:
    def test_constant_preserved(self):
        x = T(np.full((1, 2, 3, 3), 4.25))
        y = ops.bilinear_upsample(x, 7, 5)
        np.testing.assert_allclose(y.data, 4.25)

    def test_hand_computed_two_to_three(self):
        # align-corners on [[0,1],[2,3]]: source coords i*(H-1)/(OH-1)
        x = T([[[[0.0, 1.0], [2.0, 3.0]]]])
        y = ops.bilinear_upsample(x, 3, 3)
        expected = [[0.0, 0.5, 1.0], [1.0, 1.5, 2.0], [2.0, 2.5, 3.0]]
        np.testing.assert_allclose(y.data[0, 0], expected)

    def test_zero_target_rejected(self):
        with pytest.raises(ShapeError):
            ops.bilinear_upsample(T(np.zeros((1, 1, 2, 2))), 0, 4)

    def test_downsampling_rejected(self):
        with pytest.raises(ShapeError):
            ops.bilinear_upsample(T(np.zeros((1, 1, 4, 4))), 2, 4)

    def test_linearity(self, rng):
        x1 = rng.standard_normal((1, 2, 4, 4))
        x2 = rng.standard_normal((1, 2, 4, 4))
        a, b = 2.0, -0.5
        lhs = ops.bilinear_upsample(T(a * x1 + b * x2), 9, 7).data
        rhs = a * ops.bilinear_upsample(T(x1), 9, 7).data + b * ops.bilinear_upsample(T(x2), 9, 7).data
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)

    def test_mirrors_pooled_shape(self, rng):
        # downsample-then-upsample restores the pre-pool spatial extents
        x = T(rng.standard_normal((1, 2, 56, 56)))
        p1 = ops.max_pool2d(x, 3, 2, 1)
        p2 = ops.max_pool2d(p1, 3, 2, 1)
        assert p2.shape == (1, 2, 14, 14)
        up = ops.bilinear_upsample(p2, p1.shape[2], p1.shape[3])
        assert up.shape == p1.shape


class TestBatchNorm:
    def test_train_mode_normalizes(self, rng):
        x = T(rng.standard_normal((4, 3, 5, 5)) * 3.0 + 1.5)
        gamma, beta = T(np.ones(3)), T(np.zeros(3))
        st = ops.BNState.create(3, dtype=np.float64)
        y = ops.batch_norm(x, gamma, beta, st, training=True)
        np.testing.assert_allclose(y.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
        np.testing.assert_allclose(y.data.var(axis=(0, 2, 3)), 1.0, atol=1e-5)

    def test_eval_identity_with_unit_stats(self, rng):
        x = T(rng.standard_normal((2, 3, 4, 4)))
        gamma, beta = T(np.ones(3)), T(np.zeros(3))
        st = ops.BNState(np.zeros(3), np.ones(3))
        y = ops.batch_norm(x, gamma, beta, st, training=False)
        np.testing.assert_allclose(y.data, x.data / np.sqrt(1 + ops.BN_EPS), rtol=1e-7)

    def test_running_stats_update_with_momentum(self, rng):
        x = T(rng.standard_normal((4, 2, 4, 4)) + 2.0)
        st = ops.BNState.create(2, dtype=np.float64)
        ops.batch_norm(x, T(np.ones(2)), T(np.zeros(2)), st, training=True)
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        np.testing.assert_allclose(st.mean, 0.1 * mean, rtol=1e-6)
        np.testing.assert_allclose(st.var, 0.9 + 0.1 * var, rtol=1e-6)

    def test_zero_variance_channel_survives(self):
        x = T(np.full((2, 1, 3, 3), 5.0), requires_grad=True)
        st = ops.BNState.create(1, dtype=np.float64)
        y = ops.batch_norm(x, T(np.ones(1), requires_grad=True),
                           T(np.zeros(1), requires_grad=True), st, training=True)
        assert np.all(np.isfinite(y.data))
        ops.tensor_sum(y).backward()
        assert np.all(np.isfinite(x.grad))

    def test_single_element_population_rejected(self):
        x = T(np.zeros((1, 2, 1, 1)))
        st = ops.BNState.create(2, dtype=np.float64)
        with pytest.raises(ShapeError):
            ops.batch_norm(x, T(np.ones(2)), T(np.zeros(2)), st, training=True)


class TestElementwiseAndHead:
    def test_sigmoid_zero(self):
        assert ops.sigmoid(T([0.0])).data[0] == 0.5

    def test_sigmoid_extremes_stable(self):
        y = ops.sigmoid(T([-1e4, 1e4]))
        np.testing.assert_allclose(y.data, [0.0, 1.0], atol=1e-12)

    def test_add_mul_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            ops.add(T(np.zeros(3)), T(np.zeros(4)))
        with pytest.raises(ShapeError):
            ops.mul(T(np.zeros((2, 2))), T(np.zeros(4)))

    def test_uniform_logits_cross_entropy_is_log_k(self):
        for k in (2, 5, 10):
            logits = T(np.zeros((4, k)))
            loss = ops.softmax_cross_entropy(logits, np.zeros(4, dtype=int))
            np.testing.assert_allclose(loss.item(), np.log(k), rtol=1e-6)

    def test_cross_entropy_label_range_checked(self):
        with pytest.raises(ShapeError):
            ops.softmax_cross_entropy(T(np.zeros((2, 3))), np.array([0, 3]))

    def test_cross_entropy_empty_batch_rejected(self):
        with pytest.raises(ShapeError):
            ops.softmax_cross_entropy(T(np.zeros((0, 3))), np.array([], dtype=int))

    def test_fully_connected_matches_matmul(self, rng):
        x, w, b = rng.standard_normal((4, 6)), rng.standard_normal((3, 6)), rng.standard_normal(3)
        y = ops.fully_connected(T(x), T(w), T(b))
        np.testing.assert_allclose(y.data, x @ w.T + b, rtol=1e-12)

    def test_fc_linearity_in_input(self, rng):
        x1, x2 = rng.standard_normal((2, 5)), rng.standard_normal((2, 5))
        w, b = T(rng.standard_normal((3, 5))), T(np.zeros(3))
        lhs = ops.fully_connected(T(2.0 * x1 - x2), w, b).data
        rhs = 2.0 * ops.fully_connected(T(x1), w, b).data - ops.fully_connected(T(x2), w, b).data
        np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-10)

    def test_global_avg_pool(self, rng):
        x = rng.standard_normal((2, 3, 4, 5))
        y = ops.global_avg_pool(T(x))
        np.testing.assert_allclose(y.data, x.mean(axis=(2, 3)), rtol=1e-12)


class TestMaskActivationPrimitives:
    def test_channel_l2norm_345_triangle(self):
        x = T(np.array([3.0, 4.0]).reshape(1, 2, 1, 1))
        y = ops.channel_l2norm(x)
        np.testing.assert_allclose(y.data.reshape(-1), [0.6, 0.8], rtol=1e-12)

    def test_channel_l2norm_unit_norm(self, rng):
        x = T(rng.standard_normal((2, 8, 4, 4)))
        y = ops.channel_l2norm(x)
        norms = np.sqrt((y.data**2).sum(axis=1))
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)

    def test_spatial_standardize_hand_case(self):
        # [[-1,1],[-1,1]] already has mean 0 and population std 1
        x = T(np.array([[-1.0, 1.0], [-1.0, 1.0]]).reshape(1, 1, 2, 2))
        y = ops.spatial_standardize(x)
        np.testing.assert_allclose(y.data, x.data, rtol=1e-6)

    def test_spatial_standardize_one_by_one_rejected(self):
        with pytest.raises(ShapeError):
            ops.spatial_standardize(T(np.zeros((1, 2, 1, 1))))


def test_primitive_gradients_match_finite_differences():
    # relative error < 1e-4 at step 1e-3 for every primitive
    for name, rep in run_primitive_suite(seed=0):
        assert rep.passed, f"{name}: {rep}"


def test_gradcheck_rejects_nonscalar():
    with pytest.raises(ShapeError):
        ops.gradcheck(lambda i: ops.relu(i[0]), [T(np.ones(3), requires_grad=True)])


def test_gradcheck_sum_is_exact():
    x = T(np.linspace(-1, 1, 12).reshape(3, 4), requires_grad=True)
    rep = ops.gradcheck(lambda i: ops.tensor_sum(i[0]), [x])
    assert rep.passed and rep.max_error < 1e-9


def test_gradcheck_catches_corrupted_backward():
    ops.set_debug_corrupt_backward(True)
    try:
        x = T(np.linspace(0.1, 1.0, 10), requires_grad=True)
        rep = ops.gradcheck(lambda i: ops.tensor_sum(ops.relu(i[0])), [x])
    finally:
        ops.set_debug_corrupt_backward(False)
    assert not rep.passed
