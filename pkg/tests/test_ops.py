"""Operator forward oracles, gradient spot checks, and error paths."""

import math

import numpy as np
import pytest

from res3atn import ops
from res3atn.gradcheck import grad_check
from res3atn.tensor import Tape, Tensor, backward


def _sum_backward(out_fn, *tensors):
    with Tape():
        loss = ops.sum_all(out_fn())
    backward(loss)
    return [t.grad for t in tensors]


# ---------------------------------------------------------------------------
# conv3d


def test_conv3d_identity_kernel_reproduces_input(rng):
    x = Tensor(rng.normal(size=(1, 1, 3, 4, 4)).astype(np.float32))
    w = np.zeros((1, 1, 3, 3, 3), dtype=np.float32)
    w[0, 0, 1, 1, 1] = 1.0
    out = ops.conv3d(x, Tensor(w), stride=1, padding=1)
    assert np.array_equal(out.data, x.data)


def test_conv3d_all_ones_counts_window_overlap():
    x = Tensor(np.ones((1, 1, 3, 3, 3), dtype=np.float32))
    w = Tensor(np.ones((1, 1, 3, 3, 3), dtype=np.float32))
    out = ops.conv3d(x, w, stride=1, padding=1)
    assert out.shape == (1, 1, 3, 3, 3)
    # corner window covers a 2x2x2 slab of ones, the center all 27
    assert out.data[0, 0, 0, 0, 0] == 8.0
    assert out.data[0, 0, 1, 1, 1] == 27.0


def test_conv3d_extent_law():
    x = Tensor(np.zeros((2, 3, 4, 6, 6), dtype=np.float32))
    w = Tensor(np.zeros((5, 3, 3, 3, 3), dtype=np.float32))
    out = ops.conv3d(x, w, stride=2, padding=1)
    assert out.shape == (2, 5, 2, 3, 3)


def test_conv3d_bias_broadcasts(rng):
    x = Tensor(rng.normal(size=(1, 2, 2, 2, 2)).astype(np.float32))
    w = Tensor(np.zeros((3, 2, 1, 1, 1), dtype=np.float32))
    b = Tensor(np.array([1.0, -2.0, 0.5], dtype=np.float32))
    out = ops.conv3d(x, w, b)
    for c, v in enumerate([1.0, -2.0, 0.5]):
        assert np.all(out.data[:, c] == v)


def test_conv3d_dual_route_agreement(rng):
    x = Tensor(rng.normal(size=(2, 3, 4, 6, 6)).astype(np.float32))
    w = Tensor(rng.normal(size=(5, 3, 3, 3, 3)).astype(np.float32))
    fast = ops.conv3d(x, w, stride=2, padding=1, method="im2col")
    slow = ops.conv3d(x, w, stride=2, padding=1, method="direct")
    assert np.max(np.abs(fast.data - slow.data)) <= 1e-5


def test_conv3d_gradients_match_finite_differences(rng):
    x = Tensor(rng.normal(size=(1, 2, 3, 4, 4)).astype(np.float32), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 2, 3, 3, 3)).astype(np.float32) * 0.5, requires_grad=True)
    b = Tensor(rng.normal(size=2).astype(np.float32), requires_grad=True)
    proj = rng.normal(size=(1, 2, 3, 2, 2)).astype(np.float32)

    def fn(x, w, b):
        out = ops.conv3d(x, w, b, stride=(1, 2, 2), padding=1)
        return ops.sum_all(ops.mul(out, Tensor(proj)))

    report = grad_check(fn, [x, w, b], rng=rng)
    assert report.passed, report.max_rel_error


def test_conv3d_validation_errors(rng):
    x5 = Tensor(np.zeros((1, 2, 4, 4, 4), dtype=np.float32))
    with pytest.raises(ValueError, match="rank 5"):
        ops.conv3d(Tensor(np.zeros((2, 4, 4, 4), dtype=np.float32)), Tensor(np.zeros((1, 2, 1, 1, 1), dtype=np.float32)))
    with pytest.raises(ValueError, match="channels"):
        ops.conv3d(x5, Tensor(np.zeros((1, 3, 1, 1, 1), dtype=np.float32)))
    with pytest.raises(ValueError, match="unknown method"):
        ops.conv3d(x5, Tensor(np.zeros((1, 2, 1, 1, 1), dtype=np.float32)), method="fft")
    with pytest.raises(ValueError, match="exceeds padded input"):
        ops.conv3d(x5, Tensor(np.zeros((1, 2, 5, 5, 5), dtype=np.float32)))


def test_conv3d_rejects_non_finite_input():
    x = Tensor(np.full((1, 1, 2, 2, 2), np.inf, dtype=np.float32))
    w = Tensor(np.ones((1, 1, 1, 1, 1), dtype=np.float32))
    with pytest.raises(AssertionError, match="conv3d produced non-finite"):
        ops.conv3d(x, w)


# ---------------------------------------------------------------------------
# pooling


def test_maxpool3d_takes_window_maximum():
    x = Tensor(np.arange(8, dtype=np.float32).reshape(1, 1, 2, 2, 2), requires_grad=True)
    out = ops.maxpool3d(x, 2)
    assert out.shape == (1, 1, 1, 1, 1)
    assert out.item() == 7.0
    (gx,) = _sum_backward(lambda: ops.maxpool3d(x, 2), x)
    expected = np.zeros((1, 1, 2, 2, 2), dtype=np.float32)
    expected[0, 0, 1, 1, 1] = 1.0
    assert np.array_equal(gx, expected)


def test_maxpool3d_ties_route_to_first_position():
    x = Tensor(np.ones((1, 1, 1, 2, 2), dtype=np.float32), requires_grad=True)
    (gx,) = _sum_backward(lambda: ops.maxpool3d(x, (1, 2, 2)), x)
    expected = np.zeros((1, 1, 1, 2, 2), dtype=np.float32)
    expected[0, 0, 0, 0, 0] = 1.0
    assert np.array_equal(gx, expected)


def test_maxpool3d_padding_never_wins():
    x = Tensor(np.full((1, 1, 3, 3, 3), -5.0, dtype=np.float32))
    out = ops.maxpool3d(x, 3, stride=1, padding=1)
    assert np.all(out.data == -5.0)


def test_maxpool3d_backward_marks_one_cell_per_window(rng):
    x = Tensor(rng.normal(size=(1, 2, 4, 5, 5)).astype(np.float32), requires_grad=True)
    out = ops.maxpool3d(x, 3, stride=2, padding=1)
    (gx,) = _sum_backward(lambda: ops.maxpool3d(x, 3, stride=2, padding=1), x)
    assert gx.sum() == out.data.size  # one unit of gradient per pooling window
    # brute-force argmax agreement on each window
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)), constant_values=-np.inf)
    for n in range(1):
        for c in range(2):
            for of in range(out.shape[2]):
                for oh in range(out.shape[3]):
                    for ow in range(out.shape[4]):
                        win = xp[n, c, of * 2:of * 2 + 3, oh * 2:oh * 2 + 3, ow * 2:ow * 2 + 3]
                        assert out.data[n, c, of, oh, ow] == win.max()


def test_avgpool_is_plain_mean(rng):
    x = Tensor(rng.normal(size=(2, 2048, 1, 4, 4)).astype(np.float32), requires_grad=True)
    out = ops.avgpool3d_adaptive(x)
    assert out.shape == (2, 2048, 1, 1, 1)
    expected = x.data.mean(axis=(2, 3, 4)).reshape(2, 2048, 1, 1, 1)
    assert np.allclose(out.data, expected, atol=1e-6)
    (gx,) = _sum_backward(lambda: ops.avgpool3d_adaptive(x), x)
    assert np.allclose(gx, 1.0 / 16.0)


# ---------------------------------------------------------------------------
# trilinear upsampling


def test_upsample_width_doubling_oracle():
    x = Tensor(np.array([0.0, 2.0], dtype=np.float32).reshape(1, 1, 1, 1, 2), requires_grad=True)
    out = ops.trilinear_upsample(x, (1, 1, 4))
    assert np.allclose(out.data.ravel(), [0.0, 0.5, 1.5, 2.0], atol=1e-6)
    (gx,) = _sum_backward(lambda: ops.trilinear_upsample(x, (1, 1, 4)), x)
    # adjoint of the interpolation matrix: each source feeds weight-sum 2
    assert np.allclose(gx.ravel(), [2.0, 2.0], atol=1e-6)


def test_upsample_same_extent_is_identity(rng):
    x = Tensor(rng.normal(size=(1, 2, 2, 3, 3)).astype(np.float32))
    out = ops.trilinear_upsample(x, (2, 3, 3))
    assert np.array_equal(out.data, x.data)


def test_upsample_frames_axis(rng):
    x = Tensor(np.array([0.0, 2.0], dtype=np.float32).reshape(1, 1, 2, 1, 1))
    out = ops.trilinear_upsample(x, (4, 1, 1))
    assert np.allclose(out.data.ravel(), [0.0, 0.5, 1.5, 2.0], atol=1e-6)


def test_upsample_validation():
    x = Tensor(np.zeros((1, 1, 2, 2, 2), dtype=np.float32))
    with pytest.raises(ValueError, match="must be >= 1"):
        ops.trilinear_upsample(x, (0, 2, 2))
    with pytest.raises(ValueError, match="rank 5"):
        ops.trilinear_upsample(Tensor(np.zeros((2, 2), dtype=np.float32)), (1, 1, 1))


# ---------------------------------------------------------------------------
# batchnorm


def test_batchnorm_standardizes_in_train_mode(rng):
    x = Tensor(rng.normal(2.0, 3.0, size=(4, 2, 2, 3, 3)).astype(np.float32))
    gamma = Tensor(np.ones(2, dtype=np.float32))
    beta = Tensor(np.zeros(2, dtype=np.float32))
    rm, rv = np.zeros(2, dtype=np.float32), np.ones(2, dtype=np.float32)
    out = ops.batchnorm3d(x, gamma, beta, rm, rv, training=True)
    got = out.data.reshape(4, 2, -1)
    for c in range(2):
        vals = got[:, c].ravel()
        assert abs(vals.mean()) < 1e-5
        assert abs(vals.var() - 1.0) < 1e-3


def test_batchnorm_affine_parameters_shift_and_scale(rng):
    x = Tensor(rng.normal(size=(2, 1, 2, 2, 2)).astype(np.float32))
    gamma = Tensor(np.array([2.0], dtype=np.float32))
    beta = Tensor(np.array([3.0], dtype=np.float32))
    rm, rv = np.zeros(1, dtype=np.float32), np.ones(1, dtype=np.float32)
    out = ops.batchnorm3d(x, gamma, beta, rm, rv, training=True)
    assert abs(out.data.mean() - 3.0) < 1e-5
    assert abs(out.data.std() - 2.0) < 2e-3


def test_batchnorm_running_stats_follow_ema(rng):
    x = Tensor(rng.normal(1.5, 2.0, size=(3, 2, 2, 2, 2)).astype(np.float32))
    gamma = Tensor(np.ones(2, dtype=np.float32))
    beta = Tensor(np.zeros(2, dtype=np.float32))
    rm = np.full(2, 10.0, dtype=np.float32)
    rv = np.full(2, 4.0, dtype=np.float32)
    ops.batchnorm3d(x, gamma, beta, rm, rv, training=True, momentum=0.1)
    batch_mean = x.data.mean(axis=(0, 2, 3, 4))
    batch_var = x.data.var(axis=(0, 2, 3, 4))  # biased
    assert np.allclose(rm, 0.9 * 10.0 + 0.1 * batch_mean, atol=1e-5)
    assert np.allclose(rv, 0.9 * 4.0 + 0.1 * batch_var, atol=1e-5)


def test_batchnorm_update_running_flag_freezes_buffers(rng):
    x = Tensor(rng.normal(size=(2, 1, 2, 2, 2)).astype(np.float32))
    gamma, beta = Tensor(np.ones(1, dtype=np.float32)), Tensor(np.zeros(1, dtype=np.float32))
    rm, rv = np.full(1, 7.0, dtype=np.float32), np.full(1, 5.0, dtype=np.float32)
    ops.batchnorm3d(x, gamma, beta, rm, rv, training=True, update_running=False)
    assert rm[0] == 7.0 and rv[0] == 5.0


def test_batchnorm_eval_uses_running_buffers():
    x = Tensor(np.full((1, 1, 1, 1, 2), 5.0, dtype=np.float32))
    gamma, beta = Tensor(np.ones(1, dtype=np.float32)), Tensor(np.zeros(1, dtype=np.float32))
    rm = np.array([3.0], dtype=np.float32)
    rv = np.array([4.0], dtype=np.float32)
    out = ops.batchnorm3d(x, gamma, beta, rm, rv, training=False)
    expected = (5.0 - 3.0) / math.sqrt(4.0 + 1e-5)
    assert np.allclose(out.data, expected, atol=1e-6)


def test_batchnorm_train_needs_two_samples():
    x = Tensor(np.zeros((1, 2, 1, 1, 1), dtype=np.float32))
    gamma, beta = Tensor(np.ones(2, dtype=np.float32)), Tensor(np.zeros(2, dtype=np.float32))
    rm, rv = np.zeros(2, dtype=np.float32), np.ones(2, dtype=np.float32)
    with pytest.raises(ValueError, match="at least 2 samples"):
        ops.batchnorm3d(x, gamma, beta, rm, rv, training=True)


def test_batchnorm_gradients_match_finite_differences(rng):
    x = Tensor(rng.normal(size=(3, 2, 2, 2, 2)).astype(np.float32), requires_grad=True)
    gamma = Tensor(rng.uniform(0.5, 1.5, 2).astype(np.float32), requires_grad=True)
    beta = Tensor(rng.normal(size=2).astype(np.float32), requires_grad=True)
    proj = rng.normal(size=(3, 2, 2, 2, 2)).astype(np.float32)

    def fn(x, gamma, beta):
        rm, rv = np.zeros(2, dtype=np.float32), np.ones(2, dtype=np.float32)
        out = ops.batchnorm3d(x, gamma, beta, rm, rv, training=True, update_running=False)
        return ops.sum_all(ops.mul(out, Tensor(proj)))

    report = grad_check(fn, [x, gamma, beta], rng=rng)
    assert report.passed, report.max_rel_error


# ---------------------------------------------------------------------------
# activations and classifier ops


def test_relu_oracle_and_zero_subgradient():
    x = Tensor(np.array([-1.0, 0.0, 2.0], dtype=np.float32), requires_grad=True)
    out = ops.relu(x)
    assert out.data.tolist() == [0.0, 0.0, 2.0]
    (gx,) = _sum_backward(lambda: ops.relu(x), x)
    assert gx.tolist() == [0.0, 0.0, 1.0]


def test_sigmoid_midpoint_and_strict_range():
    assert ops.sigmoid(Tensor(np.array([0.0], dtype=np.float32))).item() == 0.5
    hi = ops.sigmoid(Tensor(np.array([100.0], dtype=np.float32))).item()
    lo = ops.sigmoid(Tensor(np.array([-100.0], dtype=np.float32))).item()
    assert 0.0 < lo < hi < 1.0
    assert hi == float(np.nextafter(np.float32(1.0), np.float32(0.0)))


def test_sigmoid_gradient_peak():
    x = Tensor(np.array([0.0], dtype=np.float32), requires_grad=True)
    (gx,) = _sum_backward(lambda: ops.sigmoid(x), x)
    assert abs(gx[0] - 0.25) < 1e-7


def test_linear_oracle():
    x = Tensor(np.array([[1.0, 2.0, 3.0]], dtype=np.float32), requires_grad=True)
    w = Tensor(np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]], dtype=np.float32), requires_grad=True)
    b = Tensor(np.array([1.0, 2.0], dtype=np.float32), requires_grad=True)
    out = ops.linear(x, w, b)
    assert out.data.tolist() == [[5.0, 4.0]]
    gx, gw, gb = _sum_backward(lambda: ops.linear(x, w, b), x, w, b)
    assert gx.tolist() == [[1.0, 1.0, 1.0]]
    assert gw.tolist() == [[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]
    assert gb.tolist() == [1.0, 1.0]


def test_linear_validation():
    with pytest.raises(ValueError, match="rank 2"):
        ops.linear(Tensor(np.zeros(3, dtype=np.float32)), Tensor(np.zeros((2, 3), dtype=np.float32)))
    with pytest.raises(ValueError, match="bias shape"):
        ops.linear(
            Tensor(np.zeros((1, 3), dtype=np.float32)),
            Tensor(np.zeros((2, 3), dtype=np.float32)),
            Tensor(np.zeros(3, dtype=np.float32)),
        )


def test_cross_entropy_uniform_logits_is_log_k():
    logits = Tensor(np.zeros((2, 4), dtype=np.float32), requires_grad=True)
    loss = ops.softmax_cross_entropy(logits, np.array([0, 3]))
    assert abs(loss.item() - math.log(4.0)) < 1e-6


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    logits = Tensor(np.zeros((2, 4), dtype=np.float32), requires_grad=True)
    with Tape():
        loss = ops.softmax_cross_entropy(logits, np.array([0, 3]))
    backward(loss)
    expected = np.full((2, 4), 0.25)
    expected[0, 0] -= 1.0
    expected[1, 3] -= 1.0
    expected /= 2.0  # mean reduction
    assert np.allclose(logits.grad, expected, atol=1e-7)


def test_cross_entropy_confident_correct_is_near_zero():
    logits = Tensor(np.array([[10.0, 0.0, 0.0, 0.0]], dtype=np.float32))
    loss = ops.softmax_cross_entropy(logits, np.array([0]))
    assert 0.0 < loss.item() < 1e-3


def test_cross_entropy_label_validation():
    logits = Tensor(np.zeros((2, 4), dtype=np.float32))
    with pytest.raises(ValueError, match="labels shape"):
        ops.softmax_cross_entropy(logits, np.array([0]))
    with pytest.raises(ValueError, match="lie in"):
        ops.softmax_cross_entropy(logits, np.array([0, 4]))
    with pytest.raises(ValueError, match="integers"):
        ops.softmax_cross_entropy(logits, np.array([0.0, 1.0]))


# ---------------------------------------------------------------------------
# elementwise plumbing


def test_add_scalar_and_reshape_and_sum():
    x = Tensor(np.array([1.0, 2.0], dtype=np.float32), requires_grad=True)
    assert ops.add_scalar(x, 0.5).data.tolist() == [1.5, 2.5]
    r = ops.reshape(x, (2, 1))
    assert r.shape == (2, 1)
    (gx,) = _sum_backward(lambda: ops.reshape(x, (2, 1)), x)
    assert gx.tolist() == [1.0, 1.0]
    assert ops.sum_all(Tensor(np.ones((2, 2)))).item() == 4.0


def test_mul_gradients_swap_operands(rng):
    x = Tensor(np.array([2.0, 3.0], dtype=np.float32), requires_grad=True)
    y = Tensor(np.array([5.0, 7.0], dtype=np.float32), requires_grad=True)
    gx, gy = _sum_backward(lambda: ops.mul(x, y), x, y)
    assert gx.tolist() == [5.0, 7.0]
    assert gy.tolist() == [2.0, 3.0]


def test_add_shape_mismatch():
    with pytest.raises(ValueError, match="shapes"):
        ops.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


def test_mutate_backward_requires_known_op():
    with pytest.raises(ValueError, match="no backward mutation"):
        with ops.mutate_backward("sigmoid"):
            pass
