"""Forward-value oracles for the layer ops and autodiff graph mechanics."""

import numpy as np
import pytest

from voxsynth import ops
from voxsynth.ops import (
    OP_VERSIONS,
    add,
    concat_channels,
    conv3d,
    instance_norm,
    l1_loss,
    leaky_relu,
    scale,
    softmax_channels,
    softmax_cross_entropy,
    tconv3d,
    trilinear_upsample2x,
)
from voxsynth.tensor import Tensor, no_grad


def _t(values, requires_grad=False):
    return Tensor(np.asarray(values, dtype=np.float32), requires_grad=requires_grad)


def test_op_version_table_covers_every_differentiable_op():
    expected = {
        "conv3d", "tconv3d", "instance_norm", "leaky_relu", "add",
        "concat_channels", "scale", "trilinear_upsample2x", "l1_loss",
        "softmax_cross_entropy",
    }
    assert set(OP_VERSIONS) == expected
    assert all(isinstance(v, int) and v >= 1 for v in OP_VERSIONS.values())


def test_conv_with_identity_kernel_is_identity():
    rng = np.random.default_rng(0)
    x = _t(rng.normal(size=(1, 1, 4, 5, 6)))
    w = _t(np.ones((1, 1, 1, 1, 1)))
    y = conv3d(x, w)
    assert np.array_equal(y.values, x.values)


def test_conv_of_ones_with_ones_kernel_counts_the_window():
    x = _t(np.ones((1, 1, 5, 5, 5)))
    w = _t(np.ones((1, 1, 3, 3, 3)))
    y = conv3d(x, w)
    assert y.values.shape == (1, 1, 3, 3, 3)
    assert np.all(y.values == 27.0)


def test_conv_affine_on_constant_input():
    x = _t(np.full((1, 1, 3, 3, 3), 2.0))
    w = _t(np.full((1, 1, 1, 1, 1), 3.0))
    b = _t([1.0])
    y = conv3d(x, w, b)
    assert np.all(y.values == 7.0)


def test_conv_output_dims_follow_floor_formula():
    x = _t(np.zeros((1, 1, 9, 10, 11)))
    w = _t(np.zeros((2, 1, 3, 3, 3)))
    y = conv3d(x, w, stride=(2, 2, 2), padding=(1, 1, 1))
    expected = tuple((d + 2 - 3) // 2 + 1 for d in (9, 10, 11))
    assert y.values.shape == (1, 2) + expected


def test_conv_channel_mismatch_rejected():
    x = _t(np.zeros((1, 2, 4, 4, 4)))
    w = _t(np.zeros((1, 3, 1, 1, 1)))
    with pytest.raises(ValueError):
        conv3d(x, w)


def test_tconv_scatters_kernel_copies():
    x = _t(np.full((1, 1, 1, 1, 1), 5.0))
    w = _t(np.ones((1, 1, 2, 2, 2)))
    y = tconv3d(x, w, stride=(2, 2, 2))
    assert y.values.shape == (1, 1, 2, 2, 2)
    assert np.all(y.values == 5.0)


def test_tconv_stride2_doubles_dims_with_k2():
    x = _t(np.random.default_rng(1).normal(size=(1, 3, 4, 5, 6)))
    w = _t(np.random.default_rng(2).normal(size=(2, 3, 2, 2, 2)).astype(np.float32))
    y = tconv3d(x, w, stride=(2, 2, 2))
    assert y.values.shape == (1, 2, 8, 10, 12)


def test_tconv_is_adjoint_of_conv():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 2, 5, 5, 5)).astype(np.float64)
    w = rng.normal(size=(3, 2, 3, 3, 3)).astype(np.float64)
    y = conv3d(Tensor(x), Tensor(w), stride=(2, 2, 2), padding=(1, 1, 1))
    gy = rng.normal(size=y.values.shape).astype(np.float64)
    # adjoint: <conv(x), gy> == <x, conv_backward(gy)>
    xt = Tensor(x, requires_grad=True)
    y2 = conv3d(xt, Tensor(w), stride=(2, 2, 2), padding=(1, 1, 1))
    y2.backward(gy)
    lhs = float(np.sum(y.values * gy))
    rhs = float(np.sum(x * xt.grad))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_instance_norm_standardizes_then_affines():
    rng = np.random.default_rng(4)
    x = _t(rng.normal(3.0, 2.0, size=(2, 3, 4, 4, 4)), requires_grad=False)
    gamma = _t(np.full(3, 2.0))
    beta = _t(np.full(3, 5.0))
    y = instance_norm(x, gamma, beta)
    means = y.values.mean(axis=(2, 3, 4))
    stds = y.values.std(axis=(2, 3, 4))
    assert np.allclose(means, 5.0, atol=1e-4)
    assert np.allclose(stds, 2.0, atol=1e-3)


def test_instance_norm_rejects_single_voxel():
    with pytest.raises(ValueError):
        instance_norm(_t(np.zeros((1, 1, 1, 1, 1))), _t([1.0]), _t([0.0]))


def test_leaky_relu_values_and_slope():
    x = _t([[-1.0, 0.0, 2.0]])
    y = leaky_relu(x, slope=0.01)
    assert np.allclose(y.values, [[-0.01, 0.0, 2.0]])


def test_leaky_relu_gradient_uses_slope_on_negatives():
    x = _t(np.array([-2.0, 3.0]), requires_grad=True)
    y = leaky_relu(x, slope=0.01)
    y.backward(np.ones(2, dtype=np.float32))
    assert np.allclose(x.grad, [0.01, 1.0])


def test_add_and_scale_closed_forms():
    a = _t(np.full((2, 2), 1.5))
    b = _t(np.full((2, 2), 2.0))
    assert np.all(add(a, b).values == 3.5)
    assert np.all(scale(a, 2.0).values == 3.0)


def test_concat_stacks_channels_in_order():
    a = _t(np.zeros((1, 2, 2, 2, 2)))
    b = _t(np.ones((1, 3, 2, 2, 2)))
    y = concat_channels(a, b)
    assert y.values.shape == (1, 5, 2, 2, 2)
    assert np.all(y.values[:, :2] == 0.0)
    assert np.all(y.values[:, 2:] == 1.0)


def test_upsample_doubles_dims_and_preserves_constants():
    x = _t(np.full((1, 1, 3, 4, 5), 2.5))
    y = trilinear_upsample2x(x)
    assert y.values.shape == (1, 1, 6, 8, 10)
    assert np.allclose(y.values, 2.5)


def test_upsample_interpolates_midpoints_on_a_ramp():
    x = _t(np.arange(4, dtype=np.float32).reshape(1, 1, 1, 1, 4))
    y = trilinear_upsample2x(x)
    # align_corners=False: edges clamp, interior samples sit at quarter offsets
    assert np.allclose(y.values[0, 0, 0, 0], [0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0])


def test_upsample_backward_is_exact_adjoint():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(1, 2, 3, 4, 5)), requires_grad=True)
    y = trilinear_upsample2x(x)
    gy = rng.normal(size=y.values.shape)
    y.backward(gy)
    lhs = float(np.sum(y.values * gy))
    rhs = float(np.sum(x.values * x.grad))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_l1_loss_closed_form_and_gradient():
    pred = Tensor(np.full((2, 3), 1.5, dtype=np.float64), requires_grad=True)
    target = np.full((2, 3), 1.0)
    loss = l1_loss(pred, target)
    assert float(loss.values) == 0.5
    loss.backward()
    assert np.allclose(pred.grad, np.full((2, 3), 1.0 / 6.0))


def test_l1_loss_of_identical_inputs_is_zero():
    x = Tensor(np.random.default_rng(6).normal(size=(4, 4)))
    assert float(l1_loss(x, x.values).values) == 0.0


def test_cross_entropy_of_uniform_logits_is_log_c():
    logits = Tensor(np.zeros((2, 5, 2, 2, 2), dtype=np.float64), requires_grad=True)
    labels = np.zeros((2, 2, 2, 2), dtype=np.int64)
    loss = softmax_cross_entropy(logits, labels)
    assert float(loss.values) == pytest.approx(np.log(5.0), rel=1e-12)
    loss.backward()
    # gradient is (softmax - onehot)/n voxels
    n = labels.size
    g = logits.grad
    assert np.allclose(g[:, 0], (0.2 - 1.0) / n)
    assert np.allclose(g[:, 1:], 0.2 / n)


def test_cross_entropy_is_shift_invariant():
    rng = np.random.default_rng(7)
    raw = rng.normal(size=(1, 4, 3, 3, 3))
    labels = rng.integers(0, 4, size=(1, 3, 3, 3))
    a = softmax_cross_entropy(Tensor(raw), labels)
    b = softmax_cross_entropy(Tensor(raw + 1000.0), labels)
    assert float(a.values) == pytest.approx(float(b.values), rel=1e-9)


def test_softmax_channels_sums_to_one():
    rng = np.random.default_rng(8)
    p = softmax_channels(rng.normal(size=(1, 6, 2, 2, 2)))
    assert np.allclose(p.sum(axis=1), 1.0)
    assert p.min() >= 0.0


def test_diamond_graph_accumulates_both_paths():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = add(x, x)
    y.backward(np.array([1.0], dtype=np.float32))
    assert np.allclose(x.grad, [2.0])


def test_no_grad_blocks_graph_recording():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with no_grad():
        y = add(x, x)
    assert y._backward is None and not y.requires_grad
    y2 = add(x, x)
    assert y2.requires_grad


def test_backward_seed_defaults_to_ones():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = scale(x, 3.0)
    y.backward()
    assert np.allclose(x.grad, [3.0, 3.0])


def test_grad_accumulates_across_backward_calls_until_cleared():
    x = Tensor(np.array([1.0]), requires_grad=True)
    scale(x, 2.0).backward()
    scale(x, 2.0).backward()
    assert np.allclose(x.grad, [4.0])
    x.zero_grad()
    assert x.grad is None
