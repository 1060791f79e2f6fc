#!/usr/bin/env python3
"""
Tensor Engine Tests
===================

Primitive forward values against brute-force loop oracles, tape semantics
and the finite-difference checker.
"""

import math
import pathlib
import sys

import numpy as np
import pytest

# Add the scripts directory to path
sys.path.insert(0, str(pathlib.Path(__file__).parent.parent / "scripts"))

import tensor_engine as te
from tensor_engine import ComputationTape, ConvWeights, ShapeError, TapeError, Tensor


def f64(array):
    return Tensor(array, dtype=np.float64)


def conv_oracle(x, kernel, bias, stride, padding, dilation, groups):
    n, c, h, w = x.shape
    o, cg, kh, kw = kernel.shape
    og = o // groups
    out_h = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    out_w = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, o, out_h, out_w))
    for b in range(n):
        for oc in range(o):
            g = oc // og
            for y in range(out_h):
                for z in range(out_w):
                    total = 0.0 if bias is None else bias[oc]
                    for ic in range(cg):
                        for i in range(kh):
                            for j in range(kw):
                                yy = y * stride - padding + i * dilation
                                zz = z * stride - padding + j * dilation
                                if 0 <= yy < h and 0 <= zz < w:
                                    total += kernel[oc, ic, i, j] * x[b, g * cg + ic, yy, zz]
                    out[b, oc, y, z] = total
    return out


def attention_oracle(q, k, v):
    out = np.zeros((q.shape[0], q.shape[1], v.shape[2]))
    scale = 1.0 / math.sqrt(q.shape[2])
    for b in range(q.shape[0]):
        for i in range(q.shape[1]):
            scores = [sum(q[b, i, d] * k[b, j, d] for d in range(q.shape[2])) * scale for j in range(k.shape[1])]
            top = max(scores)
            weights = [math.exp(s - top) for s in scores]
            total = sum(weights)
            for j in range(k.shape[1]):
                out[b, i] += weights[j] / total * v[b, j]
    return out


class TestTensor:
    def test_data_is_read_only_copy(self):
        source = np.ones((2, 2))
        t = Tensor(source)
        source[0, 0] = 5.0
        assert t.data[0, 0] == 1.0
        with pytest.raises(ValueError):
            t.data[0, 0] = 3.0

    def test_integer_input_uses_default_dtype(self):
        assert Tensor([1, 2, 3]).dtype == te.DEFAULT_DTYPE

    def test_item_requires_single_element(self):
        assert Tensor([[2.5]]).item() == 2.5
        with pytest.raises(ShapeError):
            Tensor([1.0, 2.0]).item()

    def test_as_dtype_keeps_gradient_flag(self):
        t = Tensor(np.zeros(3, np.float32), requires_grad=True)
        converted = te.as_dtype(t, np.float64)
        assert converted.dtype == np.float64 and converted.requires_grad


@pytest.mark.unit
def test_conv2d_matches_loop_oracle_on_random_instances():
    rng = np.random.default_rng(0)
    for trial in range(100):
        groups = int(rng.choice([1, 2]))
        c = groups * int(rng.integers(1, 3))
        o = groups * int(rng.integers(1, 3))
        k = int(rng.choice([1, 3]))
        h, w = rng.integers(3, 9, size=2)
        stride = int(rng.integers(1, 3))
        dilation = int(rng.integers(1, 3))
        padding = int(rng.integers(0, 3))
        if h + 2 * padding < dilation * (k - 1) + 1 or w + 2 * padding < dilation * (k - 1) + 1:
            continue
        x = rng.standard_normal((2, c, h, w))
        kernel = rng.standard_normal((o, c // groups, k, k))
        bias = rng.standard_normal(o) if trial % 2 else None
        weights = ConvWeights(f64(kernel), None if bias is None else f64(bias), stride, padding, dilation, groups)
        result = te.conv2d(f64(x), weights).data
        expected = conv_oracle(x, kernel, bias, stride, padding, dilation, groups)
        np.testing.assert_allclose(result, expected, atol=1e-9, rtol=0)


def test_conv2d_rejects_channel_mismatch_and_oversized_kernel():
    kernel = f64(np.ones((1, 2, 3, 3)))
    with pytest.raises(ShapeError):
        te.conv2d(f64(np.ones((1, 3, 5, 5))), ConvWeights(kernel))
    with pytest.raises(ShapeError):
        te.conv2d(f64(np.ones((1, 2, 2, 2))), ConvWeights(kernel))


def test_dilated_same_padding_keeps_spatial_size():
    x = f64(np.random.default_rng(1).standard_normal((1, 2, 9, 9)))
    out = te.conv2d(x, ConvWeights(f64(np.ones((3, 2, 3, 3))), padding=4, dilation=4))
    assert out.shape == (1, 3, 9, 9)


@pytest.mark.unit
def test_attention_matches_loop_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        tq, tk, d = rng.integers(1, 6, size=3)
        q = rng.standard_normal((2, tq, d))
        k = rng.standard_normal((2, tk, d))
        v = rng.standard_normal((2, tk, 3))
        result = te.scaled_dot_attention(f64(q), f64(k), f64(v)).data
        np.testing.assert_allclose(result, attention_oracle(q, k, v), atol=1e-9, rtol=0)


def test_attention_is_stable_for_large_scores():
    q = f64(np.full((1, 2, 4), 300.0))
    k = f64(np.full((1, 3, 4), 300.0))
    v = f64(np.arange(6.0).reshape(1, 3, 2))
    out = te.scaled_dot_attention(q, k, v).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out[0, 0], v.data[0].mean(axis=0))


def test_attention_rejects_mismatched_operands():
    with pytest.raises(ShapeError):
        te.scaled_dot_attention(f64(np.ones((1, 2, 3))), f64(np.ones((1, 2, 4))), f64(np.ones((1, 2, 4))))


class TestPooling:
    def test_max_pool_values(self):
        x = f64(np.arange(16.0).reshape(1, 1, 4, 4))
        out = te.pool2d(x, "max", 2, 2)
        np.testing.assert_array_equal(out.data[0, 0], [[5, 7], [13, 15]])

    def test_average_pool_counts_padding(self):
        x = f64(np.ones((1, 1, 2, 2)))
        out = te.pool2d(x, "avg", 3, 1, padding=1)
        np.testing.assert_allclose(out.data[0, 0], np.full((2, 2), 4.0 / 9.0))

    def test_max_pool_gradient_goes_to_argmax(self):
        x = f64(np.array([[[[1.0, 3.0], [2.0, 0.0]]]]))
        x = Tensor(x.data, requires_grad=True)
        with ComputationTape() as tape:
            loss = te.sum_(te.pool2d(x, "max", 2, 2))
        te.backward_pass(tape, loss)
        np.testing.assert_array_equal(tape.grad_array(x)[0, 0], [[0, 1], [0, 0]])

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            te.pool2d(f64(np.ones((1, 1, 2, 2))), "median", 2, 2)


class TestBilinear:
    def test_constant_input_stays_constant(self):
        out = te.bilinear_upsample(f64(np.full((1, 2, 3, 3), 0.7)), 2)
        assert out.shape == (1, 2, 6, 6)
        np.testing.assert_allclose(out.data, 0.7)

    def test_half_pixel_centres(self):
        x = f64(np.array([[[[0.0, 1.0]]]]))
        out = te.bilinear_resize(x, 1, 4)
        np.testing.assert_allclose(out.data[0, 0, 0], [0.0, 0.25, 0.75, 1.0])

    def test_factor_below_two_rejected(self):
        with pytest.raises(ShapeError):
            te.bilinear_upsample(f64(np.ones((1, 1, 2, 2))), 1)


class TestNormalize:
    def test_batch_norm_training_statistics(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 3, 5, 5)) * 2.0 + 1.0
        stats = te.RunningStats.fresh(3, np.float64)
        out = te.normalize(f64(x), "batch", f64(np.ones(3)), f64(np.zeros(3)), running_stats=stats)
        np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, atol=1e-3)
        count = 4 * 5 * 5
        unbiased = x.var(axis=(0, 2, 3)) * count / (count - 1)
        np.testing.assert_allclose(stats.mean, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(stats.var, 0.9 + 0.1 * unbiased)

    def test_batch_norm_eval_uses_running_statistics(self):
        stats = te.RunningStats(np.array([1.0]), np.array([4.0]))
        x = f64(np.full((1, 1, 2, 2), 3.0))
        out = te.normalize(x, "batch", f64([1.0]), f64([0.0]), training=False, running_stats=stats)
        np.testing.assert_allclose(out.data, 2.0 / math.sqrt(4.0 + 1e-5))

    def test_batch_norm_eval_without_statistics_fails(self):
        with pytest.raises(ValueError):
            te.normalize(f64(np.ones((1, 1, 2, 2))), "batch", f64([1.0]), f64([0.0]), training=False)

    def test_group_norm_per_group(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 4, 3, 3))
        out = te.normalize(f64(x), "group", f64(np.ones(4)), f64(np.zeros(4)), groups=2).data
        grouped = out.reshape(2, 2, -1)
        np.testing.assert_allclose(grouped.mean(axis=-1), 0.0, atol=1e-9)

    def test_group_count_must_divide_channels(self):
        with pytest.raises(ShapeError):
            te.normalize(f64(np.ones((1, 3, 2, 2))), "group", f64(np.ones(3)), f64(np.zeros(3)), groups=2)


class TestTape:
    def test_fan_out_gradients_accumulate(self):
        x = Tensor(np.array([1.5, -2.0]), requires_grad=True, dtype=np.float64)
        with ComputationTape() as tape:
            y = x * x + x * 3.0
            loss = te.sum_(y)
        te.backward_pass(tape, loss)
        np.testing.assert_allclose(tape.grad_array(x), 2 * x.data + 3.0)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with ComputationTape() as tape:
            y = x * 2.0
        with pytest.raises(TapeError):
            te.backward_pass(tape, y)

    def test_loss_from_another_tape_rejected(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with ComputationTape():
            loss = te.sum_(x)
        with pytest.raises(TapeError):
            te.backward_pass(ComputationTape(), loss)

    def test_unreached_tensor_has_zero_gradient(self):
        x = Tensor(np.ones(2), requires_grad=True)
        unused = Tensor(np.ones(3), requires_grad=True)
        with ComputationTape() as tape:
            loss = te.sum_(x)
        te.backward_pass(tape, loss)
        assert tape.grad(unused) is None
        np.testing.assert_array_equal(tape.grad_array(unused), np.zeros(3))

    def test_nothing_recorded_without_tape_or_watched_inputs(self):
        with ComputationTape() as tape:
            te.sum_(Tensor(np.ones(2)))
        assert tape.nodes == []

    def test_nested_tapes_record_on_innermost(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with ComputationTape() as outer:
            with ComputationTape() as inner:
                te.sum_(x)
        assert len(inner.nodes) == 1 and outer.nodes == []


def test_bce_with_logits_is_stable_and_exact():
    logits = f64(np.array([-40.0, 0.0, 40.0]))
    target = f64(np.array([0.0, 1.0, 1.0]))
    out = te.bce_with_logits(logits, target).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out[1], math.log(2.0))
    assert out[0] < 1e-15 and out[2] < 1e-15


def test_channel_slice_and_concat_round_trip():
    x = f64(np.random.default_rng(5).standard_normal((1, 5, 2, 2)))
    rebuilt = te.concat([te.channel_slice(x, 0, 2), te.channel_slice(x, 2, 5)])
    np.testing.assert_array_equal(rebuilt.data, x.data)
    with pytest.raises(ShapeError):
        te.channel_slice(x, 3, 7)


class TestFiniteDiffCheck:
    def test_smooth_function_passes(self):
        point = np.random.default_rng(6).standard_normal((3, 4))
        report = te.finite_diff_check(lambda t: te.sum_(te.activation(t, "sigmoid") * t), point)
        assert report.passed
        assert report.checked == 12

    def test_large_points_are_sampled(self):
        point = np.random.default_rng(7).standard_normal(1000)
        report = te.finite_diff_check(lambda t: te.sum_(te.square(t)), point)
        assert report.checked == 64 and report.passed

    def test_epsilon_range_enforced(self):
        with pytest.raises(ValueError):
            te.finite_diff_check(lambda t: te.sum_(t), np.ones(2), epsilon=0.1)

    def test_corrupted_backward_is_reported(self, mocker):
        def bad_square(x):
            return te._emit("square", (x,), x.data ** 2, lambda g: (g * x.data,))

        mocker.patch.object(te, "square", bad_square)
        report = te.finite_diff_check(lambda t: te.sum_(te.square(t)), np.array([1.0, 2.0, 3.0]))
        assert not report.passed
        assert report.failing_index is not None
