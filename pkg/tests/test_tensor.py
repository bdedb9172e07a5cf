#!/usr/bin/env python3
"""
Test for tensors, tape-based reverse mode and the primitive ops
"""

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from core import tensor as T
from core.errors import NonFiniteError, ShapeError, TapeError
from core.gradcheck import conv2d_reference
from core.tensor import Parameter, Tape, Tensor, finite_diff_grad, no_grad, precision


class TestTensor:
    """Test cases for Tensor and Parameter"""

    def test_tensor_is_read_only(self):
        t = Tensor(np.ones((2, 2)))
        with pytest.raises(ValueError):
            t.data[0, 0] = 5.0

    def test_empty_dimension_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((1, 0, 3)))

    def test_default_dtype_follows_precision(self):
        assert Tensor([1.0]).dtype == np.float32
        with precision(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32

    def test_ops_do_not_modify_inputs(self):
        x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
        before = x.data.copy()
        T.leaky_relu(T.neg(x))
        T.scale(x, 3.0)
        np.testing.assert_array_equal(x.data, before)

    def test_parameter_assign_checks_shape(self):
        p = Parameter(np.zeros((2, 3), dtype=np.float32))
        with pytest.raises(ShapeError):
            p.assign(np.zeros((3, 2)))

    def test_parameter_keeps_float64(self):
        p = Parameter(np.zeros(3))
        assert p.dtype == np.float64
        assert p.grad.dtype == np.float64

    def test_item_requires_single_element(self):
        assert Tensor(np.array(2.5)).item() == 2.5
        with pytest.raises(ShapeError):
            Tensor(np.ones(2)).item()


class TestTape:
    """Test cases for the reverse pass"""

    def test_square_gradient(self):
        p = Parameter(np.array([[1.0, -2.0, 3.0]]))
        with Tape() as tape:
            loss = T.mean_all(T.mul(p.value, p.value))
        tape.backward(loss)
        np.testing.assert_allclose(p.grad, 2.0 * p.value.data / 3.0)

    def test_gradients_accumulate_across_tapes(self):
        p = Parameter(np.array([1.0, 2.0]))
        for _ in range(2):
            with Tape() as tape:
                loss = T.mean_all(T.scale(p.value, 4.0))
            tape.backward(loss)
        np.testing.assert_allclose(p.grad, [4.0, 4.0])

    def test_zero_grad_resets(self):
        p = Parameter(np.array([1.0]))
        p.grad += 3.0
        p.zero_grad()
        assert p.grad[0] == 0.0

    def test_tape_is_single_use(self):
        p = Parameter(np.array([1.0]))
        with Tape() as tape:
            loss = T.mean_all(p.value)
        tape.backward(loss)
        with pytest.raises(TapeError):
            tape.backward(loss)
        with pytest.raises(TapeError):
            with tape:
                pass

    def test_backward_needs_scalar(self):
        p = Parameter(np.ones(3))
        with Tape() as tape:
            out = T.scale(p.value, 2.0)
        with pytest.raises(TapeError):
            tape.backward(out)

    def test_no_grad_records_nothing(self):
        p = Parameter(np.ones((1, 1, 2, 2)))
        with Tape() as tape:
            with no_grad():
                out = T.relu(p.value)
        assert len(tape) == 0
        assert not out.requires_grad

    def test_wrt_restricts_accumulation(self):
        a, b = Parameter(np.array([1.0])), Parameter(np.array([2.0]))
        with Tape() as tape:
            loss = T.mean_all(T.mul(a.value, b.value))
        tape.backward(loss, wrt=[a])
        assert a.grad[0] == pytest.approx(2.0)
        assert b.grad[0] == 0.0

    def test_detach_blocks_gradient(self):
        p = Parameter(np.array([3.0]))
        with Tape() as tape:
            loss = T.mean_all(T.mul(p.value, T.detach(p.value)))
        tape.backward(loss)
        assert p.grad[0] == pytest.approx(3.0)

    def test_non_finite_output_raises(self):
        x = Tensor(np.array([1.0]))
        with pytest.raises(NonFiniteError):
            T.scale(x, float("inf"))

    def test_finite_checks_can_be_disabled(self):
        T.set_finite_checks(False)
        out = T.scale(Tensor(np.array([1.0])), float("inf"))
        assert np.isinf(out.data[0])


class TestConvolution:
    """Test cases for conv2d"""

    @pytest.mark.parametrize("kh,kw,stride,dilation", [(1, 1, 1, 1), (3, 3, 1, 3), (3, 3, 2, 1), (1, 3, 1, 1)])
    def test_matches_reference_in_both_paths(self, rng, kh, kw, stride, dilation):
        x = rng.standard_normal((2, 3, 9, 9))
        w = rng.standard_normal((4, 3, kh, kw))
        b = rng.standard_normal(4)
        pad = (dilation * (kh - 1) // 2, dilation * (kw - 1) // 2)
        expected = conv2d_reference(x, w, b, stride, pad, dilation)
        with precision(np.float64):
            lean = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad, dilation)
            p = Parameter(w)
            with Tape():
                recorded = T.conv2d(Tensor(x), p.value, Tensor(b), stride, pad, dilation)
        np.testing.assert_allclose(lean.data, expected, atol=1e-10)
        np.testing.assert_allclose(recorded.data, expected, atol=1e-10)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3))))

    def test_output_must_be_non_empty(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    def test_weight_gradient_matches_finite_differences(self, rng):
        with precision(np.float64):
            x = Tensor(rng.standard_normal((1, 2, 5, 5)))
            w = Parameter(rng.standard_normal((3, 2, 3, 3)))

            def loss():
                return T.mean_all(T.mul(T.conv2d(x, w.value, pad=1), T.conv2d(x, w.value, pad=1)))

            with Tape() as tape:
                value = loss()
            tape.backward(value)
            numeric = finite_diff_grad(loss, w, indices=[(0, 0, 0, 0), (2, 1, 2, 1)])
        for idx in [(0, 0, 0, 0), (2, 1, 2, 1)]:
            assert w.grad[idx] == pytest.approx(numeric[idx], rel=1e-5, abs=1e-8)


class TestResampling:
    """Test cases for nearest upsampling, pixel shuffle and pooling"""

    def test_nearest_upsample_replicates(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        out = T.nearest_upsample(x, 2)
        assert out.shape == (1, 1, 4, 4)
        np.testing.assert_array_equal(out.data[0, 0, :2, :2], 1.0)
        np.testing.assert_array_equal(out.data[0, 0, 2:, 2:], 4.0)

    def test_pixel_shuffle_layout(self):
        x = Tensor(np.arange(4.0).reshape(1, 4, 1, 1))
        out = T.pixel_shuffle(x, 2)
        np.testing.assert_array_equal(out.data[0, 0], [[0.0, 1.0], [2.0, 3.0]])

    @settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(n=st.integers(1, 2), c=st.integers(1, 3), h=st.integers(1, 3), w=st.integers(1, 3), r=st.integers(1, 3))
    def test_unshuffle_inverts_shuffle(self, n, c, h, w, r):
        data = np.random.default_rng(0).standard_normal((n, c * r * r, h, w))
        x = Tensor(data, dtype=np.float64)
        back = T.pixel_unshuffle(T.pixel_shuffle(x, r), r)
        np.testing.assert_array_equal(back.data, data)

    def test_pixel_shuffle_channel_check(self):
        with pytest.raises(ShapeError):
            T.pixel_shuffle(Tensor(np.zeros((1, 3, 2, 2))), 2)

    def test_max_pool_tie_goes_to_first(self):
        p = Parameter(np.ones((1, 1, 2, 2)))
        with Tape() as tape:
            loss = T.mean_all(T.max_pool2d(p.value, 2))
        tape.backward(loss)
        np.testing.assert_array_equal(p.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


class TestElementwise:
    """Test cases for activations and reductions"""

    def test_leaky_relu_kink_uses_negative_slope(self):
        p = Parameter(np.array([0.0, 1.0, -1.0]))
        with Tape() as tape:
            loss = T.mean_all(T.scale(T.leaky_relu(p.value, 0.2), 3.0))
        tape.backward(loss)
        np.testing.assert_allclose(p.grad, [0.2, 1.0, 0.2])

    def test_sigmoid_is_stable(self):
        out = T.sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0]), dtype=np.float64))
        np.testing.assert_allclose(out.data, [0.0, 0.5, 1.0])

    def test_log_clamps_zero(self):
        out = T.log(Tensor(np.array([0.0]), dtype=np.float64))
        assert out.data[0] == pytest.approx(np.log(T.LOG_EPS))

    def test_add_broadcasts_scalar(self):
        out = T.add(Tensor(np.ones((2, 2))), Tensor(np.array(2.0)))
        np.testing.assert_array_equal(out.data, 3.0)

    def test_add_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.add(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 3))))

    def test_concat_gradient_splits(self):
        a, b = Parameter(np.ones((1, 1, 2, 2))), Parameter(np.ones((1, 2, 2, 2)))
        with Tape() as tape:
            out = T.concat_channels([a.value, b.value])
            loss = T.mean_all(out)
        tape.backward(loss)
        assert out.shape == (1, 3, 2, 2)
        np.testing.assert_allclose(a.grad, 1.0 / 12)
        np.testing.assert_allclose(b.grad, 1.0 / 12)

    def test_l1_value(self):
        out = T.l1(Tensor(np.array([1.0, 2.0])), Tensor(np.array([0.0, 4.0])))
        assert out.item() == pytest.approx(1.5)

    def test_finite_diff_requires_float64(self):
        p = Parameter(np.ones(2, dtype=np.float32))
        with pytest.raises(ValueError):
            finite_diff_grad(lambda: T.mean_all(p.value), p)

    def test_branch_patterns_recorded_in_order(self):
        x = Tensor(np.array([[[[-1.0, 2.0, 0.0, 3.0]]]]))
        with T.record_branches() as log:
            T.leaky_relu(x)
            T.relu(x)
            T.l1(x, Tensor(np.zeros((1, 1, 1, 4))))
        assert len(log) == 3
        np.testing.assert_array_equal(log[0], [[[[False, True, False, True]]]])
        np.testing.assert_array_equal(log[2], [[[[-1.0, 1.0, 0.0, 1.0]]]])
        T.relu(x)
        assert len(log) == 3
