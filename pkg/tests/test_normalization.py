"""Tests for instance norm, center pruning and batch norm."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from relward.core.errors import ArgumentError, DegenerateBatchError
from relward.core.filterbank import Spectrogram, SpectrogramStage
from relward.core.normalization import (
    BatchNormState,
    NormMode,
    batch_norm,
    batch_norm_backward,
    batch_norm_cached,
    center_slice,
    instance_norm,
    instance_norm_backward,
    instance_norm_cached,
    prune_center,
    prune_center_backward,
)


def random_state(rng, channels):
    return BatchNormState(
        rng.standard_normal(channels),
        rng.uniform(0.5, 2, channels),
        rng.standard_normal(channels),
        rng.standard_normal(channels),
    )


def finite_difference(fn, tensor, index, h=1e-6):
    original = tensor[index]
    tensor[index] = original + h
    up = fn()
    tensor[index] = original - h
    down = fn()
    tensor[index] = original
    return (up - down) / (2 * h)


class TestInstanceNorm:
    """Test per-row standardization."""

    def test_constant_row(self):
        """Test that a constant row maps to zeros."""
        z = instance_norm(Spectrogram(np.full((2, 7), 3.25)))
        assert not np.any(z.values)
        assert z.stage is SpectrogramStage.Z_NORMALIZED

    def test_hand_case(self):
        """Test [1, -1] -> +-1/sqrt(1.0001)."""
        z = instance_norm(Spectrogram(np.array([[1.0, -1.0]])), c=1e-4)
        np.testing.assert_allclose(z.values, [[0.99995, -0.99995]], rtol=0, atol=1e-8)

    def test_zero_mean(self, rng):
        """Test that each output row is centered."""
        z = instance_norm(Spectrogram(rng.standard_normal((80, 101)) * 5 + 3)).values
        assert np.max(np.abs(z.mean(axis=1))) < 1e-12

    @given(hnp.arrays(np.int64, (3, 8), elements=st.integers(-1000, 1000)), st.integers(-(2**20), 2**20))
    @settings(max_examples=50, deadline=None)
    def test_offset_invariance(self, values, offset):
        """Test that adding an offset leaves the output unchanged (eight columns keep the mean exact)."""
        y = values.astype(float)
        a = instance_norm(Spectrogram(y)).values
        b = instance_norm(Spectrogram(y + offset)).values
        np.testing.assert_array_equal(a, b)

    def test_single_frame_rejected(self):
        """Test that one frame carries no variance to normalize."""
        with pytest.raises(ArgumentError):
            instance_norm(Spectrogram(np.zeros((3, 1))))

    def test_backward_finite_difference(self, rng):
        """Test the gradient of a random readout."""
        y = rng.standard_normal((3, 6))
        dz = rng.standard_normal((3, 6))
        _, cache = instance_norm_cached(Spectrogram(y))
        dy = instance_norm_backward(dz, cache)

        def readout():
            return float(np.sum(dz * instance_norm(Spectrogram(y)).values))

        for index in [(0, 0), (1, 3), (2, 5)]:
            assert dy[index] == pytest.approx(finite_difference(readout, y, index), rel=1e-5, abs=1e-9)


class TestPruneCenter:
    """Test center-frame pruning."""

    def test_default_window(self):
        """Test that keep = 21 of 101 starts at column 40."""
        assert center_slice(101, 21) == slice(40, 61)

    def test_identity(self, rng):
        """Test that keep == t is the identity."""
        z = rng.standard_normal((4, 11))
        np.testing.assert_array_equal(prune_center(Spectrogram(z), 11).values, z)

    def test_single_column(self):
        """Test that keep = 1 picks column 50."""
        z = np.tile(np.arange(101.0), (2, 1))
        assert prune_center(Spectrogram(z), 1).values.tolist() == [[50.0], [50.0]]

    @pytest.mark.parametrize("keep", [0, 4, 103])
    def test_bad_keep(self, keep):
        """Test that keep must be odd and fit."""
        with pytest.raises(ArgumentError):
            center_slice(101, keep)

    def test_backward_scatters(self):
        """Test that gradients land on the kept columns only."""
        dz = np.ones((2, 3))
        out = prune_center_backward(dz, 7)
        assert out.tolist() == [[0, 0, 1, 1, 1, 0, 0]] * 2


class TestBatchNorm:
    """Test batch normalization in both modes."""

    def test_eval_hand_case(self):
        """Test 2 * 0.5 / sqrt(1 + 1e-4) + 1 with fresh statistics."""
        state = BatchNormState(np.zeros(1), np.ones(1), np.array([2.0]), np.array([1.0]))
        out = batch_norm(np.full((1, 1, 1, 1), 0.5), state, NormMode.EVAL)
        assert out[0, 0, 0, 0] == pytest.approx(1.99995, abs=1e-6)
        assert abs(out[0, 0, 0, 0] - (1.0 / np.sqrt(1.0001) + 1.0)) <= 1e-9

    def test_eval_is_fixed_affine(self, rng):
        """Test linearity of the eval map and that statistics stay put."""
        state = random_state(rng, 3)
        before = (state.running_mean.copy(), state.running_var.copy())
        a = rng.standard_normal((2, 3, 4, 5))
        b = rng.standard_normal((2, 3, 4, 5))
        f0 = batch_norm(np.zeros_like(a), state, NormMode.EVAL)
        lhs = batch_norm(0.3 * a + 0.7 * b, state, NormMode.EVAL) - f0
        rhs = 0.3 * (batch_norm(a, state, NormMode.EVAL) - f0) + 0.7 * (batch_norm(b, state, NormMode.EVAL) - f0)
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)
        np.testing.assert_array_equal(state.running_mean, before[0])
        np.testing.assert_array_equal(state.running_var, before[1])

    def test_train_standardizes(self, rng):
        """Test per-channel mean 0 and variance 1 before the affine part."""
        state = BatchNormState.fresh(4, c_bn=1e-12)
        q = rng.standard_normal((5, 4, 3, 6)) * 4 + 2
        out = batch_norm(q, state, NormMode.TRAIN)
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-10)

    def test_eval_with_matching_statistics(self, rng):
        """Test that eval with the batch's own statistics standardizes it."""
        q = rng.standard_normal((6, 2, 3, 4))
        state = BatchNormState(q.mean(axis=(0, 2, 3)), q.var(axis=(0, 2, 3)), np.ones(2), np.zeros(2))
        out = batch_norm(q, state, NormMode.EVAL)
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-3)

    def test_running_statistics_update(self, rng):
        """Test the momentum update of the running statistics."""
        state = BatchNormState.fresh(2, momentum=0.1)
        q = rng.standard_normal((3, 2, 2, 2)) + 1.0
        batch_norm(q, state, NormMode.TRAIN)
        np.testing.assert_allclose(state.running_mean, 0.1 * q.mean(axis=(0, 2, 3)), rtol=1e-15)
        np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * q.var(axis=(0, 2, 3)), rtol=1e-15)

    def test_untracked_statistics(self, rng):
        """Test that track_running_stats=False leaves the state alone."""
        state = BatchNormState.fresh(2)
        batch_norm_cached(rng.standard_normal((3, 2, 2, 2)), state, NormMode.TRAIN, track_running_stats=False)
        assert state.running_mean.tolist() == [0.0, 0.0]
        assert state.running_var.tolist() == [1.0, 1.0]

    def test_single_sample_train_batch(self):
        """Test that train mode needs two samples."""
        with pytest.raises(DegenerateBatchError):
            batch_norm(np.zeros((1, 2, 3, 3)), BatchNormState.fresh(2), NormMode.TRAIN)

    def test_channel_mismatch(self):
        """Test that the state must match the channel count."""
        with pytest.raises(ArgumentError):
            batch_norm(np.zeros((2, 3, 1, 1)), BatchNormState.fresh(2), NormMode.EVAL)

    @pytest.mark.parametrize("mode", [NormMode.TRAIN, NormMode.EVAL])
    def test_backward_finite_difference(self, rng, mode):
        """Test input, gamma and beta gradients of a random readout."""
        state = random_state(rng, 2)
        q = rng.standard_normal((3, 2, 2, 3))
        dout = rng.standard_normal(q.shape)
        _, cache = batch_norm_cached(q, state, mode, track_running_stats=False)
        dq, dgamma, dbeta = batch_norm_backward(dout, cache)

        def readout():
            out, _ = batch_norm_cached(q, state, mode, track_running_stats=False)
            return float(np.sum(dout * out))

        for index in [(0, 0, 0, 0), (1, 1, 1, 2), (2, 0, 1, 1)]:
            assert dq[index] == pytest.approx(finite_difference(readout, q, index), rel=1e-5, abs=1e-9)
        for c in range(2):
            assert dgamma[c] == pytest.approx(finite_difference(readout, state.gamma, c), rel=1e-5, abs=1e-9)
            assert dbeta[c] == pytest.approx(finite_difference(readout, state.beta, c), rel=1e-5, abs=1e-9)
