import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from rpnet.activation import (activation_map, compute_A, confidence_map, mask_by_label,
                              unified_activation, unify_channels)
from rpnet.tensor import ShapeError, Tensor

from oracles import channel_max_loop


class TestComputeA:
    def test_zero_features(self):
        np.testing.assert_array_equal(compute_A(np.zeros((3, 3, 4)), np.ones((4, 2))), 0)

    def test_hand_example(self):
        f = np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]
        np.testing.assert_array_equal(compute_A(f, np.array([[1.0]]))[..., 0], [[0.25, 0.5], [0.75, 1.0]])

    def test_negative_scores_clipped(self):
        f = np.array([[1.0, -2.0]])[..., None]
        np.testing.assert_array_equal(compute_A(f, np.array([[1.0]]))[..., 0], [[1.0, 0.0]])

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            compute_A(np.ones((2, 2, 3)), np.ones((4, 2)))

    @given(arrays(np.float64, (4, 5, 3), elements=st.floats(0, 5)),
           arrays(np.float64, (3, 2), elements=st.floats(-2, 2)))
    def test_peaks_exactly_one(self, f, th):
        A = compute_A(f, th)
        assert ((A >= 0) & (A <= 1)).all()
        for c in range(2):
            if A[..., c].any():
                assert A[..., c].max() == 1.0

    @given(arrays(np.float64, (3, 3, 2), elements=st.floats(0.01, 5)), st.floats(0.1, 100))
    def test_scale_invariant(self, f, k):
        th = np.array([[1.0, -0.5], [0.3, 2.0]])
        np.testing.assert_allclose(compute_A(k * f, th), compute_A(f, th), atol=1e-6)


class TestMaskByLabel:
    def test_all_ones_identity(self, rng):
        A = rng.random((3, 3, 3))
        np.testing.assert_array_equal(mask_by_label(A, [1, 1, 1]), A)

    def test_all_zeros(self, rng):
        np.testing.assert_array_equal(mask_by_label(rng.random((3, 3, 3)), [0, 0, 0]), 0)

    def test_partial_matches_loop(self, rng):
        A = rng.random((3, 4, 3))
        c = [1, 0, 1]
        want = np.zeros_like(A)
        for x in range(3):
            for y in range(4):
                for i in range(3):
                    want[x, y, i] = A[x, y, i] * c[i]
        np.testing.assert_array_equal(mask_by_label(A, c), want)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            mask_by_label(np.ones((2, 2, 3)), [1, 0])

    def test_activation_map_bundle(self, rng):
        am = activation_map(rng.random((3, 3, 2)), rng.normal(size=(2, 2)), [0, 1])
        assert not am.cam[..., 0].any()
        np.testing.assert_array_equal(am.cam[..., 1], am.A[..., 1])


class TestUnify:
    def test_zero_features(self, rng):
        O = unify_channels(Tensor(np.zeros((3, 3, 4))), Tensor(rng.normal(size=(1, 1, 4, 5))))
        np.testing.assert_array_equal(O.data, 0)

    def test_constant_passthrough(self):
        proj = np.zeros((1, 1, 3, 4))
        proj[0, 0, 0, 0] = 1
        O = unify_channels(Tensor(np.full((3, 3, 3), 5.0)), Tensor(proj))
        np.testing.assert_array_equal(O.data[..., 0], 1.0)

    def test_matches_two_step_oracle(self, rng):
        f = rng.normal(size=(4, 3, 5))
        proj = rng.normal(size=(1, 1, 5, 6))
        g = np.maximum(f / f.max(), 0)
        want = np.zeros((4, 3, 6))
        for x in range(4):
            for y in range(3):
                want[x, y] = g[x, y] @ proj[0, 0]
        np.testing.assert_allclose(unify_channels(Tensor(f), Tensor(proj)).data, want, atol=1e-6)

    def test_projection_shape_error(self):
        with pytest.raises(ShapeError):
            unify_channels(Tensor(np.ones((2, 2, 3))), Tensor(np.ones((1, 1, 4, 2))))


class TestConfidence:
    def test_single_channel_identity(self, rng):
        O = rng.normal(size=(3, 3, 1))
        np.testing.assert_array_equal(confidence_map(Tensor(O)).data, O)

    def test_definition(self):
        O = np.zeros((2, 2, 3))
        O[1, 0] = [1, 5, 3]
        assert confidence_map(Tensor(O)).data[1, 0, 0] == 5

    def test_random_matches_loop_and_dominates(self, rng):
        O = rng.normal(size=(4, 4, 6))
        c = confidence_map(Tensor(O)).data
        np.testing.assert_array_equal(c, channel_max_loop(O))
        assert (c >= O).all()

    def test_unified_activation_bundle(self, rng):
        ua = unified_activation(Tensor(rng.random((3, 3, 2))), Tensor(rng.normal(size=(1, 1, 2, 4))), 2)
        assert ua.block == 2 and ua.O.shape == (3, 3, 4) and ua.confidence.shape == (3, 3, 1)
