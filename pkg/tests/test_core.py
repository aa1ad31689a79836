"""Tests for norms, clipping, finite differences, and seeded randomness."""

import math

import numpy as np
import pytest

from xmodal_uap.core import (
    PIXEL_MAX,
    PIXEL_MIN,
    SeededRng,
    clip_elementwise,
    derive_seed,
    finite_diff_input_grad,
    l1_norm,
    linf_norm,
    sign_elementwise,
)
from xmodal_uap.errors import ArgumentError, NumericalError


class TestNorms:
    def test_l1_of_zeros_is_zero(self):
        assert l1_norm(np.zeros((3, 4))) == 0.0

    def test_l1_hand_value(self):
        assert l1_norm(np.array([1.0, -2.0, 3.0])) == 6.0

    def test_l1_matches_loop_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            t = rng.normal(size=(4, 5)).astype(np.float32)
            oracle = math.fsum(abs(float(v)) for v in t.ravel())
            assert abs(l1_norm(t) - oracle) < 1e-9

    def test_linf_hand_value(self):
        assert linf_norm(np.array([1.0, -9.5, 3.0])) == 9.5

    def test_linf_of_empty_is_zero(self):
        assert linf_norm(np.array([])) == 0.0

    def test_norm_ordering(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            t = rng.normal(size=(3, 7))
            assert l1_norm(t) >= linf_norm(t) >= 0.0

    def test_l1_zero_iff_all_zero(self):
        t = np.zeros(6)
        assert l1_norm(t) == 0.0
        t[3] = 1e-30
        assert l1_norm(t) > 0.0


class TestClip:
    def test_scalar_style_clip(self):
        out = clip_elementwise(np.array([10.0]), 0.0, 8.0)
        assert out[0] == 8.0

    def test_interior_untouched(self):
        t = np.array([1.0, 2.0, 3.0])
        out = clip_elementwise(t, 0.0, 8.0)
        np.testing.assert_array_equal(out, t)

    def test_idempotent(self):
        rng = np.random.default_rng(3)
        t = rng.normal(scale=50.0, size=(6, 6))
        once = clip_elementwise(t, PIXEL_MIN, PIXEL_MAX)
        twice = clip_elementwise(once, PIXEL_MIN, PIXEL_MAX)
        np.testing.assert_array_equal(once, twice)

    def test_inverted_bounds_rejected(self):
        with pytest.raises(ArgumentError):
            clip_elementwise(np.array([1.0]), 5.0, -5.0)

    def test_projection_property_fuzz(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            t = rng.normal(scale=300.0, size=(4, 4))
            out = clip_elementwise(t, PIXEL_MIN, PIXEL_MAX)
            assert np.all(out >= PIXEL_MIN)
            assert np.all(out <= PIXEL_MAX)
            inside = (t >= PIXEL_MIN) & (t <= PIXEL_MAX)
            np.testing.assert_array_equal(out[inside], t[inside])


class TestSign:
    def test_hand_values(self):
        out = sign_elementwise(np.array([-3.2, 0.0, 7.1]))
        np.testing.assert_array_equal(out, [-1.0, 0.0, 1.0])

    def test_zeros(self):
        np.testing.assert_array_equal(sign_elementwise(np.zeros(4)), np.zeros(4))

    def test_idempotent_and_value_set(self):
        rng = np.random.default_rng(23)
        t = rng.normal(size=(5, 5))
        s = sign_elementwise(t)
        np.testing.assert_array_equal(sign_elementwise(s), s)
        assert set(np.unique(s)).issubset({-1.0, 0.0, 1.0})


class TestFiniteDiff:
    def test_sum_of_squares_gradient(self):
        def f(t):
            return float(np.sum(np.asarray(t, dtype=np.float64) ** 2))

        grad = finite_diff_input_grad(f, np.array([1.0, 2.0]), h=1e-4)
        np.testing.assert_allclose(grad, [2.0, 4.0], atol=1e-6)

    def test_constant_function(self):
        grad = finite_diff_input_grad(lambda t: 3.25, np.ones((2, 3)), h=1e-3)
        np.testing.assert_array_equal(grad, np.zeros((2, 3)))

    def test_linear_function_recovers_coefficients(self):
        rng = np.random.default_rng(29)
        coeffs = rng.normal(size=7)

        def f(t):
            return float(np.dot(coeffs, np.asarray(t, dtype=np.float64)))

        grad = finite_diff_input_grad(f, rng.normal(size=7), h=1e-3)
        np.testing.assert_allclose(grad, coeffs, atol=1e-8)

    def test_nonpositive_step_rejected(self):
        with pytest.raises(ArgumentError):
            finite_diff_input_grad(lambda t: 0.0, np.ones(2), h=0.0)

    def test_nonfinite_value_rejected(self):
        with pytest.raises(NumericalError):
            finite_diff_input_grad(lambda t: float("nan"), np.ones(2), h=1e-3)


class TestSeededRng:
    def test_equal_seeds_bit_identical(self):
        a = SeededRng(99).uniform(size=10**6)
        b = SeededRng(99).uniform(size=10**6)
        np.testing.assert_array_equal(a, b)

    def test_different_seeds_differ(self):
        a = SeededRng(1).uniform(size=100)
        b = SeededRng(2).uniform(size=100)
        assert not np.array_equal(a, b)

    def test_split_labels_decorrelate(self):
        root = SeededRng(7)
        a = root.split("alpha").uniform(size=100)
        b = root.split("beta").uniform(size=100)
        assert not np.array_equal(a, b)

    def test_split_is_reproducible(self):
        a = SeededRng(7).split("stage").normal(size=50)
        b = SeededRng(7).split("stage").normal(size=50)
        np.testing.assert_array_equal(a, b)

    def test_derive_seed_deterministic_and_bounded(self):
        s1 = derive_seed(7, "data")
        s2 = derive_seed(7, "data")
        assert s1 == s2
        assert 0 <= s1 < 2**63
        assert derive_seed(7, "data") != derive_seed(7, "train")
        assert derive_seed(7, "data") != derive_seed(8, "data")

    def test_passthrough_methods(self):
        rng = SeededRng(5)
        assert rng.integers(0, 10) in range(10)
        assert 0.0 <= rng.random() < 1.0
        perm = rng.permutation(8)
        assert sorted(perm.tolist()) == list(range(8))
        draws = rng.normal(size=1000)
        assert abs(float(np.mean(draws))) < 0.2
