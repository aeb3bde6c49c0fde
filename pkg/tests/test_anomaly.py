import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedgeo.anomaly import (
    flag_outliers,
    robust_scores,
    sort_based_mad,
    sort_based_median,
)

score_vectors = st.lists(
    st.floats(min_value=-1e6, max_value=1e6, allow_nan=False), min_size=2, max_size=12
).map(np.array)


class TestRobustScores:
    def test_hand_case(self):
        d = np.array([1.0, 1.1, 0.9, 1.05, 5.0])
        scores = robust_scores(d, epsilon=1e-8)
        assert scores.median == 1.05
        assert abs(scores.mad - 0.05) < 1e-15
        expected_outlier = (5.0 - 1.05) / (0.05 + 1e-8)
        assert scores.zscores[4] == pytest.approx(expected_outlier)
        assert abs(scores.zscores[4] - 79.0) / 79.0 < 1e-5

    def test_all_equal(self):
        scores = robust_scores(np.full(6, 3.7))
        assert scores.mad == 0.0
        assert np.all(scores.zscores == 0.0)

    def test_formula_holds_exactly(self):
        rng = np.random.default_rng(0)
        d = rng.random(9)
        scores = robust_scores(d, epsilon=1e-8)
        recomputed = (d - scores.median) / (scores.mad + scores.epsilon)
        assert np.array_equal(scores.zscores, recomputed)

    @given(score_vectors, st.floats(-100.0, 100.0))
    @settings(max_examples=80, deadline=None)
    def test_translation_invariance(self, d, shift):
        base = robust_scores(d)
        shifted = robust_scores(d + shift)
        if base.mad >= 1e-3:
            assert np.all(np.abs(shifted.zscores - base.zscores) <= 1e-6)

    def test_scale_equivariance(self):
        # the epsilon effect is |z| * eps * (1 - 1/k) / (k*MAD + eps); the
        # 1e-6 bound applies to vectors with moderate z, like round
        # divergences away from degenerate MADs
        rng = np.random.default_rng(1)
        checked = 0
        for _ in range(300):
            d = rng.normal(2.0, 0.5, size=int(rng.integers(8, 13)))
            base = robust_scores(d)
            if base.mad < 0.1:
                continue
            k = float(rng.uniform(0.5, 2.0))
            scaled = robust_scores(k * d)
            assert np.all(np.abs(scaled.zscores - base.zscores) <= 1e-6)
            checked += 1
        assert checked > 200

    def test_scale_equivariance_algebraic_bound(self):
        # exact identity: z' - z = z * eps*(k-1) / (k*MAD + eps); check the
        # deviation never exceeds it (plus float slack) for arbitrary k
        rng = np.random.default_rng(7)
        for _ in range(200):
            d = rng.uniform(0.5, 5.0, size=int(rng.integers(3, 11)))
            base = robust_scores(d)
            if base.mad < 1e-12:
                continue
            k = float(rng.uniform(0.1, 10.0))
            scaled = robust_scores(k * d)
            eps = base.epsilon
            bound = np.abs(base.zscores) * eps * abs(k - 1.0) / (k * base.mad + eps)
            slack = 1e-7 * np.abs(base.zscores) + 1e-12
            assert np.all(np.abs(scaled.zscores - base.zscores) <= bound + slack)

    def test_one_planted_outlier_is_unique_max(self):
        # z is strictly increasing in the divergence, so planting
        # median + 10*MAD above every other entry must win
        rng = np.random.default_rng(2)
        for _ in range(200):
            d = rng.standard_normal(int(rng.integers(5, 13)))
            base = robust_scores(d)
            if base.mad <= 0.0:
                continue
            planted = d.copy()
            target = int(np.argmax(d))
            planted[target] = base.median + 10.0 * base.mad
            z = robust_scores(planted).zscores
            assert np.argmax(z) == target
            assert np.sum(z == z.max()) == 1

    @given(score_vectors)
    @settings(max_examples=100, deadline=None)
    def test_median_mad_match_sort_reference(self, d):
        scores = robust_scores(d)
        assert scores.median == sort_based_median(d)
        assert scores.mad == sort_based_mad(d)

    def test_requires_two_clients(self):
        with pytest.raises(ValueError):
            robust_scores(np.array([1.0]))

    def test_requires_positive_epsilon(self):
        with pytest.raises(ValueError):
            robust_scores(np.array([1.0, 2.0]), epsilon=0.0)


class TestFlagOutliers:
    def test_hand_case(self):
        scores = robust_scores(np.array([1.0, 1.1, 0.9, 1.05, 5.0]), epsilon=1e-8)
        assert flag_outliers(scores, threshold=3.5) == [4]

    def test_all_equal_flags_nothing(self):
        scores = robust_scores(np.full(5, 2.0))
        assert flag_outliers(scores, threshold=1.0) == []

    def test_sorted_descending_by_z(self):
        scores = robust_scores(np.array([1.0, 1.01, 0.99, 30.0, 60.0]))
        assert flag_outliers(scores, threshold=3.5) == [4, 3]

    def test_zero_threshold_forbidden(self):
        scores = robust_scores(np.array([1.0, 2.0]))
        with pytest.raises(ValueError):
            flag_outliers(scores, threshold=0.0)
