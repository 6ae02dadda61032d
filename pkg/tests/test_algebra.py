import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lotest.algebra import (
    HypothesisSpec,
    RegressionSample,
    Thresholds,
    build_projection,
    l2o_residual,
    l3o_residual,
    loo_residual,
    loo_residuals,
    pair_determinant,
    pair_determinants,
    triple_determinant,
    triple_determinant_slab,
)
from lotest.errors import (
    DimensionMismatch,
    EqualIndices,
    IndexOutOfRange,
    LeverageOne,
    PairRankFailure,
    RankDeficientDesign,
    RankDeficientRestriction,
    RepeatedIndices,
    TripleRankFailure,
)
from oracles import minor, random_instance, refit_residual


def intercept_only(y):
    y = np.asarray(y, dtype=float)
    return build_projection(RegressionSample(y, np.ones((len(y), 1))), HypothesisSpec([[1.0]], [0.0]))


class TestProjection:
    def test_matches_explicit_inverse(self, small_cache):
        c = small_cache
        X = c.X
        H = X @ np.linalg.inv(X.T @ X) @ X.T
        np.testing.assert_allclose(c.M, np.eye(c.n) - H, atol=1e-12)
        np.testing.assert_allclose(c.beta_hat, np.linalg.lstsq(X, c.y, rcond=None)[0], rtol=1e-10)

    def test_B_is_projection_of_rank_r(self, small_cache):
        c = small_cache
        np.testing.assert_allclose(c.B @ c.B, c.B, atol=1e-12)
        assert np.trace(c.B) == pytest.approx(c.r)
        np.testing.assert_allclose(c.M @ c.B, 0, atol=1e-12)

    def test_testing_all_coefficients_gives_hat_matrix(self, rng):
        X = rng.standard_normal((10, 3))
        c = build_projection(RegressionSample(rng.standard_normal(10), X), HypothesisSpec(np.eye(3), np.zeros(3)))
        np.testing.assert_allclose(c.B, np.eye(10) - c.M, atol=1e-12)

    def test_with_outcome_refits(self, small_cache, rng):
        y2 = rng.standard_normal(small_cache.n)
        c2 = small_cache.with_outcome(y2)
        np.testing.assert_allclose(c2.resid, small_cache.M @ y2)
        assert c2.sigma2_eps == pytest.approx(y2 @ small_cache.M @ y2 / (c2.n - c2.m))

    def test_rank_deficient_design(self):
        X = np.column_stack([np.ones(6), np.arange(6.0), 2 * np.arange(6.0)])
        with pytest.raises(RankDeficientDesign):
            build_projection(RegressionSample(np.arange(6.0), X), HypothesisSpec.zero_coefficients(3, [1]))

    def test_rank_deficient_restriction(self):
        with pytest.raises(RankDeficientRestriction):
            HypothesisSpec([[1.0, 0.0], [2.0, 0.0]], [0.0, 0.0])

    @pytest.mark.parametrize("shape", [(5, 5), (4, 6)])
    def test_needs_more_observations_than_regressors(self, shape):
        with pytest.raises(DimensionMismatch):
            RegressionSample(np.zeros(shape[0]), np.ones(shape))

    def test_restriction_width_must_match(self, rng):
        with pytest.raises(DimensionMismatch):
            build_projection(RegressionSample(rng.standard_normal(8), rng.standard_normal((8, 3))),
                             HypothesisSpec.zero_coefficients(2, [1]))

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            RegressionSample([1.0, np.nan, 2.0], np.ones((3, 1)))


class TestDeterminants:
    def test_intercept_only_pair(self):
        c = intercept_only([1, 2, 3])
        # M = I - J/3: D = (2/3)^2 - (1/3)^2
        assert pair_determinant(c, 0, 1) == pytest.approx(1 / 3)

    def test_intercept_only_triple_is_zero(self):
        c = intercept_only([1, 2, 3])
        assert triple_determinant(c, 0, 1, 2) == pytest.approx(0, abs=1e-14)

    def test_matrix_and_slab_agree_with_minors(self, small_cache):
        c = small_cache
        D2 = pair_determinants(c)
        for i in range(c.n):
            slab = triple_determinant_slab(c, i, D2)
            for j in range(c.n):
                if j != i:
                    assert D2[i, j] == pytest.approx(minor(c.M, (i, j)), abs=1e-13)
                for k in range(c.n):
                    if len({i, j, k}) == 3:
                        assert slab[j, k] == pytest.approx(minor(c.M, (i, j, k)), abs=1e-13)

    def test_index_errors(self, small_cache):
        with pytest.raises(EqualIndices):
            pair_determinant(small_cache, 1, 1)
        with pytest.raises(RepeatedIndices):
            triple_determinant(small_cache, 1, 2, 1)
        with pytest.raises(IndexOutOfRange):
            pair_determinant(small_cache, 0, small_cache.n)


class TestResiduals:
    def test_loo_hand_example(self):
        c = intercept_only([1, 2, 3])
        assert loo_residual(c, 0) == pytest.approx(-1.5)

    def test_zero_leverage_detected(self):
        X = np.column_stack([np.ones(4), [1.0, 0, 0, 0]])
        c = build_projection(RegressionSample([1.0, 2, 3, 4], X), HypothesisSpec.zero_coefficients(2, [1]))
        with pytest.raises(LeverageOne) as info:
            loo_residual(c, 0)
        assert info.value.indices == (0,)
        with pytest.raises(LeverageOne):
            loo_residuals(c)

    def test_l3o_rank_failure(self):
        c = intercept_only([1, 2, 3])
        with pytest.raises(TripleRankFailure):
            l3o_residual(c, 0, 1, 2)

    def test_l2o_rank_failure(self):
        # two observations alone in a dummy group
        X = np.column_stack([np.ones(5), [1.0, 1, 0, 0, 0]])
        c = build_projection(RegressionSample([1.0, 2, 3, 4, 6], X), HypothesisSpec.zero_coefficients(2, [1]))
        with pytest.raises(PairRankFailure):
            l2o_residual(c, 0, 1)

    def test_thresholds_are_configurable(self):
        c0 = intercept_only([1, 2, 3, 5])
        strict = Thresholds(d_pair=0.9)
        c = build_projection(RegressionSample(c0.y, c0.X), HypothesisSpec([[1.0]], [0.0]), strict)
        with pytest.raises(PairRankFailure):
            l2o_residual(c, 0, 1)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), n=st.integers(7, 14), m=st.integers(1, 4))
    def test_refit_equivalence(self, seed, n, m):
        rng = np.random.default_rng(seed)
        c, _ = random_instance(rng, n, m, 1)
        t = c.thresholds
        i, j, k = rng.choice(n, 3, replace=False)
        scale = max(1.0, np.abs(c.y).max())
        assert loo_residual(c, i) == pytest.approx(refit_residual(c.X, c.y, i, [i]), abs=1e-9 * scale)
        if pair_determinant(c, i, j) > t.d_pair:
            assert l2o_residual(c, i, j) == pytest.approx(refit_residual(c.X, c.y, i, [i, j]), abs=1e-9 * scale)
        if triple_determinant(c, i, j, k) > t.d_triple:
            assert l3o_residual(c, i, j, k) == pytest.approx(
                refit_residual(c.X, c.y, i, [i, j, k]), abs=1e-9 * scale)
