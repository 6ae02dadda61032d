import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lotest import estimators as est
from lotest.algebra import HypothesisSpec, RegressionSample, build_projection, l2o_residual, l3o_residual
from lotest.errors import DegenerateWeights, RepeatedIndices, TripleRankFailure
from oracles import BruteForce, null_variance_by_moments, random_instance

ENGINES = ["numpy", pytest.param("numba", marks=pytest.mark.skipif(
    not est._fastkernel.AVAILABLE, reason="numba not installed"))]


def grouped_design(rng, groups, n_cont=1, y=None):
    """Intercept, ``n_cont`` normal regressors and dummies for groups 1..G-1 (group 0 is the base)."""
    groups = np.asarray(groups)
    n = len(groups)
    G = groups.max() + 1
    D = (groups[:, None] == np.arange(1, G)[None, :]).astype(float)
    X = np.column_stack([np.ones(n), rng.standard_normal((n, n_cont)), D])
    y = rng.standard_normal(n) if y is None else y
    m = X.shape[1]
    hyp = HypothesisSpec.zero_coefficients(m, range(1 + n_cont, m))
    return build_projection(RegressionSample(y, X), hyp), hyp


# groups of size 2 and 3 force leave-three-out failures
FAILING_GROUPS = [0, 0, 0, 0, 1, 1, 2, 2, 2, 3, 3, 3, 3, 4, 4]


def intercept_only(y):
    y = np.asarray(y, dtype=float)
    return build_projection(RegressionSample(y, np.ones((len(y), 1))), HypothesisSpec([[1.0]], [0.0]))


class TestSigma:
    def test_hand_example(self):
        sig = est.sigma_loo(intercept_only([1, 2, 3]), demeaned=False)
        assert sig.sigma_hat[0] == pytest.approx(-1.5)

    def test_zero_outcome(self, small_cache):
        sig = est.sigma_loo(small_cache.with_outcome(np.zeros(small_cache.n)))
        np.testing.assert_array_equal(sig.sigma_hat, 0)
        assert est.location_estimate(small_cache, sig) == 0

    def test_unbiased_monte_carlo(self):
        rng = np.random.default_rng(20)
        n, m, draws = 20, 5, 100_000
        c, _ = random_instance(rng, n, m, 2)
        beta = rng.standard_normal(m)
        s2 = rng.uniform(0.5, 2.0, n)
        Y = c.X @ beta + np.sqrt(s2) * rng.standard_normal((draws, n))
        vals = est.sigma_loo(c, demeaned=False, Y=Y).sigma_hat
        se = vals.std(axis=0, ddof=1) / np.sqrt(draws)
        assert np.all(np.abs(vals.mean(axis=0) - s2) < 3.5 * se)

    def test_location_monte_carlo(self):
        rng = np.random.default_rng(21)
        n, m, draws = 20, 5, 100_000
        c, _ = random_instance(rng, n, m, 3)
        s2 = rng.uniform(0.5, 2.0, n)
        Y = c.X @ rng.standard_normal(m) + np.sqrt(s2) * rng.standard_normal((draws, n))
        vals = est.location_estimate(c, est.sigma_loo(c, demeaned=False, Y=Y))
        target = np.diag(c.B) @ s2
        assert abs(vals.mean() - target) < 3 * vals.std(ddof=1) / np.sqrt(draws)

    def test_homoskedastic_target_is_r_sigma2(self, small_cache):
        assert np.diag(small_cache.B).sum() == pytest.approx(small_cache.r)


class TestWeights:
    def test_single_restriction(self, small_cache):
        c = build_projection(RegressionSample(small_cache.y, small_cache.X),
                             HypothesisSpec.zero_coefficients(small_cache.m, [2]))
        np.testing.assert_array_equal(est.empirical_weights(c, est.sigma_loo(c)), [1.0])

    def test_homoskedastic_truth_gives_equal_weights(self, small_cache):
        sig = est.SigmaEstimates(np.full(small_cache.n, 2.0), False)
        np.testing.assert_allclose(est.empirical_weights(small_cache, sig), 0.5, atol=1e-12)

    def test_against_nonsymmetric_eigensolver(self):
        rng = np.random.default_rng(5)
        c, _ = random_instance(rng, 30, 8, 4)
        sig = est.sigma_loo(c, demeaned=False)
        e_hat = est.location_estimate(c, sig)
        SR = c.sxx_inv @ c.R.T
        middle = SR.T @ (c.X.T * sig.sigma_hat) @ c.X @ SR
        omega = np.linalg.inv(c.rxx) @ middle / e_hat
        ref = np.sort(np.linalg.eigvals(omega).real)
        np.testing.assert_allclose(np.sort(est.weight_eigenvalues(c, sig.sigma_hat) / e_hat), ref, atol=1e-8)

    def test_probability_vector(self, small_cache):
        w = est.empirical_weights(small_cache, est.sigma_loo(small_cache))
        assert np.all(w >= 0) and w.sum() == pytest.approx(1.0)

    def test_degenerate(self, small_cache):
        with pytest.raises(DegenerateWeights):
            est.empirical_weights(small_cache, est.SigmaEstimates(np.zeros(small_cache.n), True))


class TestUV:
    def test_shapes_and_symmetry(self, small_cache):
        uv = est.uv_weights(small_cache)
        np.testing.assert_allclose(uv.U, uv.U.T)
        np.testing.assert_allclose(uv.V, -uv.V.T)
        assert np.all(uv.U >= 0)
        assert not np.diag(uv.U).any() and not np.diag(uv.V).any()

    def test_balanced_design_has_no_V(self):
        uv = est.uv_weights(intercept_only([1.0, 4, 2, 3, 7]))
        np.testing.assert_allclose(uv.V, 0, atol=1e-15)

    def test_closed_form_matches_quadratic_form(self):
        rng = np.random.default_rng(8)
        c, _ = random_instance(rng, 14, 5, 3)
        s2 = rng.uniform(0.3, 3, 14)
        mu = c.X @ rng.standard_normal(5)
        assert est.null_variance(c, s2, mu) == pytest.approx(null_variance_by_moments(c, s2, mu), rel=1e-12)

    def test_closed_form_monte_carlo(self):
        rng = np.random.default_rng(9)
        n, m, r, draws = 10, 4, 2, 1_000_000
        c, hyp = random_instance(rng, n, m, r)
        beta = rng.standard_normal(m)
        beta[-r:] = 0
        s2 = rng.uniform(0.5, 2.0, n)
        mu = c.X @ beta
        stat = np.empty(draws)
        for start in range(0, draws, 100_000):
            eps = np.sqrt(s2) * rng.standard_normal((100_000, n))
            Y = mu + eps
            num = np.einsum("bi,ij,bj->b", eps, c.B, eps)
            e_hat = est.location_estimate(c, est.sigma_loo(c, demeaned=False, Y=Y))
            stat[start:start + 100_000] = num - e_hat
        centred = (stat - stat.mean()) ** 2
        target = est.null_variance(c, s2, mu)
        assert abs(centred.mean() - target) < 3 * centred.std(ddof=1) / np.sqrt(draws)


class TestVarianceProduct:
    def test_symmetry(self):
        rng = np.random.default_rng(12)
        c, _ = random_instance(rng, 12, 4, 2)
        P = np.array([est.variance_product_row(c, i) for i in range(c.n)])
        off = ~np.eye(c.n, dtype=bool)
        assert np.all(np.abs(P - P.T)[off] <= 1e-9 * (1 + np.abs(P)[off]))

    def test_zero_outcome(self, small_cache):
        c = small_cache.with_outcome(np.zeros(small_cache.n))
        assert est.variance_product(c, 0, 1) == 0

    def test_matches_refit_oracle(self, small_cache):
        bf = BruteForce(small_cache, demeaned=False)
        for i, j in [(0, 1), (3, 7), (11, 2)]:
            assert est.variance_product(small_cache, i, j) == pytest.approx(bf.product(i, j), rel=1e-9)

    def test_equal_indices(self, small_cache):
        with pytest.raises(RepeatedIndices):
            est.variance_product(small_cache, 2, 2)

    def test_rank_failure(self, rng):
        c, _ = grouped_design(rng, FAILING_GROUPS)
        with pytest.raises(TripleRankFailure):
            est.variance_product(c, 4, 5)


class TestVarianceEstimators:
    @pytest.mark.parametrize("engine", ENGINES)
    @pytest.mark.parametrize("demeaned", [False, True])
    def test_unbiased_matches_brute_force(self, engine, demeaned):
        c, _ = random_instance(np.random.default_rng(31), 11, 4, 2)
        got = est.vf_unbiased(c, demeaned, engine=engine)
        assert got.path is est.VariancePath.UNBIASED
        assert got.value == pytest.approx(BruteForce(c, demeaned).variance(robust=False), rel=1e-9)

    @pytest.mark.parametrize("engine", ENGINES)
    @pytest.mark.parametrize("demeaned", [False, True])
    def test_robust_matches_brute_force(self, engine, demeaned):
        c, _ = grouped_design(np.random.default_rng(32), FAILING_GROUPS)
        got = est.vf_general(c, demeaned, engine=engine)
        assert got.path is est.VariancePath.ROBUST
        assert got.value == pytest.approx(BruteForce(c, demeaned).variance(robust=True), rel=1e-9)
        assert got.diagnostics.failed_triples > 0 and got.diagnostics.biased_pairs > 0

    def test_engines_agree_with_diagnostics(self):
        c, _ = grouped_design(np.random.default_rng(33), FAILING_GROUPS + [1, 4, 0], n_cont=2)
        a = est.vf_general(c, engine="numpy")
        b = est.vf_general(c, engine="numba") if est._fastkernel.AVAILABLE else a
        assert a.value == pytest.approx(b.value, rel=1e-12)
        assert a.diagnostics == b.diagnostics

    def test_unbiased_raises_on_rank_failure(self, rng):
        c, _ = grouped_design(rng, FAILING_GROUPS)
        with pytest.raises(TripleRankFailure):
            est.vf_unbiased(c)

    @pytest.mark.parametrize("engine", ENGINES)
    def test_collapse_on_full_rank(self, engine):
        c, _ = random_instance(np.random.default_rng(34), 25, 6, 3)
        for demeaned in (False, True):
            g = est.vf_general(c, demeaned, engine=engine)
            assert g.value == est.vf_unbiased(c, demeaned, engine=engine).value
            assert g.diagnostics.failed_triples == 0 and g.diagnostics.rank_failure_fraction == 0

    def test_zero_outcome(self):
        c = intercept_only(np.zeros(6))
        assert est.vf_unbiased(c).value == 0

    def test_batch_matches_loop(self, small_cache, rng):
        Y = rng.standard_normal((4, small_cache.n))
        batch = est.vf_batch(small_cache, Y, demeaned=True, robust=True)
        loop = [est.vf_general(small_cache.with_outcome(y)).value for y in Y]
        np.testing.assert_allclose(batch, loop, rtol=1e-12)

    def test_batch_numpy_engine(self, small_cache, rng):
        Y = rng.standard_normal((3, small_cache.n))
        np.testing.assert_allclose(
            est.vf_batch(small_cache, Y, engine="numpy"), est.vf_batch(small_cache, Y), rtol=1e-11)

    def test_unknown_engine(self, small_cache):
        with pytest.raises(ValueError):
            est.vf_general(small_cache, engine="fortran")

    def test_location_invariance(self, small_cache):
        shifted = small_cache.with_outcome(small_cache.y + 7.0)
        for f in (lambda c: est.vf_general(c).value,
                  lambda c: est.location_estimate(c, est.sigma_loo(c)),
                  lambda c: est.vf_positive_fallback(c).value):
            assert f(shifted) == pytest.approx(f(small_cache), rel=1e-9)
        np.testing.assert_allclose(est.empirical_weights(shifted, est.sigma_loo(shifted)),
                                   est.empirical_weights(small_cache, est.sigma_loo(small_cache)), rtol=1e-9)

    def test_one_sided_bias_on_failing_design(self):
        rng = np.random.default_rng(35)
        c, _ = grouped_design(rng, FAILING_GROUPS, n_cont=1)
        n, draws = c.n, 40_000
        beta = np.r_[1.0, 0.5, np.zeros(c.m - 2)]
        s2 = rng.uniform(0.5, 2.0, n)
        mu = c.X @ beta
        Y = mu + np.sqrt(s2) * rng.standard_normal((draws, n))
        vals = est.vf_batch(c, Y, demeaned=False, robust=True)
        target = est.null_variance(c, s2, mu)
        assert vals.mean() - target >= -3 * vals.std(ddof=1) / np.sqrt(draws)


class TestFallback:
    def test_zero_demeaned_outcome(self):
        c = intercept_only(np.full(5, 3.0))
        assert est.vf_positive_fallback(c).value == 0

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_nonnegative(self, seed):
        c, _ = random_instance(np.random.default_rng(seed), 10, 3, 2)
        assert est.vf_positive_fallback(c).value >= 0

    def test_balanced_design_is_sum_of_positive_parts(self):
        c = intercept_only([1.0, 5, 2, 8, 3])
        uv = est.uv_weights(c)
        d2 = (c.y - c.y.mean()) ** 2
        assert est.vf_positive_fallback(c).value == pytest.approx(d2 @ np.maximum(uv.U, 0) @ d2)


class TestRankFailureHandling:
    def test_classify_degenerate(self):
        assert est.classify_triple(intercept_only([1, 2, 3]), 0, 1, 2) == (True, True, True, True)

    def test_classify_full_rank(self, small_cache):
        assert est.classify_triple(small_cache, 0, 1, 2) == (False, False, False, False)

    def test_classify_group_of_two(self, rng):
        c, _ = grouped_design(rng, FAILING_GROUPS)
        # observations 4 and 5 form group 1; observation 0 sits in the base group
        cause = est.classify_triple(c, 0, 4, 5)
        assert cause.failed and not cause.caused_by_i and cause.caused_by_j and cause.caused_by_k

    def test_classify_repeated(self, small_cache):
        with pytest.raises(RepeatedIndices):
            est.classify_triple(small_cache, 1, 1, 2)

    def test_bar_sigma_branches(self, rng):
        c, _ = grouped_design(rng, FAILING_GROUPS)
        y = c.y
        # branch 1
        assert est.bar_sigma(c, 0, 1, 13, demeaned=False) == pytest.approx(y[0] * l3o_residual(c, 0, 1, 13))
        # branch 2: the pair {4, 5} is a whole group
        via_j = est.bar_sigma(c, 0, 4, 5, demeaned=False)
        assert via_j == pytest.approx(y[0] * l2o_residual(c, 0, 4))
        assert via_j == pytest.approx(y[0] * l2o_residual(c, 0, 5), rel=1e-9)
        assert est.bar_sigma(c, 0, 5, 4, demeaned=False) == pytest.approx(via_j, rel=1e-9)
        # branch 3: observation 4 causes the failure of (4, 5, k)
        assert est.bar_sigma(c, 4, 5, 0, demeaned=False) == y[4] ** 2
        # pair version
        assert est.bar_sigma(c, 4, 5, 5, demeaned=False) == y[4] ** 2
        assert est.bar_sigma(c, 0, 4, 4, demeaned=False) == pytest.approx(y[0] * l2o_residual(c, 0, 4))
