import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bernoulli_ri import (
    AcceptanceCriterion,
    ObservedStudy,
    PropensityDesign,
    SupportSpec,
    SupportTooLargeError,
    assignment_probability,
    enumerate_support,
    estimate_total_probability,
    kernel,
    poisson_binomial_pmf,
    register_predicate,
)
from bernoulli_ri.design import as_assignment, log_kernel, poisson_binomial_distribution
from bernoulli_ri.rng import RngStream
from conftest import (
    TABLE1_E,
    brute_distribution,
    brute_kernel,
    brute_poisson_binomial,
    nondegenerate,
)

propensity_vectors = st.lists(st.floats(0.01, 0.99), min_size=1, max_size=10)


class TestPropensityDesign:
    @pytest.mark.parametrize("bad", [[0.0, 0.5], [0.5, 1.0], [-0.1], [np.nan, 0.5]])
    def test_rejects_propensities_outside_open_interval(self, bad):
        with pytest.raises(ValueError):
            PropensityDesign(np.array(bad))

    def test_rejects_empty_design(self):
        with pytest.raises(ValueError):
            PropensityDesign(np.array([]))

    def test_covariate_length_checked(self):
        with pytest.raises(ValueError, match="covariate"):
            PropensityDesign(np.array([0.5, 0.5]), {"x": np.array([1, 2, 3])})

    def test_uniform(self):
        d = PropensityDesign.uniform(4, 0.3)
        assert d.n_units == 4
        np.testing.assert_array_equal(d.propensities, [0.3] * 4)

    def test_observed_study_validates_lengths(self):
        d = PropensityDesign.uniform(3)
        with pytest.raises(ValueError):
            ObservedStudy(d, np.array([0, 1]), np.array([1.0, 2.0, 3.0]))
        with pytest.raises(ValueError):
            ObservedStudy(d, np.array([0, 2, 1]), np.array([1.0, 2.0, 3.0]))

    def test_as_assignment_is_read_only(self):
        w = as_assignment([0, 1, 1])
        assert w.dtype == np.uint8
        with pytest.raises(ValueError):
            w[0] = 1


class TestKernel:
    @given(propensity_vectors, st.data())
    def test_matches_product(self, e, data):
        w = data.draw(st.lists(st.integers(0, 1), min_size=len(e), max_size=len(e)))
        assert kernel(np.array(e), np.array(w)) == pytest.approx(brute_kernel(e, w), rel=1e-12)

    def test_sums_to_one_over_all_assignments(self):
        W = np.array(list(itertools.product((0, 1), repeat=10)))
        assert math.fsum(kernel(np.array(TABLE1_E), W)) == pytest.approx(1.0, abs=1e-14)

    def test_log_space_for_many_units(self):
        rng = np.random.default_rng(0)
        e = rng.uniform(0.05, 0.95, 200)
        w = (rng.random(200) < 0.5).astype(np.uint8)
        expected = sum(math.log(p if b else 1 - p) for p, b in zip(e, w))
        assert log_kernel(e, w) == pytest.approx(expected, rel=1e-12)
        assert kernel(e, w) == pytest.approx(math.exp(expected), rel=1e-9)


class TestPoissonBinomial:
    @settings(max_examples=60, deadline=None)
    @given(propensity_vectors)
    def test_matches_brute_force(self, e):
        pmf = poisson_binomial_distribution(np.array(e))
        np.testing.assert_allclose(pmf, brute_poisson_binomial(e), atol=1e-12, rtol=0)

    @given(propensity_vectors)
    def test_is_a_distribution(self, e):
        pmf = poisson_binomial_distribution(np.array(e))
        assert np.all(pmf >= 0)
        assert math.fsum(pmf) == pytest.approx(1.0, abs=1e-12)

    def test_equal_propensities_reduce_to_binomial(self):
        pmf = poisson_binomial_distribution(np.full(12, 0.3))
        expected = [math.comb(12, k) * 0.3**k * 0.7 ** (12 - k) for k in range(13)]
        np.testing.assert_allclose(pmf, expected, atol=1e-14)

    def test_truncated_prefix(self):
        e = np.array(TABLE1_E)
        full = poisson_binomial_distribution(e)
        np.testing.assert_allclose(poisson_binomial_distribution(e, 4), full[:5])

    @pytest.mark.parametrize("k", [-1, 11])
    def test_pmf_out_of_range(self, k):
        with pytest.raises(ValueError):
            poisson_binomial_pmf(np.array(TABLE1_E), k)

    def test_pmf_table1(self):
        assert poisson_binomial_pmf(np.array(TABLE1_E), 6) == pytest.approx(
            brute_poisson_binomial(TABLE1_E)[6], abs=1e-15
        )


class TestCriteria:
    def test_nondegenerate_predicate(self):
        crit = AcceptanceCriterion.predicate("nondegenerate")
        W = np.array([[0, 0, 0], [1, 1, 1], [0, 1, 0]])
        np.testing.assert_array_equal(crit.accepts(W), [False, False, True])

    def test_stratum_count_with_string_value(self):
        cov = {"x": np.array([1.0, 1.0, 2.0, 2.0])}
        crit = AcceptanceCriterion.stratum_treated("x", "1", 1)
        assert crit.accepts(np.array([1, 0, 1, 1]), cov)
        assert not crit.accepts(np.array([1, 1, 0, 0]), cov)

    def test_stratum_in_categorical_column(self):
        cov = {"site": np.array(["a", "b", "a"], dtype=object)}
        crit = AcceptanceCriterion.stratum_treated("site", "a", 2)
        assert crit.accepts(np.array([1, 0, 1]), cov)

    def test_conjunction(self):
        cov = {"x": np.array([1, 1, 2, 2])}
        crit = AcceptanceCriterion.total_treated(2) & AcceptanceCriterion.stratum_treated("x", 1, 1)
        assert crit.is_count_structured
        assert crit.accepts(np.array([1, 0, 1, 0]), cov)
        assert not crit.accepts(np.array([1, 1, 0, 0]), cov)

    def test_registered_predicate(self):
        @register_predicate("first_treated")
        def first_treated(w, covariates):
            return w[0] == 1

        crit = AcceptanceCriterion.predicate("first_treated")
        assert not crit.is_count_structured
        np.testing.assert_array_equal(crit.accepts(np.array([[1, 0], [0, 1]])), [True, False])

    def test_unknown_predicate(self):
        with pytest.raises(KeyError):
            AcceptanceCriterion.predicate("nope").accepts(np.array([0, 1]))


class TestEnumeration:
    def test_lexicographic_order(self):
        W = enumerate_support(PropensityDesign.uniform(3), SupportSpec.full())
        assert ["".join(map(str, w)) for w in W] == [format(i, "03b") for i in range(8)]

    def test_fixed_total_order(self):
        W = enumerate_support(PropensityDesign.uniform(4), SupportSpec.fixed_total(2))
        codes = ["".join(map(str, w)) for w in W]
        assert codes == sorted(format(i, "04b") for i in range(16) if format(i, "04b").count("1") == 2)

    @pytest.mark.parametrize(
        "support,size", [(SupportSpec.nondegenerate(), 1022), (SupportSpec.fixed_total(6), 210),
                         (SupportSpec.full(), 1024)]
    )
    def test_table1_sizes(self, support, size):
        W = enumerate_support(PropensityDesign(np.array(TABLE1_E)), support)
        assert W.shape == (size, 10)
        assert len({w.tobytes() for w in W}) == size
        assert support.size(10) == size

    def test_too_large(self):
        with pytest.raises(SupportTooLargeError, match="rejection or importance"):
            enumerate_support(PropensityDesign.uniform(12), SupportSpec.full(), limit=1000)

    def test_fixed_total_requires_control_unit(self):
        with pytest.raises(ValueError):
            enumerate_support(PropensityDesign.uniform(4), SupportSpec.fixed_total(4))


class TestNormalizers:
    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0.02, 0.98), min_size=2, max_size=9))
    def test_against_brute_force(self, e):
        design = PropensityDesign(np.array(e))
        n = len(e)
        assert SupportSpec.full().normalizer(design) == 1.0
        nd = math.fsum(brute_kernel(e, w) for w in itertools.product((0, 1), repeat=n) if nondegenerate(w))
        assert SupportSpec.nondegenerate().normalizer(design) == pytest.approx(nd, abs=1e-12)
        k = n // 2
        ft = math.fsum(brute_kernel(e, w) for w in itertools.product((0, 1), repeat=n) if sum(w) == k)
        assert SupportSpec.fixed_total(k).normalizer(design) == pytest.approx(ft, abs=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.floats(0.02, 0.98), min_size=2, max_size=8), st.sampled_from(["full", "nd", "ft"]))
    def test_probabilities_sum_to_one(self, e, which):
        design = PropensityDesign(np.array(e))
        support = {"full": SupportSpec.full(), "nd": SupportSpec.nondegenerate(),
                   "ft": SupportSpec.fixed_total(1)}[which]
        total = math.fsum(assignment_probability(design, w, support) for w in enumerate_support(design, support))
        assert total == pytest.approx(1.0, abs=1e-10)

    def test_total_clause_equals_fixed_total(self):
        design = PropensityDesign(np.array(TABLE1_E))
        crit = SupportSpec.from_criterion(AcceptanceCriterion.total_treated(6))
        for w in enumerate_support(design, SupportSpec.fixed_total(6))[::17]:
            assert assignment_probability(design, w, crit) == pytest.approx(
                assignment_probability(design, w, SupportSpec.fixed_total(6)), rel=1e-12
            )

    def test_assignment_probability_matches_oracle(self):
        design = PropensityDesign(np.array(TABLE1_E))
        oracle = brute_distribution(TABLE1_E, nondegenerate)
        for w, p in list(oracle.items())[::50]:
            assert assignment_probability(design, np.array(w), SupportSpec.nondegenerate()) == pytest.approx(
                p, rel=1e-12
            )
        assert assignment_probability(design, np.zeros(10, int), SupportSpec.nondegenerate()) == 0.0


class TestTotalProbabilityEstimate:
    def test_within_four_standard_errors(self):
        e = np.array(TABLE1_E)
        est = estimate_total_probability(PropensityDesign(e), 6, 50_000, RngStream(11))
        exact = poisson_binomial_pmf(e, 6)
        assert abs(est.estimate - exact) < 4 * est.standard_error
        assert est.m_draws == 50_000

    def test_deterministic(self):
        d = PropensityDesign(np.array(TABLE1_E))
        a = estimate_total_probability(d, 4, 1000, RngStream(5))
        b = estimate_total_probability(d, 4, 1000, RngStream(5))
        assert a == b

    @pytest.mark.parametrize("k", [0, 10])
    def test_degenerate_counts_rejected(self, k):
        with pytest.raises(ValueError):
            estimate_total_probability(PropensityDesign(np.array(TABLE1_E)), k, 10, 0)
