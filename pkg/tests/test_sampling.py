import numpy as np
import pytest
from scipy.stats import chisquare

from bernoulli_ri import (
    AcceptanceCriterion,
    BudgetExhaustedError,
    DrawBudget,
    PropensityDesign,
    SupportSpec,
    bernoulli_draw,
    rejection_sample,
    uniform_conditional_proposal,
)
from bernoulli_ri.design import RandomizationError, UnsupportedCriterionError
from bernoulli_ri.rng import RngStream
from bernoulli_ri.sampling import (
    bernoulli_draws,
    count_cells,
    count_plan,
    factorized_rejection_sample,
    uniform_conditional_proposals,
)
from conftest import TABLE1_E, brute_distribution, brute_support

GOF_ALPHA = 1e-3


def _codes(W):
    return W.astype(np.int64) @ (1 << np.arange(W.shape[1] - 1, -1, -1))


def _gof(W, distribution):
    """Chi-square GOF of rows of ``W`` against ``{w: p}``."""
    keys = list(distribution)
    index = {int("".join(map(str, w)), 2): i for i, w in enumerate(keys)}
    counts = np.zeros(len(keys))
    for code, c in zip(*np.unique(_codes(W), return_counts=True)):
        counts[index[int(code)]] += c  # KeyError means a draw outside the support
    expected = np.array([distribution[w] for w in keys]) * W.shape[0]
    return chisquare(counts, expected).pvalue


class TestBernoulliDraws:
    def test_marginals(self):
        e = np.array(TABLE1_E)
        W = bernoulli_draws(PropensityDesign(e), RngStream(1), 200_000)
        se = np.sqrt(e * (1 - e) / W.shape[0])
        assert np.all(np.abs(W.mean(axis=0) - e) < 5 * se)

    def test_single_draw_shape(self):
        w = bernoulli_draw(PropensityDesign(np.array(TABLE1_E)), RngStream(1))
        assert w.shape == (10,) and set(np.unique(w)) <= {0, 1}

    def test_joint_distribution(self):
        e = [0.2, 0.5, 0.7, 0.9]
        W = bernoulli_draws(PropensityDesign(np.array(e)), RngStream(2), 100_000)
        assert _gof(W, brute_distribution(e)) > GOF_ALPHA


class TestRejectionSample:
    def test_fixed_total_goodness_of_fit(self):
        design = PropensityDesign(np.array(TABLE1_E))
        s = rejection_sample(design, SupportSpec.fixed_total(6), 200_000, RngStream(7))
        assert s.assignments.shape == (200_000, 10)
        assert np.all(s.assignments.sum(axis=1) == 6)
        assert _gof(s.assignments, brute_distribution(TABLE1_E, lambda w: sum(w) == 6)) > GOF_ALPHA

    def test_stratified_goodness_of_fit(self):
        # exercises the stratum-first early-rejection path
        e = [0.2, 0.4, 0.6, 0.8, 0.3, 0.7, 0.5]
        x = np.array([1, 1, 1, 2, 2, 2, 3])
        design = PropensityDesign(np.array(e), {"x": x})
        crit = (AcceptanceCriterion.stratum_treated("x", 1, 2) & AcceptanceCriterion.stratum_treated("x", 2, 1)
                & AcceptanceCriterion.total_treated(3))
        s = rejection_sample(design, crit, 60_000, RngStream(3))
        assert np.all(crit.accepts(s.assignments, design.covariates))

        def accept(w):
            return sum(w[:3]) == 2 and sum(w[3:6]) == 1 and sum(w) == 3

        assert _gof(s.assignments, brute_distribution(e, accept)) > GOF_ALPHA

    def test_acceptance_rate_matches_support_probability(self):
        design = PropensityDesign(np.array(TABLE1_E))
        s = rejection_sample(design, SupportSpec.fixed_total(6), 20_000, RngStream(4))
        p = SupportSpec.fixed_total(6).normalizer(design)
        se = np.sqrt(p * (1 - p) / s.attempts)
        assert abs(s.acceptance_rate - p) < 5 * se

    def test_deterministic(self):
        design = PropensityDesign(np.array(TABLE1_E))
        a = rejection_sample(design, SupportSpec.nondegenerate(), 5000, RngStream(9))
        b = rejection_sample(design, SupportSpec.nondegenerate(), 5000, RngStream(9))
        np.testing.assert_array_equal(a.assignments, b.assignments)
        assert a.attempts == b.attempts

    def test_budget_exhausted(self):
        design = PropensityDesign(np.full(20, 0.1))
        with pytest.raises(BudgetExhaustedError) as info:
            rejection_sample(design, SupportSpec.fixed_total(19), DrawBudget(10, 5000), RngStream(0))
        assert info.value.attempts == 5000
        assert info.value.accepted < 10

    def test_budget_validation(self):
        with pytest.raises(ValueError):
            DrawBudget(0)
        with pytest.raises(ValueError):
            DrawBudget(10, 5)
        assert DrawBudget(3).max_attempts == 3000


class TestFactorizedRejection:
    E = [0.2, 0.4, 0.6, 0.8, 0.3, 0.7, 0.5]
    X = np.array([1, 1, 1, 2, 2, 2, 3])

    def _design(self):
        return PropensityDesign(np.array(self.E), {"x": self.X})

    def test_same_distribution_as_joint_rejection(self):
        crit = AcceptanceCriterion.total_treated(4) & AcceptanceCriterion.stratum_treated("x", 1, 2)
        s = factorized_rejection_sample(self._design(), crit, 60_000, RngStream(8))
        assert np.all(crit.accepts(s.assignments, self._design().covariates))

        def accept(w):
            return sum(w) == 4 and sum(w[:3]) == 2

        assert _gof(s.assignments, brute_distribution(self.E, accept)) > GOF_ALPHA

    def test_free_remainder(self):
        crit = AcceptanceCriterion.stratum_treated("x", 2, 1)
        s = factorized_rejection_sample(self._design(), crit, 60_000, RngStream(9))
        assert _gof(s.assignments, brute_distribution(self.E, lambda w: sum(w[3:6]) == 1)) > GOF_ALPHA

    def test_cells(self):
        crit = AcceptanceCriterion.total_treated(4) & AcceptanceCriterion.stratum_treated("x", 1, 2)
        cells = count_cells(self._design(), crit)
        assert [(u.tolist(), c) for u, c in cells] == [([0, 1, 2], 2), ([3, 4, 5, 6], 2)]

    @pytest.mark.parametrize("crit", [
        AcceptanceCriterion.total_treated(2) & AcceptanceCriterion.total_treated(3),
        AcceptanceCriterion.total_treated(1) & AcceptanceCriterion.stratum_treated("x", 1, 3),
        AcceptanceCriterion.stratum_treated("x", 1, 1) & AcceptanceCriterion.stratum_treated("x", 1, 2),
    ])
    def test_unsatisfiable(self, crit):
        with pytest.raises(RandomizationError):
            count_cells(self._design(), crit)

    def test_deterministic(self):
        crit = AcceptanceCriterion.stratum_treated("x", 1, 1)
        a = factorized_rejection_sample(self._design(), crit, 500, RngStream(1))
        b = factorized_rejection_sample(self._design(), crit, 500, RngStream(1))
        np.testing.assert_array_equal(a.assignments, b.assignments)


class TestUniformProposals:
    def test_uniform_over_fixed_total(self):
        design = PropensityDesign(np.array([0.1, 0.3, 0.5, 0.6, 0.8, 0.9]))
        w_obs = np.array([1, 0, 1, 0, 1, 0])
        W = uniform_conditional_proposals(design, SupportSpec.fixed_total(3), w_obs, RngStream(5), 100_000)
        support = brute_support(6, lambda w: sum(w) == 3)
        assert _gof(W, {w: 1 / len(support) for w in support}) > GOF_ALPHA

    def test_uniform_within_strata(self):
        x = np.array([1, 1, 1, 2, 2, 2])
        design = PropensityDesign(np.full(6, 0.5), {"x": x})
        w_obs = np.array([1, 0, 0, 1, 1, 0])
        crit = AcceptanceCriterion.stratum_treated("x", 1, 1) & AcceptanceCriterion.stratum_treated("x", 2, 2)
        W = uniform_conditional_proposals(design, crit, w_obs, RngStream(6), 30_000)
        support = brute_support(6, lambda w: sum(w[:3]) == 1 and sum(w[3:]) == 2)
        assert len(support) == 9
        assert _gof(W, {w: 1 / 9 for w in support}) > GOF_ALPHA

    def test_free_units_are_fair_coins(self):
        x = np.array([1, 1, 2, 2])
        design = PropensityDesign(np.full(4, 0.5), {"x": x})
        crit = AcceptanceCriterion.stratum_treated("x", 1, 1)
        W = uniform_conditional_proposals(design, crit, np.array([1, 0, 0, 0]), RngStream(1), 40_000)
        support = brute_support(4, lambda w: sum(w[:2]) == 1)
        assert _gof(W, {w: 1 / len(support) for w in support}) > GOF_ALPHA

    def test_every_draw_satisfies_counts(self):
        rng = np.random.default_rng(3)
        x = rng.integers(1, 4, 30)
        design = PropensityDesign(rng.uniform(0.1, 0.9, 30), {"x": x})
        w_obs = (rng.random(30) < 0.5).astype(np.uint8)
        crit = AcceptanceCriterion.total_treated(int(w_obs.sum()))
        for v in (1, 2):
            crit = crit & AcceptanceCriterion.stratum_treated("x", v, int(w_obs[x == v].sum()))
        W = uniform_conditional_proposals(design, crit, w_obs, RngStream(0), 2000)
        assert np.all(crit.accepts(W, design.covariates))

    def test_single_proposal(self):
        design = PropensityDesign(np.array(TABLE1_E))
        w = uniform_conditional_proposal(design, SupportSpec.fixed_total(6),
                                         np.array([0, 1, 1, 0, 0, 1, 1, 1, 0, 1]), RngStream(2))
        assert w.sum() == 6

    def test_w_obs_must_satisfy_criterion(self):
        design = PropensityDesign(np.full(4, 0.5))
        with pytest.raises(ValueError):
            uniform_conditional_proposals(design, SupportSpec.fixed_total(1), np.array([1, 1, 0, 0]), 0, 5)

    def test_unsupported_criteria(self):
        design = PropensityDesign(np.full(4, 0.5), {"x": np.array([1, 1, 2, 2])})
        with pytest.raises(UnsupportedCriterionError):
            count_plan(design, SupportSpec.nondegenerate())
        with pytest.raises(UnsupportedCriterionError, match="overlap"):
            count_plan(design, AcceptanceCriterion.stratum_treated("x", 1, 1)
                       & AcceptanceCriterion.stratum_treated("x", 1.0, 2))

    def test_deterministic(self):
        design = PropensityDesign(np.array(TABLE1_E))
        w_obs = np.array([0, 1, 1, 0, 0, 1, 1, 1, 0, 1])
        a = uniform_conditional_proposals(design, SupportSpec.fixed_total(6), w_obs, RngStream(4), 100)
        b = uniform_conditional_proposals(design, SupportSpec.fixed_total(6), w_obs, RngStream(4), 100)
        np.testing.assert_array_equal(a, b)
