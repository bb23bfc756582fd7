"""Randomization inference for Bernoulli-trial experiments with known,
unit-varying propensity scores."""

from .design import (
    DEFAULT_ENUMERATION_LIMIT,
    AcceptanceCriterion,
    ObservedStudy,
    PropensityDesign,
    RandomizationError,
    SupportKind,
    SupportSpec,
    SupportTooLargeError,
    UnsupportedCriterionError,
    assignment_probability,
    enumerate_support,
    estimate_total_probability,
    kernel,
    poisson_binomial_pmf,
    register_predicate,
)
from .inference import (
    MEAN_DIFFERENCE,
    Method,
    PValueReport,
    SharpHypothesis,
    Sidedness,
    TestStatistic,
    exact_p_value,
    importance_p_value,
    impute_outcomes,
    mean_difference,
    register_statistic,
    rejection_p_value,
)
from .inversion import InversionResult, TauGrid, invert_test
from .rng import RngStream
from .sampling import (
    BudgetExhaustedError,
    DrawBudget,
    bernoulli_draw,
    rejection_sample,
    uniform_conditional_proposal,
    uniform_conditional_proposals,
)

__version__ = "0.1.0"
