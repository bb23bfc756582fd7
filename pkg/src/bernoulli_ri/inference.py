"""Sharp-null randomization tests: statistics, hypotheses and p-value engines.

Each engine first builds a :class:`ReferenceDistribution` (the enumerated
support with exact probabilities, rejection-sampled draws, or weighted uniform
proposals) and then evaluates the test statistic over it.  Because building
the reference set does not depend on the hypothesised effect, test inversion
reuses one reference set for the whole grid.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from .design import (
    DEFAULT_ENUMERATION_LIMIT,
    ObservedStudy,
    SupportKind,
    SupportSpec,
    as_criterion,
    as_support,
    iter_support,
    kernel,
    log_kernel,
)
from .rng import RngStream, as_rng
from .sampling import (
    ATTEMPTS_PER_ACCEPT,
    BudgetExhaustedError,
    DrawBudget,
    count_plan,
    factorized_rejection_sample,
    rejection_sample,
    uniform_conditional_proposals,
)

DEFAULT_DRAWS = 10_000
DEFAULT_ALPHA = 0.05
# Monte Carlo work is split into fixed-size chunks, each on its own substream,
# so results do not depend on the number of worker threads.
MC_CHUNK = 8192


class Sidedness(str, Enum):
    TWO_SIDED = "two"
    UPPER = "upper"
    LOWER = "lower"


class Method(str, Enum):
    EXACT = "exact"
    REJECTION = "rejection"
    IMPORTANCE = "importance"


# ---------------------------------------------------------------------------
# Hypotheses and statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SharpHypothesis:
    """Additive unit-level effect ``Y_i(1) = Y_i(0) + tau``; ``tau = 0`` is the sharp null."""

    tau: float = 0.0

    def impute(self, study: ObservedStudy, w) -> np.ndarray:
        return impute_outcomes(study, self, w)

    def effect_removed(self, study: ObservedStudy) -> np.ndarray:
        """Outcomes with the hypothesised effect taken out: ``y_obs - tau * w_obs``.

        Equal to ``impute(w) - tau * w`` for every assignment ``w``.
        """
        return study.y_obs - self.tau * study.w_obs


def impute_outcomes(study: ObservedStudy, hyp: SharpHypothesis, w) -> np.ndarray:
    """Outcomes under assignment ``w`` implied by ``hyp``: ``y + tau (w - w_obs)``."""
    W = np.asarray(w)
    if W.shape[-1] != study.n_units:
        raise ValueError(f"assignment length {W.shape[-1]} != {study.n_units}")
    return study.y_obs + hyp.tau * (W.astype(float) - study.w_obs)


def _mean_difference_batch(outcomes: np.ndarray, W: np.ndarray) -> np.ndarray:
    Wf = W.astype(float)
    n_t = Wf.sum(axis=1)
    n_c = W.shape[1] - n_t
    treated = (Wf * outcomes).sum(axis=1)
    control = ((1.0 - Wf) * outcomes).sum(axis=1)
    degenerate = (n_t == 0) | (n_c == 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        t = treated / n_t - control / n_c
    t[degenerate] = 0.0
    return t


@dataclass(frozen=True)
class TestStatistic:
    """Named statistic ``t(outcomes, w)``.

    ``batch`` optionally evaluates one outcome vector against a 2-D batch of
    assignments; otherwise ``func`` is called row by row.
    """

    __test__ = False

    name: str
    func: Callable[[np.ndarray, np.ndarray], float]
    batch: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None

    def __call__(self, outcomes, w) -> float:
        return float(self.evaluate(np.asarray(outcomes, dtype=float), np.asarray(w)[None, :])[0])

    def evaluate(self, outcomes: np.ndarray, W: np.ndarray) -> np.ndarray:
        if self.batch is not None:
            return np.asarray(self.batch(outcomes, W), dtype=float)
        return np.fromiter((self.func(outcomes, row) for row in W), dtype=float, count=W.shape[0])


def mean_difference(outcomes, w) -> float:
    """Treated mean minus control mean; 0 when either group is empty."""
    return MEAN_DIFFERENCE(outcomes, w)


MEAN_DIFFERENCE = TestStatistic(
    "mean-diff",
    func=lambda y, w: float(_mean_difference_batch(y, w[None, :])[0]),
    batch=_mean_difference_batch,
)

STATISTICS: dict[str, TestStatistic] = {"mean-diff": MEAN_DIFFERENCE}


def register_statistic(stat: TestStatistic) -> TestStatistic:
    STATISTICS[stat.name] = stat
    return stat


def as_statistic(stat) -> TestStatistic:
    if stat is None:
        return MEAN_DIFFERENCE
    if isinstance(stat, TestStatistic):
        return stat
    if isinstance(stat, str):
        try:
            return STATISTICS[stat]
        except KeyError:
            raise KeyError(f"unknown statistic {stat!r}; registered: {sorted(STATISTICS)}") from None
    if callable(stat):
        return TestStatistic(getattr(stat, "__name__", "custom"), stat)
    raise TypeError(f"cannot use {stat!r} as a test statistic")


# ---------------------------------------------------------------------------
# Reports and reference distributions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PValueReport:
    p_value: float
    method: Method
    sidedness: Sidedness
    draws_used: int
    t_obs: float
    tau: float = 0.0
    mc_standard_error: float | None = None
    effective_sample_size: float | None = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "p_value": self.p_value,
            "method": self.method.value,
            "sidedness": self.sidedness.value,
            "draws_used": self.draws_used,
            "t_obs": self.t_obs,
            "tau": self.tau,
            "mc_standard_error": self.mc_standard_error,
            "effective_sample_size": self.effective_sample_size,
            "diagnostics": dict(self.diagnostics),
        }


def _extreme(t: np.ndarray, t_obs: float, sidedness: Sidedness) -> np.ndarray:
    # closed inequalities, no tolerance: t and t_obs come from the same code path
    if sidedness is Sidedness.TWO_SIDED:
        return np.abs(t) >= abs(t_obs)
    if sidedness is Sidedness.UPPER:
        return t >= t_obs
    return t <= t_obs


@dataclass(frozen=True, eq=False)
class ReferenceDistribution:
    """Assignments against which the observed statistic is compared.

    ``weights`` are exact probabilities (exact engine), self-normalised
    importance weights (importance engine) or ``None`` for equally weighted
    draws (rejection engine).
    """

    assignments: np.ndarray
    weights: np.ndarray | None
    method: Method
    draws_used: int
    diagnostics: dict = field(default_factory=dict)

    def statistic_values(self, study: ObservedStudy, hyp: SharpHypothesis, stat) -> tuple[float, np.ndarray]:
        stat = as_statistic(stat)
        y = hyp.effect_removed(study)
        t_obs = float(stat.evaluate(y, study.w_obs[None, :])[0])
        return t_obs, stat.evaluate(y, self.assignments)

    def p_value(
        self,
        study: ObservedStudy,
        hyp: SharpHypothesis | None = None,
        stat=None,
        sidedness: Sidedness | str = Sidedness.TWO_SIDED,
        add_one: bool = False,
    ) -> PValueReport:
        hyp = hyp or SharpHypothesis()
        sidedness = Sidedness(sidedness)
        t_obs, t = self.statistic_values(study, hyp, stat)
        hit = _extreme(t, t_obs, sidedness)
        diag = dict(self.diagnostics)
        if self.method is Method.EXACT:
            p = math.fsum(self.weights[hit])
            return PValueReport(min(max(p, 0.0), 1.0), self.method, sidedness, self.draws_used,
                                t_obs, hyp.tau, diagnostics=diag)
        m = self.assignments.shape[0]
        if self.method is Method.REJECTION:
            count = int(hit.sum())
            p = (count + 1) / (m + 1) if add_one else count / m
            se = math.sqrt(p * (1.0 - p) / m)
            diag["add_one"] = add_one
            return PValueReport(p, self.method, sidedness, self.draws_used, t_obs, hyp.tau,
                                mc_standard_error=se, diagnostics=diag)
        w = self.weights
        p = math.fsum(w[hit]) / math.fsum(w)
        p = min(max(p, 0.0), 1.0)
        # delta-method standard error of a self-normalised estimator
        se = math.sqrt(math.fsum(w**2 * (hit - p) ** 2)) / math.fsum(w)
        ess = math.fsum(w) ** 2 / math.fsum(w**2)
        return PValueReport(p, self.method, sidedness, self.draws_used, t_obs, hyp.tau,
                            mc_standard_error=se, effective_sample_size=ess, diagnostics=diag)


def exact_reference(
    study: ObservedStudy, support, limit: int = DEFAULT_ENUMERATION_LIMIT
) -> ReferenceDistribution:
    support = as_support(support)
    design = study.design
    W = np.concatenate(list(iter_support(design, support, limit)) or [np.zeros((0, design.n_units), np.uint8)])
    k = np.atleast_1d(kernel(design.propensities, W)) if W.shape[0] else np.zeros(0)
    z = math.fsum(k) if support.kind is SupportKind.CRITERION else support.normalizer(design, limit)
    if z <= 0.0:
        raise ValueError("support has zero probability")
    return ReferenceDistribution(W, k / z, Method.EXACT, W.shape[0], {"support": support.kind.value,
                                                                       "support_size": int(W.shape[0])})


def _chunks(m: int) -> list[tuple[int, int]]:
    return [(i, min(MC_CHUNK, m - start)) for i, start in enumerate(range(0, m, MC_CHUNK))]


def _map(fn, items, n_jobs: int):
    if n_jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, items))


def rejection_reference(
    study: ObservedStudy,
    criterion,
    m_draws: int = DEFAULT_DRAWS,
    rng: RngStream | int | None = None,
    budget: DrawBudget | None = None,
    n_jobs: int = 1,
    factorize: bool = False,
) -> ReferenceDistribution:
    """``m_draws`` rejection-sampled assignments, in fixed chunks on substreams.

    ``factorize`` samples each count cell separately (see
    :func:`factorized_rejection_sample`); it needs a count-structured criterion.
    """
    if m_draws < 1:
        raise ValueError("m_draws must be >= 1")
    crit = as_criterion(criterion)
    rng = as_rng(rng)
    budget = budget or DrawBudget(m_draws)
    per_accept = budget.max_attempts / budget.target_accepts
    design = study.design
    sampler = factorized_rejection_sample if factorize else rejection_sample

    def run(chunk):
        idx, size = chunk
        cap = max(size, int(round(per_accept * size)))
        try:
            return sampler(design, crit, DrawBudget(size, cap), rng.substream(idx))
        except BudgetExhaustedError as exc:
            return exc

    results = _map(run, _chunks(m_draws), n_jobs)
    accepted = sum(r.assignments.shape[0] if not isinstance(r, Exception) else r.accepted for r in results)
    attempts = sum(r.attempts for r in results)
    if any(isinstance(r, BudgetExhaustedError) for r in results):
        raise BudgetExhaustedError(accepted, attempts, m_draws)
    W = np.concatenate([r.assignments for r in results])
    return ReferenceDistribution(W, None, Method.REJECTION, m_draws,
                                 {"attempts": attempts, "acceptance_rate": m_draws / attempts,
                                  "factorized": factorize})


def importance_reference(
    study: ObservedStudy,
    criterion,
    m_draws: int = DEFAULT_DRAWS,
    rng: RngStream | int | None = None,
    n_jobs: int = 1,
) -> ReferenceDistribution:
    if m_draws < 1:
        raise ValueError("m_draws must be >= 1")
    crit = as_criterion(criterion)
    design = study.design
    count_plan(design, crit)  # fail fast on unsupported criteria
    rng = as_rng(rng)

    def run(chunk):
        idx, size = chunk
        return uniform_conditional_proposals(design, crit, study.w_obs, rng.substream(idx), size)

    W = np.concatenate(_map(run, _chunks(m_draws), n_jobs))
    lw = log_kernel(design.propensities, W)
    w = np.exp(lw - lw.max())
    w /= w.sum()
    return ReferenceDistribution(W, w, Method.IMPORTANCE, m_draws, {"proposal": "uniform-permutation"})


# ---------------------------------------------------------------------------
# Public engines
# ---------------------------------------------------------------------------


def exact_p_value(
    study: ObservedStudy,
    hyp: SharpHypothesis | None = None,
    stat=None,
    support: SupportSpec | None = None,
    sidedness: Sidedness | str = Sidedness.TWO_SIDED,
    limit: int = DEFAULT_ENUMERATION_LIMIT,
) -> PValueReport:
    """Exact randomization p-value by enumerating the support.

    Each assignment is weighted by its probability under the Bernoulli
    mechanism restricted to ``support`` (nondegenerate by default).
    """
    support = support if support is not None else SupportSpec.nondegenerate()
    return exact_reference(study, support, limit).p_value(study, hyp, stat, sidedness)


def rejection_p_value(
    study: ObservedStudy,
    hyp: SharpHypothesis | None = None,
    stat=None,
    criterion=None,
    m_draws: int = DEFAULT_DRAWS,
    rng: RngStream | int | None = None,
    sidedness: Sidedness | str = Sidedness.TWO_SIDED,
    add_one: bool = False,
    budget: DrawBudget | None = None,
    n_jobs: int = 1,
) -> PValueReport:
    """Monte Carlo p-value from ``m_draws`` rejection-sampled assignments.

    Unbiased for the conditional p-value. ``add_one`` counts the observed
    assignment as an extra draw (``(c + 1) / (M + 1)``).
    """
    criterion = criterion if criterion is not None else SupportSpec.nondegenerate()
    if budget is None:
        budget = DrawBudget(m_draws, ATTEMPTS_PER_ACCEPT * m_draws)
    ref = rejection_reference(study, criterion, m_draws, rng, budget, n_jobs)
    return ref.p_value(study, hyp, stat, sidedness, add_one=add_one)


def importance_p_value(
    study: ObservedStudy,
    hyp: SharpHypothesis | None = None,
    stat=None,
    criterion=None,
    m_draws: int = DEFAULT_DRAWS,
    rng: RngStream | int | None = None,
    sidedness: Sidedness | str = Sidedness.TWO_SIDED,
    n_jobs: int = 1,
) -> PValueReport:
    """Self-normalised importance-sampling p-value.

    Proposals are uniform over the acceptable set (within-stratum shuffles of
    ``w_obs``), weighted by their Bernoulli kernel. The estimator is
    consistent but biased at order ``1/M``.
    """
    if criterion is None:
        criterion = SupportSpec.fixed_total(study.n_treated)
    ref = importance_reference(study, criterion, m_draws, rng, n_jobs)
    return ref.p_value(study, hyp, stat, sidedness)


def build_reference(
    study: ObservedStudy,
    support,
    method: Method | str,
    m_draws: int = DEFAULT_DRAWS,
    rng: RngStream | int | None = None,
    limit: int = DEFAULT_ENUMERATION_LIMIT,
    n_jobs: int = 1,
) -> ReferenceDistribution:
    method = Method(method)
    if method is Method.EXACT:
        return exact_reference(study, support, limit)
    if method is Method.REJECTION:
        return rejection_reference(study, support, m_draws, rng, n_jobs=n_jobs)
    return importance_reference(study, support, m_draws, rng, n_jobs)
