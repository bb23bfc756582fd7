"""Assignment samplers: unconditional Bernoulli draws, rejection sampling
from ``P(W | criterion)``, and uniform proposals over count-constrained sets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .design import (
    AcceptanceCriterion,
    PropensityDesign,
    RandomizationError,
    StratumTreated,
    TotalTreated,
    UnsupportedCriterionError,
    as_assignment,
    as_criterion,
)
from .rng import RngStream, as_rng

ATTEMPTS_PER_ACCEPT = 1000
_MAX_BATCH_CELLS = 1 << 23


class BudgetExhaustedError(RandomizationError):
    """Rejection sampling ran out of attempts before collecting enough draws."""

    def __init__(self, accepted: int, attempts: int, target: int):
        self.accepted = accepted
        self.attempts = attempts
        self.target = target
        super().__init__(
            f"rejection budget exhausted: {accepted}/{target} assignments accepted after "
            f"{attempts} attempts; the acceptance criterion may be too stringent"
        )


@dataclass(frozen=True)
class DrawBudget:
    target_accepts: int
    max_attempts: int | None = None

    def __post_init__(self):
        if self.target_accepts < 1:
            raise ValueError("target_accepts must be >= 1")
        if self.max_attempts is None:
            object.__setattr__(self, "max_attempts", ATTEMPTS_PER_ACCEPT * self.target_accepts)
        if self.max_attempts < self.target_accepts:
            raise ValueError("max_attempts must be >= target_accepts")


@dataclass(frozen=True)
class RejectionSample:
    assignments: np.ndarray
    attempts: int

    @property
    def acceptance_rate(self) -> float:
        return self.assignments.shape[0] / self.attempts


def bernoulli_draws(design: PropensityDesign, rng: RngStream | int | None, size: int) -> np.ndarray:
    """``size`` independent assignments, unit ``i`` treated with probability ``e_i``."""
    gen = as_rng(rng).generator
    u = gen.random((size, design.n_units))
    return (u < design.propensities).astype(np.uint8)


def bernoulli_draw(design: PropensityDesign, rng: RngStream | int | None) -> np.ndarray:
    return bernoulli_draws(design, rng, 1)[0]


def _draw_and_filter(design: PropensityDesign, crit: AcceptanceCriterion, rng: RngStream, batch: int):
    """Bernoulli draws plus indices of accepted rows.

    Bits are independent across units, so stratum units can be drawn first and
    rows failing a stratum count dropped before the other units are drawn; the
    surviving rows have exactly the distribution of filtered full draws.
    """
    strata = [c for c in crit.clauses if isinstance(c, StratumTreated)]
    if not crit.clauses:
        return bernoulli_draws(design, rng, batch), np.arange(batch)
    if not strata:
        W = bernoulli_draws(design, rng, batch)
        return W, np.flatnonzero(crit.accepts(W, design.covariates))
    gen = rng.generator
    e = design.propensities
    W = np.zeros((batch, design.n_units), dtype=np.uint8)
    alive = np.arange(batch)
    drawn = np.zeros(design.n_units, dtype=bool)
    for clause in strata:
        units = np.flatnonzero(clause.mask(design.covariates) & ~drawn)
        drawn[units] = True
        bits = (gen.random((alive.size, units.size)) < e[units]).astype(np.uint8)
        W[np.ix_(alive, units)] = bits
        alive = alive[clause.evaluate(W[alive], design.covariates)]
    rest = np.flatnonzero(~drawn)
    if rest.size and alive.size:
        W[np.ix_(alive, rest)] = gen.random((alive.size, rest.size)) < e[rest]
    if alive.size:
        alive = alive[crit.accepts(W[alive], design.covariates)]
    return W, alive


def rejection_sample(
    design: PropensityDesign,
    criterion,
    budget: DrawBudget | int,
    rng: RngStream | int | None,
) -> RejectionSample:
    """Draw from the Bernoulli mechanism and keep assignments the criterion accepts.

    Accepted rows are i.i.d. from ``P(W | criterion(W, X) = 1)``. Raises
    :class:`BudgetExhaustedError` if ``budget.max_attempts`` draws do not yield
    ``budget.target_accepts`` acceptances.
    """
    crit = as_criterion(criterion)
    if not isinstance(budget, DrawBudget):
        budget = DrawBudget(int(budget))
    rng = as_rng(rng)
    target, cap = budget.target_accepts, budget.max_attempts
    max_batch = max(1, _MAX_BATCH_CELLS // design.n_units)
    kept: list[np.ndarray] = []
    accepted = attempts = 0
    while accepted < target:
        if attempts >= cap:
            raise BudgetExhaustedError(accepted, attempts, target)
        rate = (accepted + 1) / (attempts + 2)
        batch = int(1.1 * (target - accepted) / rate) + 64
        batch = min(batch, max_batch, cap - attempts)
        W, idx = _draw_and_filter(design, crit, rng, batch)
        need = target - accepted
        if idx.size >= need:
            kept.append(W[idx[:need]])
            attempts += int(idx[need - 1]) + 1
            accepted = target
        else:
            kept.append(W[idx])
            attempts += batch
            accepted += idx.size
    return RejectionSample(np.concatenate(kept), attempts)


def count_cells(design: PropensityDesign, criterion) -> list[tuple[np.ndarray, int | None]]:
    """Disjoint unit cells with their required treated count (``None``: free).

    Raises :class:`RandomizationError` when the counts cannot all hold.
    """
    crit = as_criterion(criterion)
    cells = count_plan(design, crit)
    totals = {c.count for c in crit.clauses if isinstance(c, TotalTreated)}
    strata = {}
    for c in crit.clauses:
        if isinstance(c, StratumTreated):
            strata.setdefault((c.column, str(c.value)), set()).add(c.count)
    if len(totals) > 1 or any(len(v) > 1 for v in strata.values()):
        raise RandomizationError("criterion asks for conflicting treated counts")
    counts = [next(iter(v)) for v in strata.values()]
    out = []
    for cell, count in zip(cells, counts + [None]):
        if cell.shuffle and count is None:  # remainder under a total clause
            count = next(iter(totals)) - sum(counts)
        out.append((cell.units, count))
    if totals and len(out) == len(counts) and sum(counts) != next(iter(totals)):
        raise RandomizationError("criterion asks for conflicting treated counts")
    for units, count in out:
        if count is not None and not 0 <= count <= units.size:
            raise RandomizationError("criterion asks for an impossible treated count")
    return out


def factorized_rejection_sample(
    design: PropensityDesign,
    criterion,
    budget: DrawBudget | int,
    rng: RngStream | int | None,
) -> RejectionSample:
    """Rejection sampling run separately on each count cell.

    For a count-structured criterion over disjoint cells, ``P(W | counts)`` is
    the product of the per-cell conditionals, since bits are independent
    across units.  Sampling each cell by rejection yields the same exact
    distribution as joint rejection at a far higher acceptance rate.
    ``attempts`` is the total over cells.
    """
    crit = as_criterion(criterion)
    if not isinstance(budget, DrawBudget):
        budget = DrawBudget(int(budget))
    rng = as_rng(rng)
    target = budget.target_accepts
    W = np.empty((target, design.n_units), dtype=np.uint8)
    attempts = 0
    for k, (units, count) in enumerate(count_cells(design, crit)):
        sub = PropensityDesign(design.propensities[units])
        if count is None:
            W[:, units] = bernoulli_draws(sub, rng.substream(k), target)
            continue
        s = rejection_sample(sub, AcceptanceCriterion.total_treated(count), budget, rng.substream(k))
        W[:, units] = s.assignments
        attempts += s.attempts
    return RejectionSample(W, max(attempts, target))


# ---------------------------------------------------------------------------
# Uniform proposals for count-structured criteria
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Cell:
    units: np.ndarray
    shuffle: bool  # False: free units, filled by fair coins


def count_plan(design: PropensityDesign, criterion) -> list[_Cell]:
    """Split units into cells with fixed treated counts (shuffled) or free units.

    Stratum clauses must refer to disjoint unit sets. A total-count clause fixes
    the count of the units outside every stratum; without one those units are
    unconstrained.
    """
    crit = as_criterion(criterion)
    if not crit.is_count_structured:
        raise UnsupportedCriterionError(
            "uniform proposals need a criterion made only of total and per-stratum treated counts"
        )
    n = design.n_units
    covered = np.zeros(n, dtype=bool)
    cells: list[_Cell] = []
    has_total = False
    seen_strata = set()
    for clause in crit.clauses:
        if isinstance(clause, TotalTreated):
            has_total = True
            continue
        assert isinstance(clause, StratumTreated)
        key = (clause.column, str(clause.value))
        mask = clause.mask(design.covariates)
        if key in seen_strata:
            continue
        if np.any(covered & mask):
            raise UnsupportedCriterionError("stratum clauses overlap; uniform proposal undefined")
        seen_strata.add(key)
        covered |= mask
        cells.append(_Cell(np.flatnonzero(mask), True))
    rest = np.flatnonzero(~covered)
    if rest.size:
        cells.append(_Cell(rest, has_total))
    return cells


def uniform_conditional_proposals(
    design: PropensityDesign,
    criterion,
    w_obs,
    rng: RngStream | int | None,
    size: int,
) -> np.ndarray:
    """``size`` assignments uniform over ``{w : criterion(w) = 1}``.

    Built by shuffling ``w_obs`` within each constrained cell, in clause order.
    """
    crit = as_criterion(criterion)
    w_obs = as_assignment(w_obs, design.n_units)
    cells = count_plan(design, crit)
    if not crit.accepts(w_obs, design.covariates):
        raise ValueError("w_obs does not satisfy the criterion")
    gen = as_rng(rng).generator
    out = np.empty((size, design.n_units), dtype=np.uint8)
    for cell in cells:
        if cell.shuffle:
            block = np.broadcast_to(w_obs[cell.units], (size, cell.units.size))
            out[:, cell.units] = gen.permuted(block, axis=1)
        else:
            out[:, cell.units] = gen.random((size, cell.units.size)) < 0.5
    return out


def uniform_conditional_proposal(
    design: PropensityDesign, criterion, w_obs, rng: RngStream | int | None
) -> np.ndarray:
    return uniform_conditional_proposals(design, criterion, w_obs, rng, 1)[0]


__all__ = [
    "AcceptanceCriterion",
    "BudgetExhaustedError",
    "DrawBudget",
    "RejectionSample",
    "bernoulli_draw",
    "bernoulli_draws",
    "count_cells",
    "count_plan",
    "factorized_rejection_sample",
    "rejection_sample",
    "uniform_conditional_proposal",
    "uniform_conditional_proposals",
]
