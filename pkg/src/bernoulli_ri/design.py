"""Designs, assignments, supports and exact assignment probabilities.

Assignments are 1-D ``uint8`` arrays of 0/1 bits; batches of assignments are
2-D arrays with one assignment per row.  All probabilities here refer to the
Bernoulli mechanism where unit ``i`` is treated independently with
probability ``e_i``, optionally restricted to a support.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterator, Mapping

import numpy as np

from .rng import RngStream, as_rng

DEFAULT_ENUMERATION_LIMIT = 2**22
_LOG_SPACE_UNITS = 64
_ENUM_CHUNK = 1 << 16


class RandomizationError(Exception):
    """Base class for errors raised by the inference engines."""


class SupportTooLargeError(RandomizationError):
    """The requested support cannot be enumerated under the configured limit."""


class UnsupportedCriterionError(RandomizationError):
    """The criterion cannot be handled by the requested engine."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def as_assignment(bits, n_units: int | None = None) -> np.ndarray:
    """Validate a 0/1 vector and return it as a read-only ``uint8`` array."""
    arr = np.asarray(bits)
    if arr.ndim != 1:
        raise ValueError(f"assignment must be one-dimensional, got shape {arr.shape}")
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError("assignment entries must be 0 or 1")
    if n_units is not None and arr.shape[0] != n_units:
        raise ValueError(f"assignment has length {arr.shape[0]}, design has {n_units} units")
    return _frozen(arr.astype(np.uint8))


def _as_batch(W) -> np.ndarray:
    arr = np.asarray(W)
    return arr[None, :] if arr.ndim == 1 else arr


@dataclass(frozen=True, eq=False)
class PropensityDesign:
    """Known per-unit treatment probabilities plus an optional covariate table.

    ``covariates`` maps column names to length-``n_units`` arrays; cells may be
    numeric or categorical.
    """

    propensities: np.ndarray
    covariates: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        e = np.array(self.propensities, dtype=float)
        if e.ndim != 1 or e.size == 0:
            raise ValueError("propensities must be a non-empty 1-D vector")
        if not np.all(np.isfinite(e)) or np.any(e <= 0.0) or np.any(e >= 1.0):
            bad = np.flatnonzero(~((e > 0.0) & (e < 1.0)))
            raise ValueError(f"propensities must lie strictly in (0, 1); offending units {bad.tolist()}")
        cov = {}
        for name, col in dict(self.covariates).items():
            col = np.asarray(col)
            if col.shape != (e.size,):
                raise ValueError(f"covariate {name!r} has {col.shape[0] if col.ndim else 0} rows, expected {e.size}")
            cov[str(name)] = _frozen(col.copy())
        object.__setattr__(self, "propensities", _frozen(e))
        object.__setattr__(self, "covariates", cov)

    @property
    def n_units(self) -> int:
        return int(self.propensities.shape[0])

    @classmethod
    def uniform(cls, n_units: int, p: float = 0.5, covariates=None) -> PropensityDesign:
        return cls(np.full(n_units, p), covariates or {})

    def with_propensities(self, propensities) -> PropensityDesign:
        return PropensityDesign(propensities, self.covariates)


@dataclass(frozen=True, eq=False)
class ObservedStudy:
    """Observed assignment and outcomes for a design."""

    design: PropensityDesign
    w_obs: np.ndarray
    y_obs: np.ndarray

    def __post_init__(self):
        w = as_assignment(self.w_obs, self.design.n_units)
        y = np.array(self.y_obs, dtype=float)
        if y.shape != (self.design.n_units,):
            raise ValueError(f"y_obs has shape {y.shape}, expected ({self.design.n_units},)")
        if not np.all(np.isfinite(y)):
            raise ValueError("y_obs must be finite")
        object.__setattr__(self, "w_obs", w)
        object.__setattr__(self, "y_obs", _frozen(y))

    @property
    def n_units(self) -> int:
        return self.design.n_units

    @property
    def n_treated(self) -> int:
        return int(self.w_obs.sum())


# ---------------------------------------------------------------------------
# Bernoulli kernel
# ---------------------------------------------------------------------------


def log_kernel(propensities, W) -> np.ndarray:
    """``sum_i w_i log e_i + (1 - w_i) log(1 - e_i)`` for each row of ``W``."""
    e = np.asarray(propensities, dtype=float)
    Wb = _as_batch(W)
    out = np.where(Wb == 1, np.log(e), np.log1p(-e)).sum(axis=1)
    return out if np.ndim(W) == 2 else out[0]


def kernel(propensities, W):
    """Unnormalised Bernoulli probability ``prod e^w (1-e)^(1-w)``.

    Computed as a direct product for up to 64 units and through log space
    beyond that.
    """
    e = np.asarray(propensities, dtype=float)
    if e.size > _LOG_SPACE_UNITS:
        return np.exp(log_kernel(e, W))
    Wb = _as_batch(W)
    out = np.prod(np.where(Wb == 1, e, 1.0 - e), axis=1)
    return out if np.ndim(W) == 2 else float(out[0])


# ---------------------------------------------------------------------------
# Poisson-binomial distribution
# ---------------------------------------------------------------------------


def poisson_binomial_distribution(propensities, k_max: int | None = None) -> np.ndarray:
    """pmf of ``sum_i W_i`` for ``k = 0..k_max`` via the unit-by-unit convolution."""
    e = np.asarray(propensities, dtype=float)
    n = e.size
    k_max = n if k_max is None else min(int(k_max), n)
    dp = np.zeros(k_max + 1)
    dp[0] = 1.0
    for p in e:
        nxt = dp * (1.0 - p)
        nxt[1:] += dp[:-1] * p
        dp = nxt
    return dp


def poisson_binomial_pmf(propensities, k: int) -> float:
    """``P(sum_i W_i = k)`` for independent ``W_i ~ Bernoulli(e_i)``."""
    n = np.asarray(propensities).size
    if not 0 <= k <= n:
        raise ValueError(f"k={k} outside 0..{n}")
    return float(poisson_binomial_distribution(propensities, k)[k])


# ---------------------------------------------------------------------------
# Acceptance criteria
# ---------------------------------------------------------------------------

_PREDICATES: dict[str, tuple[Callable, bool]] = {}


def register_predicate(name: str, func: Callable | None = None, *, vectorized: bool = False):
    """Register a named acceptance predicate ``func(w, covariates) -> bool``.

    With ``vectorized=True`` the function receives a 2-D batch and returns a
    boolean vector.  Usable as a decorator.
    """

    def deco(f):
        _PREDICATES[name] = (f, vectorized)
        return f

    return deco(func) if func is not None else deco


@register_predicate("nondegenerate", vectorized=True)
def _nondegenerate(W, covariates):
    s = W.sum(axis=1)
    return (s > 0) & (s < W.shape[1])


def _coerce_like(value, column: np.ndarray):
    if column.dtype.kind in "iuf" and isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    if column.dtype.kind in "USO" and not isinstance(value, str):
        # "1" in a categorical column should match the integer 1 given on the command line
        return value if np.any(column == value) else str(value)
    return value


@dataclass(frozen=True)
class TotalTreated:
    count: int

    def evaluate(self, W: np.ndarray, covariates) -> np.ndarray:
        return W.sum(axis=1) == self.count


@dataclass(frozen=True)
class StratumTreated:
    column: str
    value: object
    count: int

    def mask(self, covariates: Mapping[str, np.ndarray]) -> np.ndarray:
        if self.column not in covariates:
            raise KeyError(f"unknown covariate column {self.column!r}")
        col = covariates[self.column]
        return np.asarray(col == _coerce_like(self.value, col), dtype=bool)

    def evaluate(self, W: np.ndarray, covariates) -> np.ndarray:
        return W[:, self.mask(covariates)].sum(axis=1) == self.count


@dataclass(frozen=True)
class NamedPredicate:
    name: str

    def evaluate(self, W: np.ndarray, covariates) -> np.ndarray:
        try:
            func, vectorized = _PREDICATES[self.name]
        except KeyError:
            raise KeyError(f"no predicate registered under {self.name!r}") from None
        if vectorized:
            return np.asarray(func(W, covariates), dtype=bool)
        return np.fromiter((bool(func(row, covariates)) for row in W), dtype=bool, count=W.shape[0])


@dataclass(frozen=True)
class AcceptanceCriterion:
    """Conjunction of clauses; an empty criterion accepts every assignment."""

    clauses: tuple = ()

    @classmethod
    def total_treated(cls, count: int) -> AcceptanceCriterion:
        return cls((TotalTreated(int(count)),))

    @classmethod
    def stratum_treated(cls, column: str, value, count: int) -> AcceptanceCriterion:
        return cls((StratumTreated(column, value, int(count)),))

    @classmethod
    def predicate(cls, name: str) -> AcceptanceCriterion:
        return cls((NamedPredicate(name),))

    def __and__(self, other: AcceptanceCriterion) -> AcceptanceCriterion:
        return AcceptanceCriterion(self.clauses + other.clauses)

    @property
    def is_count_structured(self) -> bool:
        return all(isinstance(c, (TotalTreated, StratumTreated)) for c in self.clauses)

    def accepts(self, W, covariates: Mapping[str, np.ndarray] | None = None):
        Wb = _as_batch(W)
        ok = np.ones(Wb.shape[0], dtype=bool)
        for clause in self.clauses:
            ok &= clause.evaluate(Wb, covariates or {})
        return ok if np.ndim(W) == 2 else bool(ok[0])


# ---------------------------------------------------------------------------
# Supports
# ---------------------------------------------------------------------------


class SupportKind(str, Enum):
    FULL = "full"
    NONDEGENERATE = "nondegenerate"
    FIXED_TOTAL = "fixed_total"
    CRITERION = "criterion"


@dataclass(frozen=True)
class SupportSpec:
    """Which assignments receive positive probability."""

    kind: SupportKind
    n_treated: int | None = None
    criterion: AcceptanceCriterion | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", SupportKind(self.kind))
        if self.kind is SupportKind.FIXED_TOTAL:
            if self.n_treated is None or int(self.n_treated) < 1:
                raise ValueError("FixedTotal support needs n_treated >= 1")
            object.__setattr__(self, "n_treated", int(self.n_treated))
        if self.kind is SupportKind.CRITERION and self.criterion is None:
            raise ValueError("Criterion support needs a criterion")

    @classmethod
    def full(cls) -> SupportSpec:
        return cls(SupportKind.FULL)

    @classmethod
    def nondegenerate(cls) -> SupportSpec:
        return cls(SupportKind.NONDEGENERATE)

    @classmethod
    def fixed_total(cls, n_treated: int) -> SupportSpec:
        return cls(SupportKind.FIXED_TOTAL, n_treated=n_treated)

    @classmethod
    def from_criterion(cls, criterion: AcceptanceCriterion) -> SupportSpec:
        return cls(SupportKind.CRITERION, criterion=criterion)

    def validate(self, n_units: int) -> None:
        if self.kind is SupportKind.FIXED_TOTAL and self.n_treated > n_units - 1:
            raise ValueError(f"FixedTotal({self.n_treated}) requires n_treated <= N-1 = {n_units - 1}")

    def to_criterion(self) -> AcceptanceCriterion:
        if self.kind is SupportKind.FULL:
            return AcceptanceCriterion()
        if self.kind is SupportKind.NONDEGENERATE:
            return AcceptanceCriterion.predicate("nondegenerate")
        if self.kind is SupportKind.FIXED_TOTAL:
            return AcceptanceCriterion.total_treated(self.n_treated)
        return self.criterion

    def accepts(self, W, covariates=None):
        return self.to_criterion().accepts(W, covariates)

    def size(self, n_units: int) -> int | None:
        """Number of assignments in the support, or ``None`` if only a scan can tell."""
        if self.kind is SupportKind.FULL:
            return 2**n_units
        if self.kind is SupportKind.NONDEGENERATE:
            return 2**n_units - 2
        if self.kind is SupportKind.FIXED_TOTAL:
            return math.comb(n_units, self.n_treated)
        return None

    def normalizer(self, design: PropensityDesign, limit: int = DEFAULT_ENUMERATION_LIMIT) -> float:
        """Total Bernoulli probability of the support."""
        self.validate(design.n_units)
        e = design.propensities
        if self.kind is SupportKind.FULL:
            return 1.0
        if self.kind is SupportKind.NONDEGENERATE:
            return 1.0 - float(np.prod(e)) - float(np.prod(1.0 - e))
        if self.kind is SupportKind.FIXED_TOTAL:
            return poisson_binomial_pmf(e, self.n_treated)
        return math.fsum(
            math.fsum(kernel(e, chunk)) for chunk in iter_support(design, self, limit)
        )


def as_support(support) -> SupportSpec:
    if isinstance(support, SupportSpec):
        return support
    if isinstance(support, AcceptanceCriterion):
        return SupportSpec.from_criterion(support)
    raise TypeError(f"expected SupportSpec or AcceptanceCriterion, got {type(support).__name__}")


def as_criterion(support) -> AcceptanceCriterion:
    if isinstance(support, AcceptanceCriterion):
        return support
    if isinstance(support, SupportSpec):
        return support.to_criterion()
    raise TypeError(f"expected SupportSpec or AcceptanceCriterion, got {type(support).__name__}")


# ---------------------------------------------------------------------------
# Enumeration and exact probabilities
# ---------------------------------------------------------------------------


def _bits_of(codes: np.ndarray, n_units: int) -> np.ndarray:
    shifts = np.arange(n_units - 1, -1, -1, dtype=np.int64)
    return ((codes[:, None] >> shifts) & 1).astype(np.uint8)


def iter_support(
    design: PropensityDesign,
    support: SupportSpec,
    limit: int = DEFAULT_ENUMERATION_LIMIT,
    chunk_size: int = _ENUM_CHUNK,
) -> Iterator[np.ndarray]:
    """Yield the support in lexicographic bit order as independent 2-D chunks."""
    support = as_support(support)
    n = design.n_units
    support.validate(n)
    size = support.size(n)
    scanned = size if support.kind is SupportKind.FIXED_TOTAL else 2**n
    if scanned > limit:
        raise SupportTooLargeError(
            f"support too large to enumerate: {scanned} assignments exceed the limit of {limit}; "
            "use the rejection or importance sampling engines"
        )
    if support.kind is SupportKind.FIXED_TOTAL:
        # ascending bitstrings <=> zero positions in lexicographic order
        combos = itertools.combinations(range(n), n - support.n_treated)
        while True:
            block = list(itertools.islice(combos, chunk_size))
            if not block:
                return
            W = np.ones((len(block), n), dtype=np.uint8)
            if n - support.n_treated:
                rows = np.repeat(np.arange(len(block)), n - support.n_treated)
                W[rows, np.asarray(block).ravel()] = 0
            yield W
    crit = support.to_criterion()
    for start in range(0, 2**n, chunk_size):
        W = _bits_of(np.arange(start, min(start + chunk_size, 2**n), dtype=np.int64), n)
        if crit.clauses:
            W = W[crit.accepts(W, design.covariates)]
        if W.shape[0]:
            yield W


def enumerate_support(
    design: PropensityDesign, support: SupportSpec, limit: int = DEFAULT_ENUMERATION_LIMIT
) -> np.ndarray:
    """Every assignment in the support exactly once, lexicographic order, one per row."""
    chunks = list(iter_support(design, support, limit))
    if not chunks:
        return np.zeros((0, design.n_units), dtype=np.uint8)
    return np.concatenate(chunks)


def assignment_probability(
    design: PropensityDesign,
    w,
    support: SupportSpec,
    limit: int = DEFAULT_ENUMERATION_LIMIT,
) -> float:
    """``P(W = w)`` under the Bernoulli mechanism restricted to ``support``."""
    support = as_support(support)
    w = as_assignment(w, design.n_units)
    support.validate(design.n_units)
    if not support.accepts(w, design.covariates):
        return 0.0
    if support.kind is SupportKind.CRITERION and 2**design.n_units > limit:
        raise SupportTooLargeError(
            f"criterion support over {design.n_units} units cannot be normalised exactly "
            f"(2^{design.n_units} > {limit}); use the rejection or importance sampling engines"
        )
    return kernel(design.propensities, w) / support.normalizer(design, limit)


@dataclass(frozen=True)
class TotalProbabilityEstimate:
    estimate: float
    standard_error: float
    m_draws: int


def estimate_total_probability(
    design: PropensityDesign,
    n_treated: int,
    m_draws: int,
    rng: RngStream | int | None = None,
) -> TotalProbabilityEstimate:
    """Survey-sampling estimate of ``P(sum W = n_treated)``.

    Draws ``m_draws`` assignments uniformly from those with ``n_treated``
    treated units and scales the mean kernel by ``C(N, n_treated)``.
    """
    n = design.n_units
    if m_draws < 1:
        raise ValueError("m_draws must be >= 1")
    if not 1 <= n_treated <= n - 1:
        raise ValueError(f"n_treated must be in 1..{n - 1}")
    gen = as_rng(rng).generator
    base = np.zeros(n, dtype=np.uint8)
    base[:n_treated] = 1
    values = []
    for start in range(0, m_draws, _ENUM_CHUNK):
        size = min(_ENUM_CHUNK, m_draws - start)
        W = gen.permuted(np.broadcast_to(base, (size, n)), axis=1)
        values.append(np.atleast_1d(kernel(design.propensities, W)))
    k = np.concatenate(values)
    total = math.comb(n, n_treated)
    se = total * float(np.std(k, ddof=1)) / math.sqrt(m_draws) if m_draws > 1 else math.inf
    return TotalProbabilityEstimate(total * float(np.mean(k)), se, m_draws)
