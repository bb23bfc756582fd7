"""Confidence intervals and point estimates by inverting additive-effect tests."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .design import DEFAULT_ENUMERATION_LIMIT, ObservedStudy, SupportSpec
from .inference import (
    DEFAULT_ALPHA,
    DEFAULT_DRAWS,
    Method,
    SharpHypothesis,
    Sidedness,
    build_reference,
)
from .rng import RngStream, as_rng


@dataclass(frozen=True)
class TauGrid:
    lo: float
    hi: float
    step: float

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)) or self.lo > self.hi:
            raise ValueError(f"grid needs finite lo <= hi, got {self.lo}:{self.hi}")
        if not self.step > 0:
            raise ValueError("grid step must be positive")

    @classmethod
    def parse(cls, text: str) -> TauGrid:
        """Parse ``"LO:HI:STEP"``."""
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"tau grid must look like LO:HI:STEP, got {text!r}")
        lo, hi, step = (float(p) for p in parts)
        return cls(lo, hi, step)

    def points(self) -> np.ndarray:
        n = int(math.floor((self.hi - self.lo) / self.step + 1e-9)) + 1
        # rounding keeps 2.4 from surfacing as 2.4000000000000004
        return np.round(self.lo + self.step * np.arange(n), 10)


@dataclass(frozen=True)
class InversionResult:
    ci_lo: float | None
    ci_hi: float | None
    point_estimate: float
    alpha: float
    p_curve: tuple[tuple[float, float], ...]
    engine_config: dict
    diagnostics: dict = field(default_factory=dict)

    @property
    def ci(self) -> tuple[float, float] | None:
        return None if self.ci_lo is None else (self.ci_lo, self.ci_hi)

    def interval_at(self, alpha: float) -> tuple[float, float] | None:
        """Convex hull of grid points with ``p > alpha`` on this p-curve."""
        kept = [tau for tau, p in self.p_curve if p > alpha]
        return (min(kept), max(kept)) if kept else None

    def to_dict(self) -> dict:
        return {
            "ci": None if self.ci_lo is None else [self.ci_lo, self.ci_hi],
            "point_estimate": self.point_estimate,
            "alpha": self.alpha,
            "p_curve": [[tau, p] for tau, p in self.p_curve],
            "engine_config": dict(self.engine_config),
            "diagnostics": dict(self.diagnostics),
        }


def invert_test(
    study: ObservedStudy,
    stat=None,
    support=None,
    grid: TauGrid = TauGrid(-3.0, 3.0, 0.1),
    alpha: float = DEFAULT_ALPHA,
    engine: Method | str = Method.EXACT,
    m_draws: int = DEFAULT_DRAWS,
    rng: RngStream | int | None = None,
    sidedness: Sidedness | str = Sidedness.TWO_SIDED,
    limit: int = DEFAULT_ENUMERATION_LIMIT,
    n_jobs: int = 1,
) -> InversionResult:
    """Test ``H_tau`` at every grid point and collect the accepted set.

    One reference set (enumeration or Monte Carlo draws) is shared by all grid
    points.  The interval is ``[min, max]`` of grid points with ``p > alpha``;
    the point estimate is the p-maximising grid value (midpoint of ties).
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    engine = Method(engine)
    support = support if support is not None else SupportSpec.nondegenerate()
    rng = as_rng(rng) if engine is not Method.EXACT else None
    ref = build_reference(study, support, engine, m_draws, rng, limit, n_jobs)
    taus = grid.points()
    curve = tuple(
        (float(tau), ref.p_value(study, SharpHypothesis(float(tau)), stat, sidedness).p_value) for tau in taus
    )
    ps = np.array([p for _, p in curve])
    best = taus[ps == ps.max()]
    point = float((best.min() + best.max()) / 2)
    kept = np.flatnonzero(ps > alpha)
    diagnostics = {"accepted_points": int(kept.size), "contiguous": True, "argmax_ties": int(best.size)}
    config = {"method": engine.value, "draws": ref.draws_used, "sidedness": Sidedness(sidedness).value}
    if rng is not None:
        config.update(seed=rng.seed, stream_id=rng.stream_id)
    if kept.size == 0:
        diagnostics["empty"] = True
        return InversionResult(None, None, point, alpha, curve, config, diagnostics)
    if kept[-1] - kept[0] + 1 != kept.size:
        diagnostics["contiguous"] = False
        warnings.warn("accepted tau set is not contiguous; reporting its convex hull", RuntimeWarning,
                      stacklevel=2)
    return InversionResult(float(taus[kept[0]]), float(taus[kept[-1]]), point, alpha, curve, config, diagnostics)
