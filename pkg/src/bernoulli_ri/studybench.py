"""Simulation study: power and validity of unconditional and conditional tests.

Population: ``N`` units split into covariate strata ``X = 1, 2, ...``;
``Y(0) ~ N(lambda X, 1)``, ``Y(1) = Y(0) + tau`` and propensities drawn from a
Beta distribution, all generated once per ``lambda`` and reused across
replications and ``tau`` values.  Each replication draws one nondegenerate
observed assignment and runs four rejection-sampling tests of the sharp null
(unconditional; conditional on ``N_T``; on ``N_T1``; on both), plus optional
importance-sampling versions of the last one.

A joint rejection run that exhausts its attempt budget (an observed
assignment deep in the tail of the count distribution) is redrawn by
rejection within each count cell, which targets the same conditional
distribution; such replications are listed in the run manifest.

Within a replication the observed assignment and every reference draw set are
shared across ``tau`` values (common random numbers); ``tau`` only shifts the
observed outcomes.
"""

from __future__ import annotations

import csv
import json
import math
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .design import AcceptanceCriterion, ObservedStudy, PropensityDesign
from .inference import importance_reference, rejection_reference
from .rng import RngStream
from .sampling import ATTEMPTS_PER_ACCEPT, BudgetExhaustedError, DrawBudget, rejection_sample

TESTS = ("unconditional", "cond_nt", "cond_nt1", "cond_nt_nt1")
CSV_COLUMNS = ("lambda", "tau", "test", "rate", "se", "reps")


@dataclass(frozen=True)
class SimConfig:
    n_units: int = 100
    stratum_sizes: tuple[int, ...] = (50, 50)
    lambda_values: tuple[float, ...] = (0.0, 1.5, 3.0)
    tau_values: tuple[float, ...] = tuple(round(0.1 * k, 10) for k in range(11))
    replications: int = 1000
    beta_params: tuple[float, float] = (5.0, 5.0)
    alpha: float = 0.05
    m_draws: int = 1000
    is_m_values: tuple[int, ...] = (1000, 5000, 25000)
    seed: int = 20240101
    max_attempts_per_accept: int = 10_000

    def __post_init__(self):
        for name in ("stratum_sizes", "lambda_values", "tau_values", "beta_params", "is_m_values"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.n_units < 2 or self.replications < 1 or self.m_draws < 1:
            raise ValueError("n_units >= 2, replications >= 1 and m_draws >= 1 are required")
        if any(s < 1 for s in self.stratum_sizes) or sum(self.stratum_sizes) != self.n_units:
            raise ValueError(f"stratum_sizes {self.stratum_sizes} must be positive and sum to n_units={self.n_units}")
        if len(self.beta_params) != 2 or min(self.beta_params) <= 0:
            raise ValueError("beta_params must be two positive numbers")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")
        if not self.lambda_values or not self.tau_values:
            raise ValueError("lambda_values and tau_values must be non-empty")
        if any(m < 1 for m in self.is_m_values):
            raise ValueError("is_m_values must be positive")
        if self.max_attempts_per_accept < 1:
            raise ValueError("max_attempts_per_accept must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @classmethod
    def from_dict(cls, data: dict) -> SimConfig:
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ValueError(f"unknown config key {key!r}; expected one of {sorted(known)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ValueError(str(exc)) from None

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass(frozen=True)
class Population:
    covariate: np.ndarray
    y0: np.ndarray
    design: PropensityDesign


def generate_population(config: SimConfig, lam: float, rng: RngStream) -> Population:
    """Fixed control outcomes and propensities for one ``lambda`` scenario."""
    gen = rng.generator
    x = np.repeat(np.arange(1, len(config.stratum_sizes) + 1), config.stratum_sizes)
    y0 = gen.normal(lam * x, 1.0)
    a, b = config.beta_params
    # Beta draws can round to exactly 0 or 1 in extreme parameterisations
    e = np.clip(gen.beta(a, b, config.n_units), 1e-12, 1 - 1e-12)
    return Population(x, y0, PropensityDesign(e, {"x": x}))


def test_criteria(pop: Population, w_obs: np.ndarray) -> dict[str, AcceptanceCriterion]:
    n_t = int(w_obs.sum())
    n_t1 = int(w_obs[pop.covariate == 1].sum())
    total = AcceptanceCriterion.total_treated(n_t)
    stratum = AcceptanceCriterion.stratum_treated("x", 1, n_t1)
    return {
        "unconditional": AcceptanceCriterion.predicate("nondegenerate"),
        "cond_nt": total,
        "cond_nt1": stratum,
        "cond_nt_nt1": total & stratum,
    }


test_criteria.__test__ = False


@dataclass(frozen=True)
class PowerRow:
    lam: float
    tau: float
    test: str
    rate: float
    se: float
    reps: int


@dataclass
class PowerTable:
    rows: list[PowerRow]
    wall_clock: dict = field(default_factory=dict)

    def rate(self, lam: float, tau: float, test: str) -> PowerRow:
        for row in self.rows:
            if row.test == test and math.isclose(row.lam, lam) and math.isclose(row.tau, tau):
                return row
        raise KeyError((lam, tau, test))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(CSV_COLUMNS)
            for r in self.rows:
                out.writerow([repr(float(r.lam)), repr(float(r.tau)), r.test, repr(r.rate), repr(r.se), r.reps])


@dataclass
class SimulationResult:
    power: PowerTable
    rs_vs_is: PowerTable | None
    contingency: list[tuple]  # (lambda, replication, N_T, N_C, N_T1, N_T2)
    config: SimConfig
    fallbacks: list[tuple] = field(default_factory=list)  # (lambda, replication, test)


def _replicate(config: SimConfig, pop: Population, rng: RngStream, tests, is_m_values) -> dict:
    design = pop.design
    taus = np.asarray(config.tau_values, dtype=float)
    w_obs = rejection_sample(design, AcceptanceCriterion.predicate("nondegenerate"), 1, rng.substream(0)).assignments[0]
    studies = [ObservedStudy(design, w_obs, pop.y0 + tau * w_obs) for tau in taus]
    criteria = test_criteria(pop, w_obs)
    rejects = np.zeros((len(tests), taus.size), dtype=bool)
    timing = {}
    fallbacks = []
    for i, name in enumerate(tests):
        start = time.perf_counter()
        budget = DrawBudget(config.m_draws, config.m_draws * config.max_attempts_per_accept)
        stream = rng.substream(1 + TESTS.index(name))
        try:
            ref = rejection_reference(studies[0], criteria[name], config.m_draws, stream, budget)
        except BudgetExhaustedError:
            if not criteria[name].is_count_structured:
                raise
            cells_budget = DrawBudget(config.m_draws,
                                      config.m_draws * max(ATTEMPTS_PER_ACCEPT, config.max_attempts_per_accept))
            ref = rejection_reference(studies[0], criteria[name], config.m_draws, stream.substream(1),
                                      cells_budget, factorize=True)
            fallbacks.append(name)
        rejects[i] = [ref.p_value(s).p_value <= config.alpha for s in studies]
        timing[name] = time.perf_counter() - start
    is_rejects = np.zeros((len(is_m_values), taus.size), dtype=bool)
    for j, m in enumerate(is_m_values):
        start = time.perf_counter()
        ref = importance_reference(studies[0], criteria["cond_nt_nt1"], m, rng.substream(100 + j))
        is_rejects[j] = [ref.p_value(s).p_value <= config.alpha for s in studies]
        timing[f"is_m{m}"] = time.perf_counter() - start
    x1 = pop.covariate == 1
    n_t = int(w_obs.sum())
    counts = (n_t, design.n_units - n_t, int(w_obs[x1].sum()), int(w_obs[~x1].sum()))
    return {"rejects": rejects, "is_rejects": is_rejects, "timing": timing, "counts": counts,
            "fallbacks": fallbacks}


def _rows(lam, taus, names, rejects: np.ndarray) -> list[PowerRow]:
    # rejects: (reps, n_tests, n_tau)
    reps = rejects.shape[0]
    rates = rejects.mean(axis=0)
    out = []
    for ti, tau in enumerate(taus):
        for k, name in enumerate(names):
            r = float(rates[k, ti])
            out.append(PowerRow(float(lam), float(tau), name, r, math.sqrt(r * (1 - r) / reps), reps))
    return out


def run_simulation(
    config: SimConfig,
    tests=TESTS,
    is_m_values=None,
    n_jobs: int = 1,
) -> SimulationResult:
    """Run the power study and, if ``is_m_values`` is non-empty, the RS-vs-IS comparison.

    RS and IS are evaluated on the same observed datasets.  Replication ``r`` of
    scenario ``l`` uses substream ``(1, l, r)`` of the config seed, so output
    does not depend on ``n_jobs``.
    """
    tests = tuple(tests)
    unknown = set(tests) - set(TESTS)
    if unknown:
        raise ValueError(f"unknown tests {sorted(unknown)}")
    is_m_values = tuple(config.is_m_values if is_m_values is None else is_m_values)
    root = RngStream(config.seed)
    power_rows, cmp_rows, contingency, fallbacks = [], [], [], []
    wall = {name: 0.0 for name in tests} | {f"is_m{m}": 0.0 for m in is_m_values}
    for l, lam in enumerate(config.lambda_values):
        pop = generate_population(config, lam, root.substream(0, l))

        def task(r, pop=pop, l=l):
            return _replicate(config, pop, root.substream(1, l, r), tests, is_m_values)

        if n_jobs > 1:
            with ThreadPoolExecutor(max_workers=n_jobs) as pool:
                reps = list(pool.map(task, range(config.replications)))
        else:
            reps = [task(r) for r in range(config.replications)]
        for r, rep in enumerate(reps):
            contingency.append((float(lam), r, *rep["counts"]))
            fallbacks += [(float(lam), r, name) for name in rep["fallbacks"]]
            for k, v in rep["timing"].items():
                wall[k] += v
        power_rows += _rows(lam, config.tau_values, tests, np.stack([rep["rejects"] for rep in reps]))
        if is_m_values:
            names = ("rs",) + tuple(f"is_m{m}" for m in is_m_values)
            if "cond_nt_nt1" in tests:
                rs = np.stack([rep["rejects"][tests.index("cond_nt_nt1")] for rep in reps])[:, None, :]
            else:
                rs = None
            iss = np.stack([rep["is_rejects"] for rep in reps])
            stacked = iss if rs is None else np.concatenate([rs, iss], axis=1)
            cmp_rows += _rows(lam, config.tau_values, names if rs is not None else names[1:], stacked)
    power = PowerTable(power_rows, {k: v for k, v in wall.items() if k in tests})
    comparison = None
    if is_m_values:
        cmp_wall = {k: v for k, v in wall.items() if k.startswith("is_m")}
        if "cond_nt_nt1" in tests:
            cmp_wall["rs"] = wall["cond_nt_nt1"]
        comparison = PowerTable(cmp_rows, cmp_wall)
    return SimulationResult(power, comparison, contingency, config, fallbacks)


def run_power_study(config: SimConfig, n_jobs: int = 1) -> PowerTable:
    return run_simulation(config, TESTS, (), n_jobs).power


def run_rs_vs_is_study(config: SimConfig, m_values=None, n_jobs: int = 1) -> PowerTable:
    """Rejection rates of the ``(N_T, N_T1)``-conditional test under RS and IS.

    ``wall_clock`` holds total seconds per method.
    """
    m_values = tuple(config.is_m_values if m_values is None else m_values)
    if not m_values:
        raise ValueError("m_values must be non-empty")
    return run_simulation(config, ("cond_nt_nt1",), m_values, n_jobs).rs_vs_is


def write_outputs(result: SimulationResult, outdir, include_timing: bool = False) -> dict[str, str]:
    """Write power.csv, rs_vs_is.csv, contingency.csv and manifest.json into ``outdir``."""
    from pathlib import Path

    from . import __version__

    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"power": out / "power.csv", "manifest": out / "manifest.json", "contingency": out / "contingency.csv"}
    result.power.to_csv(files["power"])
    if result.rs_vs_is is not None:
        files["rs_vs_is"] = out / "rs_vs_is.csv"
        result.rs_vs_is.to_csv(files["rs_vs_is"])
    with open(files["contingency"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("lambda", "replication", "n_t", "n_c", "n_t1", "n_t2"))
        for lam, r, *counts in result.contingency:
            w.writerow([repr(lam), r, *counts])
    manifest = {
        "config": result.config.to_dict(),
        "seed": result.config.seed,
        "versions": {"bernoulli_ri": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "factorized_fallbacks": [list(f) for f in result.fallbacks],
        "rng": "numpy Philox, SeedSequence(seed, spawn_key=(0, lambda_index)) for populations, "
               "(1, lambda_index, replication) for replications",
    }
    if include_timing:
        manifest["wall_clock_seconds"] = {
            "power": result.power.wall_clock,
            "rs_vs_is": result.rs_vs_is.wall_clock if result.rs_vs_is else None,
        }
    files["manifest"].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return {k: str(v) for k, v in files.items()}
