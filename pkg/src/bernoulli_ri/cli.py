"""Command-line front end: ``bernoulli-ri {test,ci,enumerate,simulate}``.

Every command writes a single JSON envelope (to ``--out`` or stdout).
Exit status is 0 on success, 2 for bad input and 3 when an engine fails.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time
from importlib import resources
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .design import (
    DEFAULT_ENUMERATION_LIMIT,
    AcceptanceCriterion,
    ObservedStudy,
    PropensityDesign,
    RandomizationError,
    SupportSpec,
)
from .inference import (
    DEFAULT_ALPHA,
    DEFAULT_DRAWS,
    STATISTICS,
    Method,
    SharpHypothesis,
    Sidedness,
    build_reference,
)
from .inversion import TauGrid, invert_test
from .rng import RngStream

SEED_ENV = "BERNOULLI_RI_SEED"
EXIT_OK, EXIT_INPUT, EXIT_ENGINE = 0, 2, 3
REQUIRED_COLUMNS = ("unit_id", "w_obs", "y_obs", "propensity")
COVARIATE_PREFIX = "x_"
DISPLAY_DIGITS = 4
BUILTIN_PREFIX = "builtin:"


class InputError(ValueError):
    """Bad user input: flags, data file or config."""


# ---------------------------------------------------------------------------
# Study files
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StudyFile:
    unit_ids: tuple[str, ...]
    study: ObservedStudy


def _cell(row: dict, column: str, line: int, convert):
    raw = (row.get(column) or "").strip()
    if raw == "":
        raise InputError(f"row {line}, column {column!r}: missing value")
    try:
        return convert(raw)
    except ValueError:
        raise InputError(f"row {line}, column {column!r}: cannot parse {raw!r}") from None


def _binary(raw: str) -> int:
    if raw not in ("0", "1"):
        raise ValueError(raw)
    return int(raw)


def _finite(raw: str) -> float:
    x = float(raw)
    if not math.isfinite(x):
        raise ValueError(raw)
    return x


def _covariate_column(values: list[str]) -> np.ndarray:
    try:
        return np.array([float(v) for v in values])
    except ValueError:
        return np.array(values, dtype=object)


def parse_study_text(text: str, source: str = "<data>") -> StudyFile:
    """Parse study CSV text. Line numbers in errors count the header as line 1."""
    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames
    if not header:
        raise InputError(f"{source}: empty file or missing header")
    header = [h.strip() for h in header]
    reader.fieldnames = header
    missing = [c for c in REQUIRED_COLUMNS if c not in header]
    if missing:
        raise InputError(f"{source}: missing required column(s) {', '.join(missing)}")
    cov_names = [h for h in header if h.startswith(COVARIATE_PREFIX)]
    ids, w, y, e = [], [], [], []
    cov_raw: dict[str, list[str]] = {c: [] for c in cov_names}
    for line, row in enumerate(reader, start=2):
        if None in row:
            raise InputError(f"{source}: row {line}: more fields than header columns")
        ids.append(_cell(row, "unit_id", line, str))
        w.append(_cell(row, "w_obs", line, _binary))
        y.append(_cell(row, "y_obs", line, _finite))
        p = _cell(row, "propensity", line, _finite)
        if not 0.0 < p < 1.0:
            raise InputError(f"row {line}, column 'propensity': {p!r} is outside (0, 1)")
        e.append(p)
        for c in cov_names:
            cov_raw[c].append(_cell(row, c, line, str))
    if not ids:
        raise InputError(f"{source}: no data rows")
    covariates = {c[len(COVARIATE_PREFIX):]: _covariate_column(v) for c, v in cov_raw.items()}
    design = PropensityDesign(np.array(e), covariates)
    return StudyFile(tuple(ids), ObservedStudy(design, np.array(w), np.array(y)))


def read_study(path) -> StudyFile:
    """Read a study CSV; ``builtin:NAME`` reads ``NAME.csv`` shipped with the package."""
    path = str(path)
    try:
        if path.startswith(BUILTIN_PREFIX):
            text = resources.files(__package__).joinpath("data", path[len(BUILTIN_PREFIX):] + ".csv").read_text()
        else:
            text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read data file {path}: {exc.strerror}") from None
    return parse_study_text(text, str(path))


# ---------------------------------------------------------------------------
# Flag handling
# ---------------------------------------------------------------------------


def _stratum(text: str) -> tuple[str, str, int | None]:
    col, sep, rest = text.partition("=")
    if not sep or not col or not rest:
        raise InputError(f"--stratum must look like COL=VALUE[:COUNT], got {text!r}")
    value, _, count = rest.partition(":")
    if col.startswith(COVARIATE_PREFIX):
        col = col[len(COVARIATE_PREFIX):]
    try:
        n = int(count) if count else None
    except ValueError:
        raise InputError(f"--stratum count must be an integer, got {count!r}") from None
    return col, value, n


def build_support(args, study: ObservedStudy) -> SupportSpec:
    nt = args.nt if args.nt is not None else study.n_treated
    if args.stratum and args.support != "criterion":
        raise InputError("--stratum needs --support criterion")
    if args.support == "full":
        return SupportSpec.full()
    if args.support == "nondegenerate":
        return SupportSpec.nondegenerate()
    if args.support == "fixed-nt":
        if not 0 <= nt <= study.n_units:
            raise InputError(f"--nt {nt} is outside [0, {study.n_units}]")
        return SupportSpec.fixed_total(nt)
    if not args.stratum and args.nt is None:
        raise InputError("--support criterion needs at least one --stratum or --nt")
    clauses = AcceptanceCriterion(())
    if args.nt is not None:
        clauses = clauses & AcceptanceCriterion.total_treated(args.nt)
    cov = study.design.covariates
    for text in args.stratum:
        col, value, count = _stratum(text)
        if col not in cov:
            raise InputError(f"--stratum: unknown covariate {col!r} (known: {', '.join(sorted(cov)) or 'none'})")
        clause = AcceptanceCriterion.stratum_treated(col, value, 0).clauses[0]
        mask = clause.mask(cov)
        if not mask.any():
            raise InputError(f"--stratum: no units have {col}={value}")
        if count is None:
            count = int(study.w_obs[mask].sum())
        clauses = clauses & AcceptanceCriterion.stratum_treated(col, value, count)
    return SupportSpec.from_criterion(clauses)


def resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise InputError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    # fresh entropy, echoed in the envelope so the run can be repeated
    return int(np.random.SeedSequence().entropy % (1 << 63))


def _display(x):
    return None if x is None else round(float(x), DISPLAY_DIGITS)


def _echo(args, keys) -> dict:
    out = {}
    for k in keys:
        v = getattr(args, k)
        out[k] = str(v) if isinstance(v, Path) else v
    return out


COMMON_KEYS = ("data", "support", "nt", "stratum", "stat", "method", "draws", "sided", "limit")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _reference(args, sf: StudyFile, seed: int):
    study = sf.study
    support = build_support(args, study)
    rng = RngStream(seed) if args.method != "exact" else None
    return study, support, rng


def cmd_test(args) -> dict:
    sf = read_study(args.data)
    seed = resolve_seed(args)
    study, support, rng = _reference(args, sf, seed)
    try:
        ref = build_reference(study, support, args.method, args.draws, rng, args.limit, args.threads)
        report = ref.p_value(study, SharpHypothesis(args.tau), args.stat, args.sided)
    except (RandomizationError, ValueError) as exc:
        raise EngineError(str(exc)) from exc
    results = report.to_dict()
    results["display"] = {"p_value": _display(report.p_value), "t_obs": _display(report.t_obs),
                          "mc_standard_error": _display(report.mc_standard_error)}
    return {
        "config_echo": _echo(args, COMMON_KEYS + ("tau",)),
        "seed": seed if rng is not None else None,
        "results": results,
        "diagnostics": results.pop("diagnostics"),
    }


def cmd_ci(args) -> dict:
    sf = read_study(args.data)
    seed = resolve_seed(args)
    study, support, rng = _reference(args, sf, seed)
    try:
        grid = TauGrid.parse(args.tau_grid)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    if not 0.0 < args.alpha < 1.0:
        raise InputError("--alpha must be in (0, 1)")
    try:
        res = invert_test(study, args.stat, support, grid, args.alpha, args.method, args.draws, rng,
                          args.sided, args.limit, args.threads)
    except (RandomizationError, ValueError) as exc:
        raise EngineError(str(exc)) from exc
    results = res.to_dict()
    results["display"] = {"ci": None if res.ci is None else [_display(res.ci_lo), _display(res.ci_hi)],
                          "point_estimate": _display(res.point_estimate)}
    return {
        "config_echo": _echo(args, COMMON_KEYS + ("alpha", "tau_grid")),
        "seed": seed if rng is not None else None,
        "results": results,
        "diagnostics": results.pop("diagnostics"),
    }


def cmd_enumerate(args) -> dict:
    sf = read_study(args.data)
    study = sf.study
    support = build_support(args, study)
    if args.out is None:
        raise InputError("enumerate needs --out PATH for the CSV")
    try:
        ref = build_reference(study, support, Method.EXACT, limit=args.limit)
    except (RandomizationError, ValueError) as exc:
        raise EngineError(str(exc)) from exc
    t_obs, t = ref.statistic_values(study, SharpHypothesis(args.tau), args.stat)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["assignment", "probability", "statistic"])
        for w, p, s in zip(ref.assignments, ref.weights, t):
            writer.writerow(["".join("1" if b else "0" for b in w), repr(float(p)), repr(float(s))])
    total = math.fsum(ref.weights)
    return {
        "config_echo": _echo(args, ("data", "support", "nt", "stratum", "stat", "tau", "limit")),
        "seed": None,
        "results": {"path": str(args.out), "rows": int(ref.assignments.shape[0]), "t_obs": t_obs,
                    "probability_sum": total},
        "diagnostics": ref.diagnostics,
        "_stdout": True,
    }


def cmd_simulate(args) -> dict:
    from .studybench import SimConfig, run_simulation, write_outputs

    if args.config is None:
        config = SimConfig()
    else:
        try:
            raw = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise InputError(f"cannot read config {args.config}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise InputError(f"config {args.config} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise InputError("config must be a JSON object")
        if args.seed is not None:
            raw["seed"] = args.seed
        try:
            config = SimConfig.from_dict(raw)
        except (TypeError, ValueError) as exc:
            raise InputError(f"config: {exc}") from None
    if args.out is None:
        raise InputError("simulate needs --out DIR")
    try:
        result = run_simulation(config, n_jobs=args.threads)
    except RandomizationError as exc:
        raise EngineError(str(exc)) from exc
    paths = write_outputs(result, args.out, include_timing=args.timing)
    return {
        "config_echo": config.to_dict(),
        "seed": config.seed,
        "results": {"files": paths, "rows": len(result.power.rows)},
        "diagnostics": {},
        "_stdout": True,
    }


class EngineError(RuntimeError):
    """An engine refused or failed to compute a result."""


COMMANDS = {"test": cmd_test, "ci": cmd_ci, "enumerate": cmd_enumerate, "simulate": cmd_simulate}


def _add_common(p: argparse.ArgumentParser, mc: bool = True) -> None:
    p.add_argument("--data", required=True, help="study CSV, or builtin:table1")
    p.add_argument("--support", choices=("full", "nondegenerate", "fixed-nt", "criterion"),
                   default="nondegenerate")
    p.add_argument("--nt", type=int, help="treated count (default: observed)")
    p.add_argument("--stratum", action="append", default=[], metavar="COL=VALUE[:COUNT]",
                   help="fix the treated count in a stratum (repeatable; default count: observed)")
    p.add_argument("--stat", choices=sorted(STATISTICS), default="mean-diff")
    p.add_argument("--tau", type=float, default=0.0, help="additive effect under test")
    p.add_argument("--limit", type=int, default=DEFAULT_ENUMERATION_LIMIT, help="enumeration cap")
    p.add_argument("--out", type=Path)
    if mc:
        p.add_argument("--method", choices=[m.value for m in Method], default="exact")
        p.add_argument("--draws", type=int, default=DEFAULT_DRAWS)
        p.add_argument("--sided", choices=[s.value for s in Sidedness], default="two")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
        p.add_argument("--timing", action="store_true", help="record wall-clock time in the envelope")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bernoulli-ri", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("test", help="p-value for an additive sharp hypothesis"))
    ci = sub.add_parser("ci", help="confidence interval by test inversion")
    _add_common(ci)
    ci.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    ci.add_argument("--tau-grid", default="-3:3:0.1", metavar="LO:HI:STEP")
    en = sub.add_parser("enumerate", help="write every assignment with its probability and statistic")
    _add_common(en, mc=False)
    en.add_argument("--timing", action="store_true")
    sim = sub.add_parser("simulate", help="run the power and validity study")
    sim.add_argument("--config", type=Path, help="JSON study config (default: built-in)")
    sim.add_argument("--out", type=Path, help="output directory")
    sim.add_argument("--seed", type=int)
    sim.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    sim.add_argument("--timing", action="store_true")
    return parser


def _dump(envelope: dict) -> str:
    return json.dumps(envelope, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _join_negative_grid(argv: list[str]) -> list[str]:
    # "--tau-grid -3:3:0.1" would otherwise read "-3:3:0.1" as an option
    out = []
    it = iter(argv)
    for tok in it:
        if tok == "--tau-grid":
            nxt = next(it, None)
            out.append(tok if nxt is None else f"{tok}={nxt}")
        else:
            out.append(tok)
    return out


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(_join_negative_grid(argv))
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    if getattr(args, "draws", 1) < 1:
        print("error: --draws must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    start = time.perf_counter()
    try:
        body = COMMANDS[args.command](args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except EngineError as exc:
        print(f"engine error: {exc}", file=sys.stderr)
        return EXIT_ENGINE
    except ValueError as exc:
        # validation raised by library constructors while reading flags
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    elapsed = (time.perf_counter() - start) * 1000.0
    to_stdout = body.pop("_stdout", False)
    envelope = {"command": args.command, **body, "timing_ms": elapsed if args.timing else None}
    text = _dump(envelope)
    if args.out is not None and not to_stdout:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
