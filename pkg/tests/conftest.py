"""Shared fixtures and brute-force oracles.

The oracles use plain Python loops over ``itertools.product`` and share no
code with the package, so they check it independently.
"""

import itertools
import math

import numpy as np
import pytest

from bernoulli_ri import ObservedStudy, PropensityDesign

TABLE1_W = [0, 1, 1, 0, 0, 1, 1, 1, 0, 1]
TABLE1_Y = [-0.56, 0.27, 2.06, 0.07, 0.13, 2.22, 0.96, -0.77, -0.69, 0.05]
TABLE1_E = [0.1, 0.2, 0.3, 0.4, 0.5, 0.5, 0.6, 0.7, 0.8, 0.9]


def brute_kernel(e, w):
    return math.prod(p if b else 1.0 - p for p, b in zip(e, w))


def brute_mean_diff(y, w):
    t = [v for v, b in zip(y, w) if b]
    c = [v for v, b in zip(y, w) if not b]
    if not t or not c:
        return 0.0
    return sum(t) / len(t) - sum(c) / len(c)


def brute_support(n, accept=lambda w: True):
    return [w for w in itertools.product((0, 1), repeat=n) if accept(w)]


def brute_distribution(e, accept=lambda w: True):
    """``{w: P(W = w | accept)}`` over all of ``{0,1}^N``."""
    ws = brute_support(len(e), accept)
    k = [brute_kernel(e, w) for w in ws]
    z = math.fsum(k)
    return {w: p / z for w, p in zip(ws, k)}


def brute_p_value(e, y, w_obs, tau=0.0, accept=lambda w: True, sided="two"):
    """Exact p-value of ``H_tau`` with the effect-removed mean difference."""
    y0 = [v - tau * b for v, b in zip(y, w_obs)]
    t_obs = brute_mean_diff(y0, w_obs)
    hits = []
    for w, p in brute_distribution(e, accept).items():
        t = brute_mean_diff(y0, w)
        if sided == "two":
            ok = abs(t) >= abs(t_obs)
        elif sided == "upper":
            ok = t >= t_obs
        else:
            ok = t <= t_obs
        if ok:
            hits.append(p)
    return math.fsum(hits)


def brute_poisson_binomial(e):
    pmf = [0.0] * (len(e) + 1)
    for w in itertools.product((0, 1), repeat=len(e)):
        pmf[sum(w)] += brute_kernel(e, w)
    return pmf


def nondegenerate(w):
    return 0 < sum(w) < len(w)


@pytest.fixture
def table1():
    design = PropensityDesign(np.array(TABLE1_E))
    return ObservedStudy(design, np.array(TABLE1_W), np.array(TABLE1_Y))


def random_study(rng, n, with_strata=False):
    e = rng.uniform(0.1, 0.9, n)
    cov = {"x": np.array([1] * (n // 2) + [2] * (n - n // 2))} if with_strata else {}
    design = PropensityDesign(e, cov)
    while True:
        w = (rng.random(n) < e).astype(np.uint8)
        if 0 < w.sum() < n:
            break
    y = np.round(rng.normal(0.0, 1.0, n) + 0.5 * w, 2)
    return ObservedStudy(design, w, y)


# One summary line per acceptance criterion, printed after the run.
ACCEPTANCE_LINES: dict[int, str] = {}


def record_acceptance(number: int, passed: bool, detail: str) -> bool:
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
