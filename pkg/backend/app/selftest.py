"""
Quick property suite run by ``python -m app.cli selftest``.

Each check returns (name, passed, detail). The suite is a smoke-level
version of the pytest properties, sized to finish in well under a minute.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .config import settings
from .controllers import RecedingController
from .invariant import terminal_ingredients
from .polytope import Polytope, encode_affine_containment, encode_minkowski_containment
from .sim import SamplerSpec, closed_loop
from .slp import slp_residual
from .sltmpc import build_receding
from .sysmodel import double_integrator
from .verify import RecedingChecker

logger = logging.getLogger(__name__)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _random_polytope(rng: np.random.Generator, n: int) -> Polytope:
    points = rng.normal(size=(n + 4, n))
    return Polytope.from_vertices(points - points.mean(axis=0))


def check_containment_oracle(instances: int = 40, seed: int = 0) -> CheckResult:
    """Containment encodings agree with vertex enumeration on random planar instances."""
    rng = np.random.default_rng(seed)
    disagreements = skipped = 0
    for _ in range(instances):
        X = _random_polytope(rng, 2)
        Y = _random_polytope(rng, 2)
        A = rng.normal(size=(2, 2))
        alpha, beta = rng.uniform(0.1, 1.0), rng.uniform(0.5, 3.0)
        margin = beta * Y.h[:, None] - Y.H @ (alpha * A @ X.vertices().T)
        if np.min(np.abs(margin.min(axis=1))) < 1e-5:
            skipped += 1
            continue
        expected = bool(np.all(margin >= 0))
        if encode_affine_containment(alpha, A, beta, Y, None, None, X).feasible() != expected:
            disagreements += 1

        a = rng.normal(scale=0.2, size=2)
        X2 = _random_polytope(rng, 2)
        A2 = rng.normal(scale=0.5, size=(2, 2))
        sums = [a + A @ v1 + A2 @ v2 for v1, v2 in itertools.product(X.vertices(), X2.vertices())]
        margin = beta * Y.h[:, None] - Y.H @ np.array(sums).T
        if np.min(np.abs(margin.min(axis=1))) < 1e-5:
            skipped += 1
            continue
        expected = bool(np.all(margin >= 0))
        if encode_minkowski_containment(a, [(A, X), (A2, X2)], beta, Y).feasible() != expected:
            disagreements += 1
    return CheckResult("containment_oracle", disagreements == 0, f"{disagreements} disagreements, {skipped} near-boundary skipped")


def check_receding_solution(N: int = 5) -> CheckResult:
    sys, cost = double_integrator()
    term = terminal_ingredients(sys, cost)
    bundle = build_receding(sys, cost, N, term).solve(np.array([-7.0, 0.0]))
    if not bundle.optimal:
        return CheckResult("receding_solution", False, f"solve returned {bundle.status.value}")
    slp = slp_residual(bundle.Phi_e, bundle.Phi_nu, bundle.Sigma, sys.A, sys.B).max_abs()
    report = RecedingChecker(sys, term).residuals(bundle, [-7.0, 0.0])
    ok = slp <= settings.CHECK_TOL and report.ok()
    return CheckResult("receding_solution", ok, f"slp residual {slp:.2e}, worst {report.worst()}")


def check_recursive_feasibility(N: int = 5, T: int = 8, seed: int = 0) -> CheckResult:
    sys, cost = double_integrator()
    term = terminal_ingredients(sys, cost)
    controller = RecedingController(sys, cost, N, term)
    record = closed_loop(controller, sys, cost, T, [-7.0, 0.0], SamplerSpec(), seed)
    worst = record.max_candidate_violation()
    ok = not record.aborted and record.violations == 0 and record.wbar_outside == 0 and worst <= settings.CHECK_TOL
    return CheckResult("recursive_feasibility", ok, f"{record.steps} steps, candidate violation {worst:.2e}")


CHECKS: tuple[Callable[[], CheckResult], ...] = (
    check_containment_oracle,
    check_receding_solution,
    check_recursive_feasibility,
)


def run_selftest() -> list[CheckResult]:
    results = []
    for check in CHECKS:
        try:
            result = check()
        except Exception as exc:  # a crashing check is a failed check
            result = CheckResult(check.__name__.removeprefix("check_"), False, f"{type(exc).__name__}: {exc}")
        logger.info("selftest %-24s %s  %s", result.name, "PASS" if result.passed else "FAIL", result.detail)
        results.append(result)
    return results
