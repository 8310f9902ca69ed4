# Code purpose: Test the tube MPC programs, the candidate shift and the decrease check

from dataclasses import replace

import numpy as np
import pytest

from app.config import settings
from app.errors import DegenerateSigma, IncompatibleTerminalSet, ShapeMismatch, WbarOutsideSet
from app.invariant import rci_set, terminal_ingredients
from app.polytope import Polytope
from app.qp import SolutionStatus
from app.slp import slp_residual
from app.sltmpc import (
    RobustStep,
    build_generic,
    build_nominal,
    build_receding,
    candidate_shift,
    equivalent_disturbance,
    max_terminal_scaling,
    value_decrease_check,
    verify_bundle,
)
from app.sysmodel import double_integrator, double_integrator_skewed
from app.verify import RecedingChecker, generic_residuals

X0 = np.array([-7.0, 0.0])


@pytest.fixture(scope="module")
def receding(di_sys, di_cost, di_term):
    return build_receding(di_sys, di_cost, 5, di_term)


@pytest.fixture(scope="module")
def solution(receding):
    bundle = receding.solve(X0)
    assert bundle.optimal
    return bundle


def test_receding_solution_satisfies_every_constraint(di_sys, di_term, solution):
    assert solution.kind == "receding"
    assert np.allclose(solution.z[0], X0, atol=1e-7)
    assert slp_residual(solution.Phi_e, solution.Phi_nu, solution.Sigma, di_sys.A, di_sys.B).max_abs() <= settings.CHECK_TOL
    report = RecedingChecker(di_sys, di_term).residuals(solution, X0)
    assert report.ok(), report.worst()
    assert solution.alpha >= 0.0
    assert np.all(solution.sigma >= settings.SIGMA_MIN - 1e-9)


def test_objective_is_the_nominal_cost(di_cost, solution):
    assert np.isclose(solution.objective, solution.nominal_objective(di_cost), rtol=1e-5, atol=1e-6)


def test_infeasible_outside_state_set(receding):
    bundle = receding.solve(np.array([9.0, 9.0]))
    assert not bundle.optimal
    assert bundle.status in (SolutionStatus.INFEASIBLE, SolutionStatus.NUMERICAL_FAILURE)
    assert not receding.feasible(np.array([9.0, 9.0]))


def test_candidate_shift_is_feasible(di_sys, di_cost, di_term, solution):
    checker = RecedingChecker(di_sys, di_term)
    for wbar in (np.zeros(2), di_sys.Wbar.vertices()[0], np.array([0.05, -0.1])):
        x_next = di_sys.nominal_step(X0, solution.control) + solution.p[0] + solution.sigma1 * wbar
        candidate = candidate_shift(solution, wbar, di_term, di_sys, di_cost)
        assert candidate.kind == "candidate"
        assert np.allclose(candidate.z[0], x_next, atol=1e-8)
        assert checker.residuals(candidate, x_next).max_violation <= settings.CHECK_TOL
        assert np.isclose(candidate.objective, candidate.nominal_objective(di_cost))


def test_candidate_shift_rejects_outside_wbar(di_sys, di_cost, di_term, solution):
    with pytest.raises(WbarOutsideSet):
        candidate_shift(solution, np.array([1.0, 1.0]), di_term, di_sys, di_cost)


def test_equivalent_disturbance(di_sys):
    x, u, p0 = np.array([1.0, 2.0]), np.array([0.5]), np.array([0.01, 0.0])
    wbar = np.array([0.02, -0.04])
    x_next = di_sys.nominal_step(x, u) + p0 + 0.5 * wbar
    assert np.allclose(equivalent_disturbance(di_sys, x, x_next, u, p0, 0.5), wbar)
    diag = np.array([0.5, 0.25])
    x_next = di_sys.nominal_step(x, u) + p0 + diag * wbar
    assert np.allclose(equivalent_disturbance(di_sys, x, x_next, u, p0, diag), wbar)
    with pytest.raises(DegenerateSigma):
        equivalent_disturbance(di_sys, x, x_next, u, p0, 0.0)


def test_value_decrease_check():
    quiet = value_decrease_check(10.0, 8.0, 2.0, 0.0)
    assert quiet.disturbance_free
    assert not quiet.violated
    assert np.isclose(quiet.slack, 0.0)

    bad = value_decrease_check(10.0, 9.0, 2.0, 0.0)
    assert bad.violated

    disturbed = value_decrease_check(10.0, 9.0, 2.0, 0.1)
    assert not disturbed.disturbance_free
    assert not disturbed.violated

    # the tolerance is absolute, a large value function does not widen it
    large = value_decrease_check(2000.0, 1990.001, 10.0, 0.0)
    assert large.slack == pytest.approx(0.001)
    assert large.violated
    assert not value_decrease_check(2000.0, 1990.0000005, 10.0, 0.0).violated


def test_uncertainty_free_reduces_to_nominal_mpc():
    sys, cost = double_integrator(eps_A=0.0, eps_B=0.0, sigma_w=0.0)
    term = terminal_ingredients(sys, cost)
    alpha_max = max_terminal_scaling(sys, term)
    x0 = np.array([-5.0, 1.0])
    tube = build_receding(sys, cost, 5, term).solve(x0)
    nominal = build_nominal(sys, cost, 5, term.Z_f.scale(alpha_max)).solve(x0)
    assert tube.optimal and nominal.optimal
    assert np.allclose(tube.p, 0.0, atol=1e-8)
    assert tube.objective == pytest.approx(nominal.objective, rel=1e-6, abs=1e-6)
    assert np.allclose(tube.control, nominal.control, atol=1e-3)


def test_generic_program_with_rci_terminal_set(di_sys, di_cost):
    S_f = rci_set(di_sys)
    x0 = np.array([-3.0, 0.5])
    bundle = build_generic(di_sys, di_cost, 4, S_f).solve(x0)
    assert bundle.optimal
    assert bundle.kind == "generic"
    assert bundle.Xi is None
    assert generic_residuals(di_sys, S_f, bundle, x0).ok()


def test_generic_rejects_terminal_set_outside_x(di_sys, di_cost):
    with pytest.raises(IncompatibleTerminalSet):
        build_generic(di_sys, di_cost, 3, Polytope.from_inf_ball(2, 10.0))
    with pytest.raises(ShapeMismatch):
        build_generic(di_sys, di_cost, 3, Polytope.from_inf_ball(3, 1.0))
    with pytest.raises(ValueError):
        build_generic(di_sys, di_cost, 0, rci_set(di_sys))


def test_robust_step_keeps_vertex_successors(di_sys, di_cost):
    S_f = rci_set(di_sys)
    x = S_f.vertices()[0] * 0.9
    bundle = RobustStep(di_sys, di_cost, S_f).solve(x)
    assert bundle.optimal
    assert bundle.kind == "csp"
    u = bundle.control
    assert di_sys.U.contains(u, tol=1e-7)
    for weights in np.eye(di_sys.n_D):
        for w in di_sys.W.vertices():
            assert S_f.contains(di_sys.true_step(x, u, weights, w), tol=1e-6)


def test_sigma_modes():
    sys, cost = double_integrator_skewed()
    term = terminal_ingredients(sys, cost)
    with pytest.raises(ShapeMismatch):
        build_receding(sys, cost, 3, term, sigma_mode="diagonal")
    with pytest.raises(ValueError):
        build_receding(sys, cost, 3, term, sigma_mode="full")


def test_diagonal_mode_on_box_wbar():
    sys, cost = double_integrator_skewed(wbar="box")
    term = terminal_ingredients(sys, cost)
    bundle = build_receding(sys, cost, 4, term, sigma_mode="diagonal").solve(np.array([-3.0, 0.0]))
    assert bundle.optimal
    assert bundle.sigma.shape == (4, 2)
    assert RecedingChecker(sys, term).residuals(bundle, [-3.0, 0.0]).ok()


def test_tube_objective_and_frozen_tubes(di_sys, di_cost, di_term):
    secondary = build_receding(di_sys, di_cost, 5, di_term, objective="tube").solve(X0)
    assert secondary.optimal
    assert secondary.kind == "secondary"
    frozen = build_receding(di_sys, di_cost, 5, di_term, frozen=secondary).solve(X0)
    assert frozen.optimal
    assert frozen.kind == "frozen"
    assert np.allclose(frozen.Phi_e.to_dense(), secondary.Phi_e.to_dense())
    assert frozen.alpha == pytest.approx(secondary.alpha)
    with pytest.raises(ValueError):
        build_receding(di_sys, di_cost, 5, di_term, objective="minimax")


def test_row_extent_and_triplet_export(receding, tmp_path):
    extent = receding.row_extent(0.0)
    assert extent is not None
    lo, hi = extent
    assert lo <= -7.0 <= hi
    path = receding.export_triplets(tmp_path / "receding.txt")
    text = path.read_text()
    for section in ("[P]", "[A]", "[q]", "[l]", "[u]"):
        assert section in text


def test_warm_start_from_candidate(di_sys, di_cost, di_term, receding, solution):
    wbar = np.zeros(2)
    x_next = di_sys.nominal_step(X0, solution.control) + solution.p[0]
    candidate = candidate_shift(solution, wbar, di_term, di_sys, di_cost)
    warm = receding.solve(x_next, warm=candidate)
    assert warm.optimal
    assert warm.objective <= candidate.objective + 1e-5 * max(1.0, abs(candidate.objective))


def test_uncertainty_free_generic_program_is_nominal_mpc():
    sys, cost = double_integrator(eps_A=0.0, eps_B=0.0, sigma_w=0.0)
    term = terminal_ingredients(sys, cost)
    for x0 in (np.array([-3.0, 0.5]), np.array([2.0, -1.0])):
        tube = build_generic(sys, cost, 5, term.Z_f).solve(x0)
        nominal = build_nominal(sys, cost, 5, term.Z_f).solve(x0)
        assert tube.optimal and nominal.optimal
        assert np.allclose(tube.p, 0.0, atol=1e-8)
        assert tube.objective == pytest.approx(nominal.objective, rel=1e-6, abs=1e-6)


def test_diagonal_scalings_never_cost_more_than_scalar():
    sys, cost = double_integrator_skewed(wbar="box")
    term = terminal_ingredients(sys, cost)
    scalar = build_receding(sys, cost, 4, term, sigma_mode="scalar")
    diagonal = build_receding(sys, cost, 4, term, sigma_mode="diagonal")
    compared = 0
    for x0 in ([-3.0, 0.0], [-5.0, 1.0], [-6.0, 0.0], [2.0, -1.0], [-4.0, 2.0], [5.0, -2.0]):
        s = scalar.solve(x0)
        if not s.optimal:
            continue
        d = diagonal.solve(x0)
        assert d.optimal, x0
        assert d.objective <= s.objective + 1e-6 * max(1.0, abs(s.objective))
        compared += 1
    assert compared >= 3


def test_solves_record_their_post_check(solution):
    assert solution.info["max_violation"] <= settings.CHECK_TOL
    assert solution.info["inaccurate"] is False
    assert "rejected" not in solution.info


def test_verify_bundle_rejects_broken_equalities(di_sys, di_term, solution):
    checker = RecedingChecker(di_sys, di_term)
    # memberships stay within CHECK_TOL, the dynamics residual does not stay within EQ_TOL
    bent = replace(solution, z=solution.z.copy(), info={})
    bent.z[1] += np.array([5e-7, 0.0])
    report = checker.residuals(bent, X0)
    assert report.ok()
    assert not report.admissible()
    verify_bundle(bent, report, inaccurate=True)
    assert bent.status is SolutionStatus.NUMERICAL_FAILURE
    assert not bent.optimal
    assert bent.info["inaccurate"] is True
    assert "rejected" in bent.info

    # a reduced-accuracy solution that passes every check keeps its status
    kept = replace(solution, info={})
    verify_bundle(kept, checker.residuals(kept, X0), inaccurate=True)
    assert kept.optimal
    assert kept.info["inaccurate"] is True

    broken = replace(solution, z=solution.z.copy(), info={})
    broken.z[1] += np.array([1e-3, 0.0])
    verify_bundle(broken, checker.residuals(broken, X0))
    assert broken.status is SolutionStatus.NUMERICAL_FAILURE
