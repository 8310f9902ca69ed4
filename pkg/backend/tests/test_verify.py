# Code purpose: Test the post-solve residual checks

import numpy as np
import pytest

from app.polytope import Polytope
from app.sltmpc import build_receding
from app.verify import RecedingChecker, ResidualReport, eta_containment, scaled_offsets


def test_residual_report_tracks_worst():
    report = ResidualReport()
    report.add("state", np.array([-1.0, 2e-7]))
    report.add("state", np.array([-3.0]))
    report.add("input", np.array([5e-6]))
    report.add("empty", np.array([]))
    assert report.residuals["state"] == pytest.approx(2e-7)
    assert report.max_violation == pytest.approx(5e-6)
    assert report.worst() == ("input", pytest.approx(5e-6))
    assert not report.ok()
    assert report.ok(tol=1e-5)


def test_scaled_offsets():
    box = Polytope.from_box([-1.0, -2.0], [1.0, 2.0])
    assert np.allclose(scaled_offsets(box, 0.5), 0.5 * box.h)
    axes = box.box_axes()
    sigma = np.array([0.5, 0.25])
    assert np.allclose(scaled_offsets(box, sigma), sigma[axes] * box.h)


def test_checker_detects_corrupted_solution(di_sys, di_cost, di_term):
    x0 = np.array([-4.0, 1.0])
    bundle = build_receding(di_sys, di_cost, 4, di_term).solve(x0)
    checker = RecedingChecker(di_sys, di_term)
    assert checker.residuals(bundle, x0).ok()

    bundle.z = bundle.z.copy()
    bundle.z[2] += np.array([0.5, 0.0])
    report = checker.residuals(bundle, x0)
    assert not report.ok()
    assert report.residuals["dynamics"] >= 0.4


def test_eta_containment_on_solution(di_sys, di_cost, di_term, rng):
    bundle = build_receding(di_sys, di_cost, 4, di_term).solve(np.array([-4.0, 1.0]))
    assert eta_containment(di_sys, bundle, rng, samples=20) == 0
