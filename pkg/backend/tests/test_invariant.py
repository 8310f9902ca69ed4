# Code purpose: Test LQR, maximal RPI / RCI computation and the invariant-set cache

import numpy as np
import pytest

from app import models
from app.database import SessionLocal
from app.errors import NotStabilizable
from app.invariant import (
    cache_key,
    lqr_gain,
    max_rci,
    max_rpi,
    rci_set,
    rci_vertex_certificate,
    rpi_certificate,
    state_input_set,
    terminal_ingredients,
)
from app.polytope import Polytope


def test_lqr_gain_solves_riccati(di_sys, di_cost):
    A, B, Q, R = di_sys.A, di_sys.B, di_cost.Q, di_cost.R
    K, P = lqr_gain(A, B, Q, R)
    residual = Q + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A) - P
    assert np.max(np.abs(residual)) < 1e-6
    assert np.max(np.abs(np.linalg.eigvals(A + B @ K))) < 1.0
    assert np.allclose(P, di_cost.P_f)


def test_lqr_gain_rejects_unstabilizable():
    A = np.diag([2.0, 0.5])
    B = np.array([[0.0], [1.0]])
    with pytest.raises(NotStabilizable):
        lqr_gain(A, B, np.eye(2), np.eye(1), max_iter=500)


def test_lqr_gain_matches_scipy_dare(di_sys, di_cost):
    from scipy.linalg import solve_discrete_are

    _, P = lqr_gain(di_sys.A, di_sys.B, di_cost.Q, di_cost.R)
    assert np.allclose(P, solve_discrete_are(di_sys.A, di_sys.B, di_cost.Q, di_cost.R), atol=1e-6)


def test_lqr_gain_scalar_closed_form():
    # P = 1 + 0.25 P / (1 + P)  ->  P^2 - 0.25 P - 1 = 0
    K, P = lqr_gain(np.array([[0.5]]), np.array([[1.0]]), np.eye(1), np.eye(1))
    root = (0.25 + np.sqrt(0.0625 + 4.0)) / 2.0
    assert P[0, 0] == pytest.approx(root, abs=1e-8)
    assert K[0, 0] == pytest.approx(-0.5 * root / (1.0 + root), abs=1e-8)


def test_max_rpi_of_contraction():
    A_cl = 0.5 * np.eye(2)
    W = Polytope.from_inf_ball(2, 0.1)
    X = Polytope.from_inf_ball(2, 1.0)
    omega, iterations, converged = max_rpi(A_cl, W, X)
    assert converged
    assert iterations >= 1
    assert omega.subset_of(X)
    # A_cl omega + W must stay in omega
    V = omega.vertices()
    for v in V:
        for w in W.vertices():
            assert omega.contains(A_cl @ v + w, tol=1e-7)


def test_terminal_ingredients_certificates(di_sys, di_term):
    assert di_term.converged
    assert di_term.Z_f.subset_of(di_sys.X)
    assert di_term.Z_f.contains(np.zeros(2))
    X_kf = state_input_set(di_sys.X, di_sys.U, di_term.K_f)
    assert di_term.Z_f.subset_of(X_kf)
    assert rpi_certificate(di_term.Z_f, di_term.closed_loop(di_sys.A, di_sys.B), di_sys.Wbar)


def test_terminal_ingredients_cache_roundtrip(di_sys, di_cost):
    first = terminal_ingredients(di_sys, di_cost)
    second = terminal_ingredients(di_sys, di_cost)
    assert np.allclose(first.Z_f.H, second.Z_f.H)
    assert np.allclose(first.Z_f.h, second.Z_f.h)
    with SessionLocal() as session:
        assert session.query(models.InvariantSetCache).filter_by(kind="terminal_rpi").count() >= 1

    uncached = terminal_ingredients(di_sys, di_cost, use_cache=False)
    assert np.allclose(uncached.Z_f.h, first.Z_f.h)


def test_cache_key_is_canonical():
    assert cache_key("k", {"a": 1, "b": 2}) == cache_key("k", {"b": 2, "a": 1})
    assert cache_key("k", {"a": 1}) != cache_key("j", {"a": 1})


def test_max_rci_double_integrator(di_sys):
    omega = max_rci(di_sys)
    assert omega.subset_of(di_sys.X)
    assert omega.contains(np.zeros(2))
    assert rci_vertex_certificate(di_sys, omega)


def test_rci_set_is_cached_max_rci(di_sys):
    S = rci_set(di_sys)
    again = rci_set(di_sys)
    assert np.allclose(S.h, again.h)
    assert S.subset_of(max_rci(di_sys), tol=1e-6)
    assert max_rci(di_sys).subset_of(S, tol=1e-6)
