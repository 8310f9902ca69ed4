"""
Solver-independent checks of MPC solutions.

Constraint residuals are evaluated by direct facet evaluation and exact
support functions of the fixed sets; a positive residual is a violation.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.optimize import linprog

from .config import settings
from .invariant import TerminalIngredients
from .polytope import Polytope, affine_image_supports, fused_offsets
from .slp import slp_residual, tube_offsets
from .sysmodel import UncertainLTI

logger = logging.getLogger(__name__)

# equality residuals, held to EQ_TOL rather than CHECK_TOL
EQUALITY_RESIDUALS = ("init", "dynamics", "slp", "filter_diagonal", "toeplitz")


@dataclass
class ResidualReport:
    residuals: dict[str, float] = field(default_factory=dict)

    def add(self, name: str, value: Any) -> None:
        value = float(np.max(value)) if np.size(value) else -np.inf
        self.residuals[name] = max(self.residuals.get(name, -np.inf), value)

    @property
    def max_violation(self) -> float:
        return max((max(v, 0.0) for v in self.residuals.values()), default=0.0)

    def ok(self, tol: float | None = None) -> bool:
        return self.max_violation <= (settings.CHECK_TOL if tol is None else tol)

    def worst(self) -> tuple[str, float]:
        return max(self.residuals.items(), key=lambda kv: kv[1])

    def admissible(self) -> bool:
        """Equalities within EQ_TOL and every membership within CHECK_TOL."""
        eq = max((self.residuals.get(k, 0.0) for k in EQUALITY_RESIDUALS), default=0.0)
        return eq <= settings.EQ_TOL and self.ok()


def scaled_offsets(Wbar: Polytope, sigma: Any) -> np.ndarray:
    """Offsets of sigma*Wbar for a scalar or per-axis sigma."""
    sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
    axes = Wbar.box_axes()
    if axes is not None and sigma.size == Wbar.dim:
        return sigma[axes] * Wbar.h
    return float(sigma[0]) * Wbar.h


def _common(sys: UncertainLTI, b: Any, x: Any, report: ResidualReport) -> None:
    N = b.N
    report.add("init", np.abs(b.z[0] - np.asarray(x, dtype=float)))
    dyn = b.z[1:] - b.z[:N] @ sys.A.T - b.v @ sys.B.T - b.p
    report.add("dynamics", np.abs(dyn))


def _tube_part(sys: UncertainLTI, b: Any, report: ResidualReport) -> None:
    N, Wbar = b.N, sys.Wbar
    report.add("slp", slp_residual(b.Phi_e, b.Phi_nu, b.Sigma, sys.A, sys.B).max_abs())
    report.add("filter_diagonal", max(np.max(np.abs(b.Phi_e[(i, i - 1)] - np.diag(b.sigma[i - 1]))) for i in range(1, N + 1)))
    report.add("sigma_floor", settings.SIGMA_MIN - np.min(b.sigma) - 1e-12)
    x_off = tube_offsets(b.Phi_e, Wbar, sys.X.H)
    u_off = tube_offsets(b.Phi_nu, Wbar, sys.U.H)
    for i in range(N):
        report.add("state", sys.X.H @ b.z[i] + x_off[i] - sys.X.h)
        report.add("input", sys.U.H @ b.v[i] + u_off[i] - sys.U.h)

    w_sup = sys.W.support_many(Wbar.H)
    for dA, dB in sys.delta_vertices:
        for i in range(N):
            psi = dA @ b.z[i] + dB @ b.v[i] - b.p[i]
            lhs = Wbar.H @ psi + w_sup
            for j in range(i):
                Psi = dA @ b.Phi_e[(i, j)] + dB @ b.Phi_nu[(i, j)] - b.Sigma[(i + 1, j)]
                lhs = lhs + Wbar.support_many(Wbar.H @ Psi)
            report.add("inclusion", lhs - scaled_offsets(Wbar, b.sigma[i]))


class RecedingChecker:
    """Residuals of the recursively feasible program, with Z_f supports computed once."""

    def __init__(self, sys: UncertainLTI, term: TerminalIngredients) -> None:
        self.sys = sys
        self.term = term
        Z_f, K = term.Z_f, term.K_f
        self.zf_x = affine_image_supports(Z_f, np.eye(sys.n), sys.X.H)
        self.zf_u = affine_image_supports(Z_f, K, sys.U.H)
        self.zf_cl = affine_image_supports(Z_f, sys.A + sys.B @ K, Z_f.H)
        self.zf_d = [affine_image_supports(Z_f, dA + dB @ K, sys.Wbar.H) for dA, dB in sys.delta_vertices]
        self.w_sup = sys.W.support_many(sys.Wbar.H)

    def residuals(self, b: Any, x: Any) -> ResidualReport:
        sys, term, N, Wbar = self.sys, self.term, b.N, self.sys.Wbar
        A, B = sys.A, sys.B
        report = ResidualReport()
        _common(sys, b, x, report)
        _tube_part(sys, b, report)
        alpha = float(b.alpha)
        report.add("alpha", -alpha)
        report.add(
            "toeplitz",
            max(
                (np.max(np.abs(b.Phi_e[(N, j - 1)] - A @ b.Phi_e[(N, j)] - B @ b.Phi_nu[(N, j)] - b.Xi[j])) for j in range(1, N)),
                default=0.0,
            ),
        )
        report.add("terminal_set", term.Z_f.H @ b.z[N] - alpha * term.Z_f.h)
        x_off = tube_offsets(b.Phi_e, Wbar, sys.X.H)[N]
        u_off = tube_offsets(b.Phi_nu, Wbar, sys.U.H)[N]
        report.add("terminal_state", alpha * self.zf_x + x_off - sys.X.h)
        report.add("terminal_input", alpha * self.zf_u + u_off - sys.U.h)
        Gamma = b.gamma(A, B)
        report.add("terminal_decrease", alpha * self.zf_cl + Wbar.support_many(term.Z_f.H @ Gamma) - alpha * term.Z_f.h)
        rhs = scaled_offsets(Wbar, b.sigma[N - 1])
        for (dA, dB), zf_d in zip(sys.delta_vertices, self.zf_d):
            lhs = alpha * zf_d + self.w_sup
            for j in range(N):
                Psi = dA @ b.Phi_e[(N, j)] + dB @ b.Phi_nu[(N, j)] - b.Xi[j]
                lhs = lhs + Wbar.support_many(Wbar.H @ Psi)
            report.add("terminal_inclusion", lhs - rhs)
        return report


def generic_residuals(sys: UncertainLTI, S_f: Polytope, b: Any, x: Any) -> ResidualReport:
    report = ResidualReport()
    _common(sys, b, x, report)
    _tube_part(sys, b, report)
    report.add("terminal_set", S_f.H @ b.z[b.N] + tube_offsets(b.Phi_e, sys.Wbar, S_f.H)[b.N] - S_f.h)
    return report


def nominal_residuals(sys: UncertainLTI, terminal: Polytope | None, b: Any, x: Any) -> ResidualReport:
    report = ResidualReport()
    _common(sys, b, x, report)
    for i in range(b.N):
        report.add("state", sys.X.H @ b.z[i] - sys.X.h)
        report.add("input", sys.U.H @ b.v[i] - sys.U.h)
    last = terminal if terminal is not None else sys.X
    report.add("terminal_set", last.H @ b.z[b.N] - last.h)
    return report


def primary_residuals(sys: UncertainLTI, entries: Sequence[Any], lam: Any, b: Any, x: Any, Z_f: Polytope) -> ResidualReport:
    """Residuals of the fused-memory program for slot entries (None for empty slots) and weights lam."""
    lam = np.asarray(lam, dtype=float)
    report = ResidualReport()
    _common(sys, b, x, report)
    report.add("simplex", -lam)
    report.add("simplex_sum", abs(lam.sum() - 1.0))
    used = [(l, e) for l, e in zip(lam, entries) if e is not None]
    coeffs = [l for l, _ in used]
    report.add("empty_slot", max((abs(l) for l, e in zip(lam, entries) if e is None), default=0.0))
    N = b.N
    for i in range(N):
        report.add("state", sys.X.H @ b.z[i] - fused_offsets(coeffs, [e.Z[i] for _, e in used]))
        report.add("input", sys.U.H @ b.v[i] - fused_offsets(coeffs, [e.V[i] for _, e in used]))
        for d, (dA, dB) in enumerate(sys.delta_vertices):
            psi = dA @ b.z[i] + dB @ b.v[i] - b.p[i]
            report.add("disturbance", sys.Wbar.H @ psi - fused_offsets(coeffs, [e.Q[d, i] for _, e in used]))
    alpha = sum(l * e.alpha for l, e in used)
    report.add("terminal_set", Z_f.H @ b.z[N] - alpha * Z_f.h)
    return report


def _membership(target: np.ndarray, blocks: list[np.ndarray], Wbar: Polytope, tol: float) -> bool:
    """Is target in the Minkowski sum of blocks[j] Wbar?"""
    n_w = Wbar.dim
    k = len(blocks)
    M = np.hstack(blocks)
    A_ub = [M, -M, np.kron(np.eye(k), Wbar.H)]
    b_ub = [target + tol, -target + tol, np.tile(Wbar.h, k) + tol]
    res = linprog(
        np.zeros(k * n_w),
        A_ub=np.vstack(A_ub),
        b_ub=np.concatenate(b_ub),
        bounds=[(None, None)] * (k * n_w),
        method="highs",
    )
    return res.status == 0


def eta_containment(sys: UncertainLTI, b: Any, rng: np.random.Generator, samples: int = 500, tol: float = 1e-7) -> int:
    """Sample realizations reachable inside the tubes and count combined uncertainties
    eta_i not covered by {p_i} plus the filtered auxiliary disturbances."""
    W_vertices = sys.W.vertices()
    Wbar_vertices = sys.Wbar.vertices()
    failures = 0
    for i in range(b.N):
        blocks = [b.Sigma[(i + 1, j)] for j in range(i + 1)]
        for _ in range(samples):
            dA, dB = sys.delta_vertices[rng.integers(sys.n_D)]
            w = W_vertices[rng.integers(len(W_vertices))]
            wbars = Wbar_vertices[rng.integers(len(Wbar_vertices), size=i)] if i else np.zeros((0, sys.n))
            x_i = b.z[i] + sum((b.Phi_e[(i, j)] @ wbars[j] for j in range(i)), np.zeros(sys.n))
            u_i = b.v[i] + sum((b.Phi_nu[(i, j)] @ wbars[j] for j in range(i)), np.zeros(sys.m))
            eta = dA @ x_i + dB @ u_i + w
            if not _membership(eta - b.p[i], blocks, sys.Wbar, tol * max(1.0, np.max(np.abs(eta)))):
                failures += 1
    if failures:
        logger.warning("eta containment failed for %d samples", failures)
    return failures
