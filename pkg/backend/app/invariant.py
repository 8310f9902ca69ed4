"""
Offline set synthesis: LQR terminal gain, maximal RPI set of the auxiliary
dynamics x+ = (A + B K_f) x + wbar, and maximal RCI set of the true
uncertain dynamics (used as the region-of-attraction reference).
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

import numpy as np
from scipy.optimize import linprog

from .config import settings
from .errors import EmptyInvariantSet, NotConverged, NotStabilizable
from .polytope import Polytope, _unique_rows, encode_affine_containment

if TYPE_CHECKING:
    from sqlalchemy.orm import Session

    from .sysmodel import CostSpec, UncertainLTI

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class TerminalIngredients:
    K_f: np.ndarray
    Z_f: Polytope
    iterations: int
    converged: bool

    def closed_loop(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        return A + B @ self.K_f


def lqr_gain(A: Any, B: Any, Q: Any, R: Any, max_iter: int | None = None, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Riccati fixed-point iteration; returns (K_f, P_f) with u = K_f x."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float)
    B = B.reshape(A.shape[0], -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    max_iter = max_iter or settings.LQR_MAX_ITER

    P = Q.copy()
    for it in range(max_iter):
        BtP = B.T @ P
        gain = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = Q + A.T @ P @ A - A.T @ P @ B @ gain
        P_next = 0.5 * (P_next + P_next.T)
        residual = np.max(np.abs(P_next - P))
        P = P_next
        if not np.all(np.isfinite(P)):
            break
        if residual <= tol * max(1.0, np.max(np.abs(P))):
            K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
            rho = np.max(np.abs(np.linalg.eigvals(A + B @ K))) if A.size else 0.0
            if rho >= 1.0:
                raise NotStabilizable(f"Closed loop spectral radius {rho:.4f} >= 1.")
            logger.debug("Riccati iteration converged after %d steps", it + 1)
            return K, P
    raise NotStabilizable(f"Riccati iteration did not converge within {max_iter} steps.")


def _finite_rows(H: np.ndarray, h: np.ndarray, tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Drop zero rows; a zero row with negative offset means the set is empty."""
    norms = np.linalg.norm(H, axis=1)
    zero = norms <= tol
    if np.any(h[zero] < -1e-9):
        raise EmptyInvariantSet("Constraint 0 <= negative offset encountered.")
    return H[~zero], h[~zero]


def state_input_set(X: Polytope, U: Polytope, K: np.ndarray) -> Polytope:
    """X intersected with {x | K x in U}."""
    H, h = _finite_rows(U.H @ K, U.h)
    if H.size == 0:
        return X
    return Polytope(np.vstack([X.H, H]), np.concatenate([X.h, h]))


def max_rpi(A_cl: Any, Wbar: Polytope, X_kf: Polytope, max_iter: int | None = None) -> tuple[Polytope, int, bool]:
    """Maximal RPI subset of X_kf for x+ = A_cl x + wbar.

    Adds the rows H A_cl^t x <= h - sum_{s<t} h_Wbar((H A_cl^s)^T) until
    every new row is implied by the current set.
    """
    A_cl = np.atleast_2d(np.asarray(A_cl, dtype=float))
    rho = np.max(np.abs(np.linalg.eigvals(A_cl)))
    if rho >= 1.0:
        raise NotStabilizable(f"A_cl has spectral radius {rho:.4f} >= 1.")
    max_iter = max_iter or settings.RPI_MAX_ITER
    prune_every = 1 if X_kf.dim <= 3 else 20

    omega = X_kf.remove_redundant()
    M = X_kf.H.copy()
    tightening = np.zeros(X_kf.n_facets)
    for t in range(1, max_iter + 1):
        tightening += Wbar.support_many(M)
        M = M @ A_cl
        H_new, h_new = _finite_rows(M, X_kf.h - tightening)
        if H_new.size == 0:
            logger.debug("max_rpi converged at t=%d (nilpotent closed loop)", t)
            return omega, t, True
        worst = omega.support_many(H_new)
        violated = worst > h_new + 1e-9
        if not np.any(violated):
            logger.info("max_rpi converged after %d iterations with %d facets", t, omega.n_facets)
            return omega.remove_redundant(), t, True
        omega = Polytope(np.vstack([omega.H, H_new[violated]]), np.concatenate([omega.h, h_new[violated]]))
        if omega.is_empty():
            raise EmptyInvariantSet("Wbar is too large for the admissible state set.")
        if t % prune_every == 0:
            omega = omega.remove_redundant()
        logger.debug("max_rpi iteration %d: %d facets", t, omega.n_facets)
    raise NotConverged(f"max_rpi did not converge within {max_iter} iterations.")


def _eliminate_last(G: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Fourier-Motzkin elimination of the last variable from G y <= g."""
    c = G[:, -1]
    pos, neg, zero = c > 1e-12, c < -1e-12, np.abs(c) <= 1e-12
    rows = [G[zero, :-1]]
    offsets = [g[zero]]
    P, N = np.where(pos)[0], np.where(neg)[0]
    if P.size and N.size:
        pi, ni = np.meshgrid(P, N, indexing="ij")
        pi, ni = pi.ravel(), ni.ravel()
        cp_, cn = c[pi][:, None], -c[ni][:, None]
        rows.append((cn * G[pi] + cp_ * G[ni])[:, :-1])
        offsets.append(cn[:, 0] * g[pi] + cp_[:, 0] * g[ni])
    return np.vstack(rows), np.concatenate(offsets)


def robust_pre(sys: "UncertainLTI", omega: Polytope) -> tuple[np.ndarray, np.ndarray]:
    """Rows of {x | exists u in U: (A+dA)x + (B+dB)u + w in omega for every vertex and every w in W}."""
    n, m = sys.n, sys.m
    h_tight = omega.h - sys.W.support_many(omega.H)
    G_blocks, g_blocks = [], []
    for dA, dB in sys.delta_vertices:
        G_blocks.append(np.hstack([omega.H @ (sys.A + dA), omega.H @ (sys.B + dB)]))
        g_blocks.append(h_tight)
    G_blocks.append(np.hstack([np.zeros((sys.U.n_facets, n)), sys.U.H]))
    g_blocks.append(sys.U.h)
    G, g = np.vstack(G_blocks), np.concatenate(g_blocks)
    for _ in range(m):
        G, g = _eliminate_last(G, g)
        G, g = _finite_rows(G, g)
        if G.size:
            G, g = _unique_rows(G, g)
    return G, g


def max_rci(sys: "UncertainLTI", max_iter: int | None = None, tol: float = 1e-7) -> Polytope:
    """Maximal RCI subset of X for the true uncertain dynamics (n <= 3, m <= 2)."""
    if sys.n > 3 or sys.m > 2:
        raise NotConverged("max_rci supports n <= 3 and m <= 2 only.")
    max_iter = max_iter or settings.RCI_MAX_ITER
    omega = sys.X.remove_redundant()
    for k in range(1, max_iter + 1):
        try:
            G, g = robust_pre(sys, omega)
        except EmptyInvariantSet as exc:
            raise EmptyInvariantSet("Maximal RCI set is empty.") from exc
        # keep only pre-set rows that cut the current set
        V = omega.vertices()
        cutting = np.max(G @ V.T, axis=1) > g + 1e-10 if G.size else np.zeros(0, dtype=bool)
        if not np.any(cutting):
            logger.info("max_rci converged after %d iterations with %d facets", k, omega.n_facets)
            return omega
        candidate = Polytope(np.vstack([omega.H, G[cutting]]), np.concatenate([omega.h, g[cutting]]))
        if candidate.is_empty():
            raise EmptyInvariantSet("Maximal RCI set is empty.")
        candidate = candidate.remove_redundant()
        if omega.subset_of(candidate, tol):
            logger.info("max_rci converged after %d iterations", k)
            return candidate
        omega = candidate
        logger.debug("max_rci iteration %d: %d facets", k, omega.n_facets)
    raise NotConverged(f"max_rci did not converge within {max_iter} iterations.")


def rpi_certificate(Z_f: Polytope, A_cl: Any, Wbar: Polytope) -> bool:
    """A_cl Z_f + Wbar inside Z_f, checked through the multiplier encoding."""
    n = Z_f.dim
    blocks = encode_affine_containment(1.0, A_cl, 1.0, Z_f, np.eye(n), Wbar, Z_f)
    return blocks.feasible()


def rci_vertex_certificate(sys: "UncertainLTI", omega: Polytope, tol: float = 1e-7) -> bool:
    """Every vertex of omega admits one input keeping all vertex successors inside omega."""
    h_tight = omega.h - sys.W.support_many(omega.H)
    for x in omega.vertices():
        A_ub = [sys.U.H]
        b_ub = [sys.U.h]
        for dA, dB in sys.delta_vertices:
            A_ub.append(omega.H @ (sys.B + dB))
            b_ub.append(h_tight - omega.H @ (sys.A + dA) @ x + tol)
        res = linprog(
            np.zeros(sys.m),
            A_ub=np.vstack(A_ub),
            b_ub=np.concatenate(b_ub),
            bounds=[(None, None)] * sys.m,
            method="highs",
        )
        if res.status != 0:
            logger.warning("RCI certificate failed at vertex %s", x)
            return False
    return True


def cache_key(kind: str, payload: dict) -> str:
    blob = json.dumps({"kind": kind, **payload}, sort_keys=True, default=float)
    return hashlib.sha256(blob.encode()).hexdigest()


def _cached(kind: str, payload: dict, compute, session: "Session | None", recompute: bool) -> dict:
    """Look up / store a set record in the invariant-set cache table."""
    from . import models
    from .database import SessionLocal, init_db

    key = cache_key(kind, payload)
    own_session = session is None
    if own_session:
        init_db()
        session = SessionLocal()
    try:
        row = session.get(models.InvariantSetCache, key)
        if row is not None and not recompute:
            logger.info("Invariant-set cache hit for %s (%s)", kind, key[:12])
            return row.record
        logger.info("Computing %s (%s)", kind, key[:12])
        record = compute()
        if row is None:
            row = models.InvariantSetCache(key=key, kind=kind, record=record)
            session.add(row)
        else:
            row.record = record
        session.commit()
        return record
    finally:
        if own_session:
            session.close()


def terminal_ingredients(
    sys: "UncertainLTI",
    cost: "CostSpec",
    use_cache: bool = True,
    recompute: bool = False,
    session: "Session | None" = None,
) -> TerminalIngredients:
    K_f, _ = lqr_gain(sys.A, sys.B, cost.Q, cost.R)

    def compute() -> dict:
        X_kf = state_input_set(sys.X, sys.U, K_f)
        Z_f, iterations, converged = max_rpi(sys.A + sys.B @ K_f, sys.Wbar, X_kf)
        return {"Z_f": Z_f.to_record(), "iterations": iterations, "converged": converged}

    if use_cache:
        payload = {"system": sys.to_record(), "Q": cost.Q.tolist(), "R": cost.R.tolist(), "cap": settings.RPI_MAX_ITER}
        record = _cached("terminal_rpi", payload, compute, session, recompute)
    else:
        record = compute()
    return TerminalIngredients(
        K_f=K_f,
        Z_f=Polytope.from_record(record["Z_f"]),
        iterations=record["iterations"],
        converged=record["converged"],
    )


def rci_set(
    sys: "UncertainLTI",
    use_cache: bool = True,
    recompute: bool = False,
    session: "Session | None" = None,
) -> Polytope:
    def compute() -> dict:
        return max_rci(sys).to_record()

    if not use_cache:
        return Polytope.from_record(compute())
    payload = {"system": sys.to_record(), "cap": settings.RCI_MAX_ITER}
    return Polytope.from_record(_cached("max_rci", payload, compute, session, recompute))
