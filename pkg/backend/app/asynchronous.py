"""
Asynchronous computation scheme.

A slow secondary process optimizes tubes (system responses, filter and
terminal scaling) and hands tightened offsets to a finite memory; a fast
primary process only optimizes the nominal trajectory over a convex
combination of the memorized sets. Slot 0 always holds the fallback built
from the previous primary solution.

All memorized sets share the facet matrices of X, U and Wbar, so an entry
stores offsets only:

- ``Z[i]``: offsets of X minus F_i(Phi_e), i = 0..N
- ``V[i]``: offsets of U minus F_i(Phi_nu), i = 0..N
- ``Q[d, i]``: offsets of sigma_{i+1} Wbar minus F_i(Psi^d), i = 0..N
- ``Zs``, ``Vs``, ``Qs``: the same sets for the shifted responses, i = 0..N-1
"""
from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import cvxpy as cp
import numpy as np

from .errors import EmptyMemory, SecondaryInfeasible, SharedShapeViolation
from .invariant import TerminalIngredients
from .polytope import Polytope, fused_offsets
from .qp import CvxpySolver, QPProblem, SolutionStatus, make_solver
from .sltmpc import SolutionBundle, _nominal_cost, build_receding, verify_bundle
from .slp import BlockLowerTriangular, FilterRow, combine, combine_rows, shift, tube_offsets
from .sysmodel import CostSpec, UncertainLTI
from .verify import primary_residuals, scaled_offsets

logger = logging.getLogger(__name__)

EMA_KEEP = 0.8
FRESH_SCORE = 1.0
POLICIES = ("score", "rotate")


@dataclass(eq=False)
class MemoryEntry:
    Z: np.ndarray
    V: np.ndarray
    Q: np.ndarray
    Zs: np.ndarray
    Vs: np.ndarray
    Qs: np.ndarray
    alpha: float
    Phi_e: BlockLowerTriangular
    Phi_nu: BlockLowerTriangular
    Sigma: BlockLowerTriangular
    Xi: FilterRow
    sigma: np.ndarray
    score: float = FRESH_SCORE
    origin: str = "secondary"
    anchor: Optional[np.ndarray] = None

    @property
    def N(self) -> int:
        return self.Phi_e.N

    @property
    def sigma1(self) -> np.ndarray:
        return np.asarray(self.sigma[0])

    def gamma(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        return A @ self.Phi_e[(self.N, 0)] + B @ self.Phi_nu[(self.N, 0)] + self.Xi[0]

    def to_record(self) -> dict:
        return {
            "origin": self.origin,
            "score": self.score,
            "alpha": self.alpha,
            "anchor": None if self.anchor is None else np.asarray(self.anchor).tolist(),
            "offsets": {
                name: getattr(self, name).tolist() for name in ("Z", "V", "Q", "Zs", "Vs", "Qs")
            },
            "sigma": self.sigma.tolist(),
            "Phi_e": self.Phi_e.to_record(),
            "Phi_nu": self.Phi_nu.to_record(),
            "Sigma": self.Sigma.to_record(),
            "Xi": self.Xi.to_record(),
        }


def _psi(dA: np.ndarray, dB: np.ndarray, Phi_e, Phi_nu, Sigma, Xi, i: int, j: int) -> np.ndarray:
    """Psi^d[i, j]; the terminal row takes Xi_j in place of Sigma[N+1, j]."""
    filt = Xi[j] if i == Phi_e.N else Sigma[(i + 1, j)]
    return dA @ Phi_e[(i, j)] + dB @ Phi_nu[(i, j)] - filt


def tube_sets(sys: UncertainLTI, Phi_e, Phi_nu, Sigma, Xi, sigma) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Offsets (Z, V, Q) of the tightened sets and disturbance tubes for stages 0..N."""
    N, Wbar = Phi_e.N, sys.Wbar
    Z = sys.X.h - tube_offsets(Phi_e, Wbar, sys.X.H)
    V = sys.U.h - tube_offsets(Phi_nu, Wbar, sys.U.H)
    w_sup = sys.W.support_many(Wbar.H)
    Q = np.empty((sys.n_D, N + 1, Wbar.n_facets))
    for d, (dA, dB) in enumerate(sys.delta_vertices):
        for i in range(N + 1):
            scale = sigma[min(i, N - 1)]
            q = scaled_offsets(Wbar, scale) - w_sup
            for j in range(i):
                q = q - Wbar.support_many(Wbar.H @ _psi(dA, dB, Phi_e, Phi_nu, Sigma, Xi, i, j))
            Q[d, i] = q
    return Z, V, Q


def shifted_sets(sys: UncertainLTI, Z, V, Q, Phi_e, Phi_nu, Sigma, Xi) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Offsets of the sets generated by the shifted responses, stages 0..N-1.

    Shifting drops the first block column, so stage i of the shifted tube
    equals stage i+1 of the original with the (i+1, 0) term added back.
    """
    N, Wbar = Phi_e.N, sys.Wbar
    Zs = np.array([Z[i + 1] + Wbar.support_many(sys.X.H @ Phi_e[(i + 1, 0)]) for i in range(N)])
    Vs = np.array([V[i + 1] + Wbar.support_many(sys.U.H @ Phi_nu[(i + 1, 0)]) for i in range(N)])
    Qs = np.empty((sys.n_D, N, Wbar.n_facets))
    for d, (dA, dB) in enumerate(sys.delta_vertices):
        for i in range(N):
            Psi = _psi(dA, dB, Phi_e, Phi_nu, Sigma, Xi, i + 1, 0)
            Qs[d, i] = Q[d, i + 1] + Wbar.support_many(Wbar.H @ Psi)
    return Zs, Vs, Qs


def make_entry(
    sys: UncertainLTI,
    Phi_e: BlockLowerTriangular,
    Phi_nu: BlockLowerTriangular,
    Sigma: BlockLowerTriangular,
    Xi: FilterRow,
    sigma: np.ndarray,
    alpha: float,
    origin: str = "secondary",
    anchor: Any = None,
    offsets: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
) -> MemoryEntry:
    Z, V, Q = offsets if offsets is not None else tube_sets(sys, Phi_e, Phi_nu, Sigma, Xi, sigma)
    Zs, Vs, Qs = shifted_sets(sys, Z, V, Q, Phi_e, Phi_nu, Sigma, Xi)
    return MemoryEntry(
        Z=Z,
        V=V,
        Q=Q,
        Zs=Zs,
        Vs=Vs,
        Qs=Qs,
        alpha=float(alpha),
        Phi_e=Phi_e,
        Phi_nu=Phi_nu,
        Sigma=Sigma,
        Xi=Xi,
        sigma=np.asarray(sigma, dtype=float),
        origin=origin,
        anchor=None if anchor is None else np.asarray(anchor, dtype=float),
    )


def entry_from_bundle(sys: UncertainLTI, bundle: SolutionBundle, origin: str = "secondary", anchor: Any = None) -> MemoryEntry:
    return make_entry(
        sys, bundle.Phi_e, bundle.Phi_nu, bundle.Sigma, bundle.Xi, bundle.sigma, bundle.alpha, origin=origin, anchor=anchor
    )


class Memory:
    """Fixed-capacity slot store; slot 0 is reserved for the fallback entry once one exists."""

    def __init__(self, capacity: int) -> None:
        if capacity < 2:
            raise ValueError("Memory needs a fallback slot and at least one secondary slot.")
        self.capacity = capacity
        self.slots: list[Optional[MemoryEntry]] = [None] * capacity
        self.lock = threading.Lock()

    def __len__(self) -> int:
        return sum(e is not None for e in self.slots)

    @property
    def is_full(self) -> bool:
        return all(e is not None for e in self.slots)

    def snapshot(self) -> tuple[Optional[MemoryEntry], ...]:
        with self.lock:
            return tuple(self.slots)

    def seed(self, entries: dict[int, MemoryEntry]) -> None:
        with self.lock:
            for slot, entry in entries.items():
                if not 0 <= slot < self.capacity:
                    raise IndexError(f"Slot {slot} outside memory of size {self.capacity}.")
                self.slots[slot] = entry

    def record_usage(self, lam: Sequence[float]) -> None:
        """Exponential moving average of the fusion weights."""
        with self.lock:
            for entry, weight in zip(self.slots, lam):
                if entry is not None:
                    entry.score = EMA_KEEP * entry.score + (1.0 - EMA_KEEP) * float(weight)

    def select_slot(self) -> int:
        """Slot 1..M-1 with the lowest score, lowest index on ties."""
        scores = [self.slots[m].score for m in range(1, self.capacity)]
        return 1 + int(np.argmin(scores))

    def dump(self, directory: str | Path) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        for m, entry in enumerate(self.snapshot()):
            if entry is None:
                continue
            path = directory / f"slot_{m}.json"
            path.write_text(json.dumps(entry.to_record()))
            written.append(path)
        return written


def update_memory_secondary(memory: Memory, entry_new: MemoryEntry, policy: str = "score") -> int:
    """Store a fresh secondary entry; returns the slot written. Slot 0 is only used while empty."""
    if policy not in POLICIES:
        raise ValueError(f"Unknown memory policy '{policy}'.")
    with memory.lock:
        entry_new.score = FRESH_SCORE
        if policy == "rotate":
            if memory.capacity > 2:
                memory.slots[2] = memory.slots[1]
            slot = 1
        elif not memory.is_full:
            slot = memory.slots.index(None)
        else:
            slot = memory.select_slot()
        memory.slots[slot] = entry_new
    logger.info("Secondary entry stored in slot %d (%s policy)", slot, policy)
    return slot


def _weights(lam: Any, entries: Sequence[Optional[MemoryEntry]]) -> list[tuple[float, MemoryEntry]]:
    lam = np.clip(np.asarray(lam, dtype=float), 0.0, None)
    lam = np.where([e is None for e in entries], 0.0, lam)
    total = lam.sum()
    if total <= 0:
        raise EmptyMemory("Fusion weights vanish on every occupied slot.")
    lam = lam / total
    return [(float(l), e) for l, e in zip(lam, entries) if e is not None and l > 0.0]


def fallback_entry(sys: UncertainLTI, entries: Sequence[Optional[MemoryEntry]], lam: Any) -> MemoryEntry:
    """Convex combination of the shifted tubes of every weighted entry."""
    used = _weights(lam, entries)
    coeffs = [l for l, _ in used]
    N = used[0][1].N
    entries_used = [e for _, e in used]
    Z = np.vstack([fused_offsets(coeffs, [e.Zs for e in entries_used]), fused_offsets(coeffs, [e.Z[N] for e in entries_used])])
    V = np.vstack([fused_offsets(coeffs, [e.Vs for e in entries_used]), fused_offsets(coeffs, [e.V[N] for e in entries_used])])
    Q = np.concatenate(
        [fused_offsets(coeffs, [e.Qs for e in entries_used]), fused_offsets(coeffs, [e.Q[:, N:] for e in entries_used])], axis=1
    )
    Phi_e = combine(coeffs, [shift(e.Phi_e, e.Phi_e.last_row()) for _, e in used])
    Phi_nu = combine(coeffs, [shift(e.Phi_nu, e.Phi_nu.last_row()) for _, e in used])
    Sigma = combine(coeffs, [shift(e.Sigma, list(e.Xi.blocks[1:]) + [np.diag(e.sigma[N - 1])]) for _, e in used])
    Xi = combine_rows(coeffs, [e.Xi for _, e in used])
    sigma = sum(l * np.vstack([e.sigma[1:], e.sigma[N - 1 :]]) for l, e in used)
    alpha = sum(l * e.alpha for l, e in used)
    return make_entry(sys, Phi_e, Phi_nu, Sigma, Xi, sigma, alpha, origin="fallback", offsets=(Z, V, Q))


def store_fallback(memory: Memory, solution: SolutionBundle, snapshot: Sequence[Optional[MemoryEntry]], sys: UncertainLTI) -> Memory:
    """Write the fallback built from the primary solution into slot 0."""
    entry = fallback_entry(sys, snapshot, solution.lam)
    with memory.lock:
        previous = memory.slots[0]
        entry.score = previous.score if previous is not None else FRESH_SCORE
        memory.slots[0] = entry
    return memory


class SecondaryProcess:
    """Tube optimization with the tube-size objective, anchored at a given state."""

    def __init__(
        self,
        sys: UncertainLTI,
        cost: CostSpec,
        N: int,
        term: TerminalIngredients,
        sigma_mode: str = "scalar",
        alpha_weight: float = 1.0,
        solver: CvxpySolver | None = None,
    ) -> None:
        self.sys = sys
        self.template = build_receding(
            sys, cost, N, term, sigma_mode, objective="tube", alpha_weight=alpha_weight, solver=solver
        )

    def run(self, anchor: Any) -> MemoryEntry:
        bundle = self.template.solve(anchor)
        if not bundle.optimal:
            raise SecondaryInfeasible(f"Secondary problem {bundle.status.value} at anchor {np.asarray(anchor)}.")
        logger.info("Secondary solve at %s: alpha=%.4f in %.3fs", np.round(anchor, 3), bundle.alpha, bundle.solve_time)
        return entry_from_bundle(self.sys, bundle, anchor=anchor)


def run_secondary(
    sys: UncertainLTI,
    cost: CostSpec,
    N: int,
    term: TerminalIngredients,
    anchor: Any,
    sigma_mode: str = "scalar",
    alpha_weight: float = 1.0,
) -> MemoryEntry:
    return SecondaryProcess(sys, cost, N, term, sigma_mode, alpha_weight).run(anchor)


class PrimaryTemplate:
    """Nominal trajectory over the fused memory; offsets enter as parameters."""

    def __init__(
        self, sys: UncertainLTI, cost: CostSpec, N: int, capacity: int, Z_f: Polytope, solver: CvxpySolver | None = None
    ) -> None:
        self.sys, self.cost, self.N, self.capacity, self.Z_f = sys, cost, N, capacity, Z_f
        n, m, M = sys.n, sys.m, capacity
        z = cp.Variable((N + 1, n), name="z")
        v = cp.Variable((N, m), name="v")
        p = cp.Variable((N, n), name="p")
        lam = cp.Variable(M, nonneg=True, name="lambda")
        self.x0 = cp.Parameter(n, name="x0")
        self.active = cp.Parameter(M, nonneg=True, name="active")
        self.alphas = cp.Parameter(M, nonneg=True, name="alphas")
        self.Zp = [cp.Parameter((sys.X.n_facets, M), name=f"Z_{i}") for i in range(N)]
        self.Vp = [cp.Parameter((sys.U.n_facets, M), name=f"V_{i}") for i in range(N)]
        self.Qp = [[cp.Parameter((sys.Wbar.n_facets, M), name=f"Q_{d}_{i}") for i in range(N)] for d in range(sys.n_D)]

        cons = [z[0] == self.x0, z[1:] == z[:N] @ sys.A.T + v @ sys.B.T + p, cp.sum(lam) == 1, lam <= self.active]
        if sys.is_uncertainty_free:
            cons.append(p == 0)
        for i in range(N):
            cons += [sys.X.H @ z[i] <= fused_offsets(lam, self.Zp[i]), sys.U.H @ v[i] <= fused_offsets(lam, self.Vp[i])]
            for d, (dA, dB) in enumerate(sys.delta_vertices):
                cons.append(sys.Wbar.H @ (dA @ z[i] + dB @ v[i] - p[i]) <= fused_offsets(lam, self.Qp[d][i]))
        cons.append(Z_f.H @ z[N] <= (self.alphas @ lam) * Z_f.h)
        objective = _nominal_cost(z, v, cost, N) + cost.lambda0_reg * lam[0]
        self.z, self.v, self.p, self.lam = z, v, p, lam
        params = {"x0": self.x0, "active": self.active, "alphas": self.alphas}
        self.qp = QPProblem(f"primary_N{N}_M{M}", cp.Problem(cp.Minimize(objective), cons), {"z": z, "v": v, "p": p, "lambda": lam}, params)
        self.solver = solver or make_solver()
        self.snapshot: list[Optional[MemoryEntry]] = [None] * capacity

    def load(self, snapshot: Sequence[Optional[MemoryEntry]]) -> None:
        if len(snapshot) != self.capacity:
            raise ValueError(f"Snapshot has {len(snapshot)} slots, template expects {self.capacity}.")
        if all(e is None for e in snapshot):
            raise EmptyMemory("Primary process needs at least one memory entry.")
        sys, N, M = self.sys, self.N, self.capacity
        Z = np.zeros((N, sys.X.n_facets, M))
        V = np.zeros((N, sys.U.n_facets, M))
        Q = np.zeros((sys.n_D, N, sys.Wbar.n_facets, M))
        alphas = np.zeros(M)
        for m, entry in enumerate(snapshot):
            if entry is None:
                continue
            if entry.N != N or entry.Z.shape[1] != sys.X.n_facets or entry.V.shape[1] != sys.U.n_facets or entry.Q.shape[2] != sys.Wbar.n_facets:
                raise SharedShapeViolation(f"Slot {m} does not share the facet matrices of X, U, Wbar.")
            Z[:, :, m] = entry.Z[:N]
            V[:, :, m] = entry.V[:N]
            Q[:, :, :, m] = entry.Q[:, :N]
            alphas[m] = max(entry.alpha, 0.0)
        for i in range(N):
            self.Zp[i].value = Z[i]
            self.Vp[i].value = V[i]
            for d in range(sys.n_D):
                self.Qp[d][i].value = Q[d, i]
        self.alphas.value = alphas
        self.active.value = np.array([0.0 if e is None else 1.0 for e in snapshot])
        self.snapshot = list(snapshot)

    def solve(self, x: Any, warm: SolutionBundle | None = None) -> SolutionBundle:
        self.qp.set_parameters(x0=x)
        if warm is not None and warm.z is not None:
            self.z.value, self.v.value, self.p.value = warm.z, warm.v, warm.p
            if warm.lam is not None:
                self.lam.value = warm.lam
        raw = self.solver.solve(self.qp, warm_start=warm is not None)
        if raw.status is not SolutionStatus.OPTIMAL:
            logger.warning("Primary solve returned %s", raw.status.value)
            return SolutionBundle(raw.status, self.N, kind="primary", solve_time=raw.solve_time)
        bundle = SolutionBundle(
            SolutionStatus.OPTIMAL,
            self.N,
            kind="primary",
            z=np.asarray(self.z.value),
            v=np.asarray(self.v.value),
            p=np.asarray(self.p.value),
            lam=np.asarray(self.lam.value),
            objective=raw.objective,
            solve_time=raw.solve_time,
        )
        report = primary_residuals(self.sys, self.snapshot, bundle.lam, bundle, x, self.Z_f)
        return verify_bundle(bundle, report, raw.inaccurate, self.qp.name)


def build_primary(
    sys: UncertainLTI, cost: CostSpec, N: int, memory: Memory, Z_f: Polytope, solver: CvxpySolver | None = None
) -> PrimaryTemplate:
    """Template sized to the memory, loaded with its current entries when any are stored."""
    template = PrimaryTemplate(sys, cost, N, memory.capacity, Z_f, solver)
    snapshot = memory.snapshot()
    if any(e is not None for e in snapshot):
        template.load(snapshot)
    return template


def fused_sigma1(entries: Sequence[Optional[MemoryEntry]], lam: Any) -> np.ndarray:
    return sum(l * e.sigma1 for l, e in _weights(lam, entries))


def primary_candidate(
    sys: UncertainLTI,
    prev: SolutionBundle,
    entries: Sequence[Optional[MemoryEntry]],
    wbar: Any,
    K_f: np.ndarray,
    cost: CostSpec | None = None,
) -> SolutionBundle:
    """Shifted primary solution, feasible for the memory once the fallback sits in slot 0."""
    used = _weights(prev.lam, entries)
    wbar = np.asarray(wbar, dtype=float)
    A, B, N = sys.A, sys.B, prev.N

    def fused(fn) -> np.ndarray:
        return sum(l * fn(e) for l, e in used)

    z = np.empty_like(prev.z)
    v = np.empty_like(prev.v)
    p = np.empty_like(prev.p)
    for i in range(N):
        z[i] = prev.z[i + 1] + fused(lambda e: e.Phi_e[(i + 1, 0)] @ wbar)
    z[N] = (A + B @ K_f) @ prev.z[N] + fused(lambda e: e.gamma(A, B) @ wbar)
    for i in range(N - 1):
        v[i] = prev.v[i + 1] + fused(lambda e: e.Phi_nu[(i + 1, 0)] @ wbar)
        p[i] = prev.p[i + 1] + fused(lambda e: e.Sigma[(i + 2, 0)] @ wbar)
    v[N - 1] = K_f @ prev.z[N] + fused(lambda e: e.Phi_nu[(N, 0)] @ wbar)
    p[N - 1] = fused(lambda e: e.Xi[0] @ wbar)
    lam = np.zeros(len(entries))
    lam[0] = 1.0
    candidate = SolutionBundle(SolutionStatus.OPTIMAL, N, kind="primary_candidate", z=z, v=v, p=p, lam=lam)
    if cost is not None:
        candidate.objective = candidate.nominal_objective(cost) + cost.lambda0_reg
    return candidate
