"""
Closed-loop controllers.

Each controller answers ``control(x, k)`` with the input to apply and is
told the realized successor through ``observe(x, u, x_next)``, which is
where the equivalent disturbance is reconstructed and the next shifted
candidate is built and audited.
"""
from __future__ import annotations

import logging
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Optional, Protocol, Sequence

import numpy as np

from .asynchronous import (
    Memory,
    SecondaryProcess,
    build_primary,
    fused_sigma1,
    primary_candidate,
    store_fallback,
    update_memory_secondary,
)
from .config import settings
from .errors import ControllerInfeasible, SecondaryInfeasible, WbarOutsideSet
from .invariant import TerminalIngredients
from .polytope import Polytope
from .sltmpc import (
    MPCTemplate,
    RobustStep,
    SolutionBundle,
    build_generic,
    build_receding,
    candidate_shift,
    equivalent_disturbance,
    value_decrease_check,
)
from .sysmodel import CostSpec, UncertainLTI
from .verify import RecedingChecker, eta_containment, primary_residuals

logger = logging.getLogger(__name__)


@dataclass
class ControlDecision:
    u: np.ndarray
    status: str
    solve_time: float = 0.0
    objective: float = float("nan")
    lam: Optional[np.ndarray] = None
    event: Optional[str] = None
    info: dict = field(default_factory=dict)


class Controller(Protocol):
    name: str

    def reset(self, x0: Any) -> None: ...

    def control(self, x: np.ndarray, k: int) -> ControlDecision: ...

    def observe(self, x: np.ndarray, u: np.ndarray, x_next: np.ndarray) -> dict: ...


class RecedingController:
    """Recursively feasible tube MPC, warm started and backed up by the shifted candidate."""

    name = "receding"

    def __init__(
        self,
        sys: UncertainLTI,
        cost: CostSpec,
        N: int,
        term: TerminalIngredients,
        sigma_mode: str = "scalar",
        verify: bool = True,
        template: MPCTemplate | None = None,
        eta_samples: int = 0,
    ) -> None:
        self.sys, self.cost, self.N, self.term = sys, cost, N, term
        self.template = template or build_receding(sys, cost, N, term, sigma_mode)
        self.checker = RecedingChecker(sys, term) if verify else None
        self.eta_samples = eta_samples
        self.reset(None)

    def reset(self, x0: Any) -> None:
        self.prev: SolutionBundle | None = None
        self.candidate: SolutionBundle | None = None
        self._last_stage: float | None = None
        self._last_wbar_norm: float | None = None
        self._eta_rng = np.random.default_rng(0)

    def control(self, x: np.ndarray, k: int) -> ControlDecision:
        bundle = self.template.solve(x, warm=self.candidate)
        info: dict[str, Any] = {}
        if bundle.info:
            info["solve_check"] = dict(bundle.info)
        event = None
        if bundle.optimal:
            if self.candidate is not None:
                info["candidate_gap"] = self.candidate.objective - bundle.objective
            if self.eta_samples:
                info["eta_failures"] = eta_containment(self.sys, bundle, self._eta_rng, self.eta_samples)
        elif self.candidate is not None:
            logger.warning("Receding solve %s at step %d; applying the shifted candidate", bundle.status.value, k)
            bundle, event = self.candidate, "fallback"
        else:
            raise ControllerInfeasible(f"Receding problem {bundle.status.value} at step {k} without a candidate.")

        if self.prev is not None and self._last_stage is not None:
            report = value_decrease_check(self.prev.objective, bundle.objective, self._last_stage, self._last_wbar_norm)
            info["decrease_slack"] = report.slack
            info["decrease_violated"] = report.violated
        info["alpha"] = bundle.alpha
        info["sigma1"] = np.asarray(bundle.sigma1).tolist()
        self.prev = bundle
        u = bundle.control
        self._last_stage = self.cost.stage(x, u)
        return ControlDecision(u, bundle.status.value if event is None else "Candidate", bundle.solve_time, bundle.objective, event=event, info=info)

    def observe(self, x: np.ndarray, u: np.ndarray, x_next: np.ndarray) -> dict:
        prev = self.prev
        wbar = equivalent_disturbance(self.sys, x, x_next, u, prev.p[0], prev.sigma1)
        audit: dict[str, Any] = {"wbar": wbar.tolist(), "wbar_in_set": self.sys.Wbar.contains(wbar, tol=settings.CHECK_TOL)}
        # deviation from the prediction; wbar itself carries a 1/sigma1 factor
        self._last_wbar_norm = float(np.max(np.abs(np.asarray(prev.sigma1) * wbar)))
        try:
            self.candidate = candidate_shift(prev, wbar, self.term, self.sys, self.cost)
        except WbarOutsideSet as exc:
            logger.warning("%s", exc)
            self.candidate = None
            return audit
        if self.checker is not None:
            audit["candidate_violation"] = self.checker.residuals(self.candidate, x_next).max_violation
        return audit


class ShrinkingController:
    """Generic tube MPC with a shrinking horizon, then the exact one-step robust problem."""

    name = "shrinking"

    def __init__(
        self,
        sys: UncertainLTI,
        cost: CostSpec,
        N: int,
        S_f: Polytope,
        sigma_mode: str = "scalar",
    ) -> None:
        self.sys, self.cost, self.N, self.S_f, self.sigma_mode = sys, cost, N, S_f, sigma_mode
        self.templates: dict[int, MPCTemplate] = {}
        self.csp = RobustStep(sys, cost, S_f)
        self.prev: SolutionBundle | None = None

    def reset(self, x0: Any) -> None:
        self.prev = None

    def horizon(self, k: int) -> int:
        return self.N - k

    def control(self, x: np.ndarray, k: int) -> ControlDecision:
        h = self.horizon(k)
        if h >= 2:
            if h not in self.templates:
                self.templates[h] = build_generic(self.sys, self.cost, h, self.S_f, self.sigma_mode)
            bundle = self.templates[h].solve(x)
        else:
            bundle = self.csp.solve(x)
        if not bundle.optimal:
            raise ControllerInfeasible(f"Shrinking-horizon problem (horizon {max(h, 1)}) {bundle.status.value} at step {k}.")
        self.prev = bundle
        return ControlDecision(bundle.control, bundle.status.value, bundle.solve_time, bundle.objective, info={"horizon": max(h, 1)})

    def observe(self, x: np.ndarray, u: np.ndarray, x_next: np.ndarray) -> dict:
        prev = self.prev
        if prev is None or prev.kind != "generic":
            return {"in_terminal_set": self.S_f.contains(x_next, tol=settings.CHECK_TOL)}
        wbar = equivalent_disturbance(self.sys, x, x_next, u, prev.p[0], prev.sigma1)
        return {"wbar": wbar.tolist(), "wbar_in_set": self.sys.Wbar.contains(wbar, tol=settings.CHECK_TOL)}


class AsyncController:
    """Primary process over a fused memory, refreshed by the secondary process every `cadence` steps."""

    name = "async"

    def __init__(
        self,
        sys: UncertainLTI,
        cost: CostSpec,
        N: int,
        term: TerminalIngredients,
        capacity: int = 4,
        cadence: int = 10,
        policy: str = "score",
        sigma_mode: str = "scalar",
        alpha_weight: float = 1.0,
        seed_anchors: Sequence[tuple[int, Any]] | None = None,
        fixed_anchors: Sequence[Any] | None = None,
        concurrent: bool = False,
        verify: bool = True,
    ) -> None:
        self.sys, self.cost, self.N, self.term = sys, cost, N, term
        self.capacity, self.cadence, self.policy = capacity, cadence, policy
        self.secondary = SecondaryProcess(sys, cost, N, term, sigma_mode, alpha_weight)
        self.memory = Memory(capacity)
        self.primary = build_primary(sys, cost, N, self.memory, term.Z_f)
        self.seed_anchors = list(seed_anchors or [])
        self.fixed_anchors = [np.asarray(a, dtype=float) for a in fixed_anchors or []]
        self.concurrent = concurrent
        self.verify = verify
        self._executor: ThreadPoolExecutor | None = None
        self._pending: Future | None = None
        self._seed_cache: dict[tuple, Any] = {}

    def reset(self, x0: Any) -> None:
        self.memory = Memory(self.capacity)
        anchors = self.seed_anchors or [(0, x0), (1, x0)]
        seeds = {}
        for slot, anchor in anchors:
            key = tuple(np.round(np.asarray(anchor, dtype=float), 12))
            if key not in self._seed_cache:
                self._seed_cache[key] = self.secondary.run(anchor)
            entry = self._seed_cache[key]
            seeds[slot] = replace(entry)
        self.memory.seed(seeds)
        self.prev: SolutionBundle | None = None
        self.snapshot: tuple | None = None
        self.candidate: SolutionBundle | None = None
        self.updates = 0

    def _anchor(self, x: np.ndarray) -> np.ndarray:
        if self.fixed_anchors:
            return self.fixed_anchors[self.updates % len(self.fixed_anchors)]
        return np.array(x, dtype=float)

    def _apply_secondary(self, entry) -> None:
        slot = update_memory_secondary(self.memory, entry, self.policy)
        self.updates += 1
        self._last_update_slot = slot

    def _collect(self) -> Optional[int]:
        """Apply a finished concurrent secondary at the step boundary."""
        self._last_update_slot = None
        if self._pending is not None and self._pending.done():
            future, self._pending = self._pending, None
            try:
                self._apply_secondary(future.result())
            except SecondaryInfeasible as exc:
                logger.warning("%s", exc)
        return self._last_update_slot

    def _launch(self, x: np.ndarray) -> None:
        anchor = self._anchor(x)
        if not self.concurrent:
            try:
                self._apply_secondary(self.secondary.run(anchor))
            except SecondaryInfeasible as exc:
                logger.warning("%s", exc)
            return
        if self._pending is None:
            if self._executor is None:
                self._executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix="secondary")
            self._pending = self._executor.submit(self.secondary.run, anchor)

    def control(self, x: np.ndarray, k: int) -> ControlDecision:
        updated_slot = self._collect() if self.concurrent else None
        snapshot = self.memory.snapshot()
        self.primary.load(snapshot)
        bundle = self.primary.solve(x, warm=self.candidate)
        event = None
        solve_check = dict(bundle.info)
        if not bundle.optimal:
            if self.candidate is None:
                raise ControllerInfeasible(f"Primary problem {bundle.status.value} at step {k} without a candidate.")
            logger.warning("Primary solve %s at step %d; applying the shifted candidate", bundle.status.value, k)
            bundle, event = self.candidate, "fallback"
        self.memory.record_usage(bundle.lam)
        store_fallback(self.memory, bundle, snapshot, self.sys)
        self.prev, self.snapshot = bundle, snapshot
        info: dict[str, Any] = {}
        if solve_check:
            info["solve_check"] = solve_check
        if updated_slot is not None:
            info["memory_update_slot"] = updated_slot
        if (k + 1) % self.cadence == 0:
            self._launch(x)
            if not self.concurrent:
                info["memory_update_slot"] = self._last_update_slot
        status = bundle.status.value if event is None else "Candidate"
        return ControlDecision(bundle.control, status, bundle.solve_time, bundle.objective, lam=np.asarray(bundle.lam), event=event, info=info)

    def observe(self, x: np.ndarray, u: np.ndarray, x_next: np.ndarray) -> dict:
        prev, snapshot = self.prev, self.snapshot
        sigma1 = fused_sigma1(snapshot, prev.lam)
        wbar = equivalent_disturbance(self.sys, x, x_next, u, prev.p[0], sigma1)
        audit: dict[str, Any] = {"wbar": wbar.tolist(), "wbar_in_set": self.sys.Wbar.contains(wbar, tol=settings.CHECK_TOL)}
        self.candidate = primary_candidate(self.sys, prev, snapshot, wbar, self.term.K_f, self.cost)
        if self.verify:
            current = self.memory.snapshot()
            report = primary_residuals(self.sys, current, self.candidate.lam, self.candidate, x_next, self.term.Z_f)
            audit["candidate_violation"] = report.max_violation
        return audit

    def close(self) -> None:
        if self._executor is not None:
            if self._pending is not None:
                self._pending.cancel()
            self._executor.shutdown(wait=True)
            self._executor = None
            self._pending = None
