"""
Solver-agnostic QP layer.

Problems are modelled with cvxpy and kept as parameterized templates
(`cp.Parameter` for the measured state and other per-solve data), so a
template compiles once and is re-solved cheaply.
"""
from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

import cvxpy as cp
import numpy as np

from .config import settings

logger = logging.getLogger(__name__)


class SolutionStatus(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    NUMERICAL_FAILURE = "NumericalFailure"


@dataclass
class QPProblem:
    """A cvxpy problem plus its named variable segments and parameters."""

    name: str
    problem: cp.Problem
    segments: dict[str, Any] = field(default_factory=dict)
    parameters: dict[str, cp.Parameter] = field(default_factory=dict)

    def set_parameters(self, **values: Any) -> None:
        for key, value in values.items():
            self.parameters[key].value = np.asarray(value, dtype=float).reshape(self.parameters[key].shape)

    def layout(self) -> list[tuple[str, int]]:
        """(segment name, number of scalar entries) in declaration order."""
        out = []
        for name, seg in self.segments.items():
            out.append((name, _count(seg)))
        return out

    @property
    def n_variables(self) -> int:
        return sum(v.size for v in self.problem.variables())

    @property
    def n_constraints(self) -> int:
        return sum(c.size for c in self.problem.constraints)

    def export_triplets(self, path: str | Path) -> Path:
        """Write the canonical (P, q, A, l, u) data as column-major sparse triplets.

        Sections: `P` and `A` list `row col value` sorted by column then row,
        `q`, `l`, `u` list one value per line. Infinite bounds print as inf.
        """
        data, _, _ = self.problem.get_problem_data(cp.OSQP)
        P, q, A, l, u = data["P"], data["q"], data["A"], data["l"], data["u"]
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            fh.write(f"# {self.name}: n={A.shape[1]} m={A.shape[0]}\n")
            for label, M in (("P", P), ("A", A)):
                M = M.tocsc()
                fh.write(f"[{label}] {M.shape[0]} {M.shape[1]} {M.nnz}\n")
                for col in range(M.shape[1]):
                    for idx in range(M.indptr[col], M.indptr[col + 1]):
                        fh.write(f"{M.indices[idx]} {col} {M.data[idx]:.17g}\n")
            for label, vec in (("q", q), ("l", l), ("u", u)):
                fh.write(f"[{label}] {len(vec)}\n")
                fh.writelines(f"{x:.17g}\n" for x in vec)
        return path


def _count(seg: Any) -> int:
    if isinstance(seg, cp.Expression):
        return seg.size
    if isinstance(seg, dict):
        return sum(_count(v) for v in seg.values())
    if isinstance(seg, (list, tuple)):
        return sum(_count(v) for v in seg)
    return 0


@dataclass
class RawSolve:
    status: SolutionStatus
    objective: float
    solve_time: float
    # solver stopped at its reduced accuracy level; the caller must verify
    inaccurate: bool = False


class SolverInterface(Protocol):
    name: str
    supports_qp: bool

    def solve(self, qp: QPProblem) -> RawSolve: ...


_STATUS = {
    cp.OPTIMAL: SolutionStatus.OPTIMAL,
    cp.OPTIMAL_INACCURATE: SolutionStatus.OPTIMAL,
    cp.INFEASIBLE: SolutionStatus.INFEASIBLE,
    cp.INFEASIBLE_INACCURATE: SolutionStatus.INFEASIBLE,
}


class CvxpySolver:
    """Dispatches to a conic/QP backend shipped with cvxpy."""

    supports_qp = True

    def __init__(self, name: str | None = None, eps: float | None = None, max_iter: int | None = None) -> None:
        self.name = (name or settings.SOLVER).upper()
        self.eps = eps or settings.SOLVER_EPS
        self.max_iter = max_iter or settings.SOLVER_MAX_ITER

    def options(self) -> dict[str, Any]:
        if self.name == "CLARABEL":
            return {"tol_feas": self.eps, "tol_gap_abs": self.eps, "tol_gap_rel": self.eps, "max_iter": 200}
        if self.name == "OSQP":
            return {"eps_abs": self.eps, "eps_rel": self.eps, "max_iter": self.max_iter, "polish": True}
        if self.name == "SCS":
            return {"eps_abs": self.eps, "eps_rel": self.eps, "max_iters": self.max_iter}
        return {}

    def solve(self, qp: QPProblem, warm_start: bool = False) -> RawSolve:
        start = time.perf_counter()
        try:
            qp.problem.solve(solver=self.name, warm_start=warm_start, **self.options())
        except cp.SolverError as exc:
            logger.warning("%s: solver %s failed: %s", qp.name, self.name, exc)
            return RawSolve(SolutionStatus.NUMERICAL_FAILURE, float("nan"), time.perf_counter() - start)
        elapsed = time.perf_counter() - start
        status = _STATUS.get(qp.problem.status, SolutionStatus.NUMERICAL_FAILURE)
        if qp.problem.status == cp.OPTIMAL_INACCURATE:
            logger.warning("%s: solver %s reported an inaccurate optimum", qp.name, self.name)
        objective = float(qp.problem.value) if status is SolutionStatus.OPTIMAL else float("nan")
        return RawSolve(status, objective, elapsed, inaccurate=qp.problem.status == cp.OPTIMAL_INACCURATE)


def make_solver(name: str | None = None) -> CvxpySolver:
    return CvxpySolver(name)
