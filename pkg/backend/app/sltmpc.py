"""
Filter-based system level tube MPC programs.

Every program is a cvxpy template parameterized by the measured state, so
one build serves all solves of a closed-loop run:

- ``build_generic``: shrinking-horizon problem with terminal constraint
  z_N in S_f minus F_N(Phi_e), S_f robust invariant for the true dynamics.
- ``build_receding``: recursively feasible problem with the terminal filter
  row Xi, the scaled terminal set alpha*Z_f and the terminal inclusions.
  It also serves the secondary process (tube objective) and the
  frozen-tube variant where Phi, Sigma, Xi and alpha are fixed numbers.
- ``build_nominal`` and ``robust_csp_step``: reference problems.

Filter scalings sigma_i sit on the block diagonal, Phi_e[i, i-1] =
Sigma[i, i-1] = sigma_i I (or diag(sigma_i) in diagonal mode).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import cvxpy as cp
import numpy as np

from .config import settings
from .errors import DegenerateSigma, IncompatibleTerminalSet, ShapeMismatch, WbarOutsideSet
from .invariant import TerminalIngredients
from .polytope import (
    Polytope,
    affine_image_supports,
    encode_affine_containment,
    encode_minkowski_containment,
    is_expr,
    support_rows,
)
from .qp import CvxpySolver, QPProblem, SolutionStatus, make_solver
from .slp import BlockLowerTriangular, FilterRow, shift
from .sysmodel import CostSpec, UncertainLTI
from .verify import RecedingChecker, ResidualReport, generic_residuals, nominal_residuals

logger = logging.getLogger(__name__)

SIGMA_MODES = ("scalar", "diagonal")


@dataclass
class SolutionBundle:
    status: SolutionStatus
    N: int
    kind: str = "receding"
    z: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    p: Optional[np.ndarray] = None
    Phi_e: Optional[BlockLowerTriangular] = None
    Phi_nu: Optional[BlockLowerTriangular] = None
    Sigma: Optional[BlockLowerTriangular] = None
    Xi: Optional[FilterRow] = None
    alpha: Optional[float] = None
    # row i-1 holds the per-coordinate scaling sigma_i
    sigma: Optional[np.ndarray] = None
    lam: Optional[np.ndarray] = None
    objective: float = math.nan
    solve_time: float = 0.0
    # post-solve verification outcome
    info: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status is SolutionStatus.OPTIMAL

    @property
    def control(self) -> np.ndarray:
        return np.asarray(self.v[0])

    @property
    def sigma1(self) -> np.ndarray:
        return np.asarray(self.sigma[0])

    def gamma(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        """Gamma = A Phi_e[N,0] + B Phi_nu[N,0] + Xi_0."""
        return A @ self.Phi_e[(self.N, 0)] + B @ self.Phi_nu[(self.N, 0)] + self.Xi[0]

    def stage_cost(self, cost: CostSpec) -> float:
        return float(sum(cost.stage(self.z[i], self.v[i]) for i in range(self.N)))

    def terminal_value(self, cost: CostSpec) -> float:
        return cost.terminal(self.z[self.N])

    def nominal_objective(self, cost: CostSpec) -> float:
        return self.stage_cost(cost) + self.terminal_value(cost)

    def to_record(self) -> dict:
        record: dict[str, Any] = {
            "status": self.status.value,
            "kind": self.kind,
            "N": self.N,
            "objective": self.objective,
            "solve_time": self.solve_time,
        }
        for name in ("z", "v", "p", "sigma", "lam"):
            value = getattr(self, name)
            if value is not None:
                record[name] = np.asarray(value).tolist()
        for name in ("Phi_e", "Phi_nu", "Sigma", "Xi"):
            value = getattr(self, name)
            if value is not None:
                record[name] = value.to_record()
        if self.alpha is not None:
            record["alpha"] = self.alpha
        return record


@dataclass
class _Decision:
    """cvxpy handles (or fixed arrays) of one program's decision set."""

    z: cp.Variable
    v: cp.Variable
    p: cp.Variable
    sigma: Any
    Phi_e: dict[tuple[int, int], Any]
    Phi_nu: dict[tuple[int, int], Any]
    Sigma: dict[tuple[int, int], Any]
    Xi: Optional[list[Any]] = None
    alpha: Any = None
    mode: str = "scalar"

    def beta(self, i: int) -> Any:
        """Scaling of Wbar in the stage-(i-1) inclusion."""
        s = self.sigma[i - 1]
        if is_expr(s):
            return s
        s = np.asarray(s, dtype=float)
        return float(s[0]) if self.mode == "scalar" else s


def _sigma_block(sigma: Any, i: int, n: int, mode: str) -> Any:
    s = sigma[i - 1]
    return s * np.eye(n) if mode == "scalar" else cp.diag(s)


def _declare(n: int, m: int, N: int, mode: str, terminal_row: bool) -> _Decision:
    z = cp.Variable((N + 1, n), name="z")
    v = cp.Variable((N, m), name="v")
    p = cp.Variable((N, n), name="p")
    sigma = cp.Variable(N if mode == "scalar" else (N, n), name="sigma")
    Phi_e: dict[tuple[int, int], Any] = {}
    Phi_nu: dict[tuple[int, int], Any] = {}
    Sigma: dict[tuple[int, int], Any] = {}
    for i in range(1, N + 1):
        for j in range(i):
            if j == i - 1:
                Phi_e[(i, j)] = Sigma[(i, j)] = _sigma_block(sigma, i, n, mode)
            else:
                Phi_e[(i, j)] = cp.Variable((n, n), name=f"Phi_e_{i}_{j}")
                Sigma[(i, j)] = cp.Variable((n, n), name=f"Sigma_{i}_{j}")
            if i < N or terminal_row:
                Phi_nu[(i, j)] = cp.Variable((m, n), name=f"Phi_nu_{i}_{j}")
    dec = _Decision(z, v, p, sigma, Phi_e, Phi_nu, Sigma, mode=mode)
    if terminal_row:
        dec.Xi = [cp.Variable((n, n), name=f"Xi_{j}") for j in range(N)]
        dec.alpha = cp.Variable(nonneg=True, name="alpha")
    return dec


def _frozen(n: int, m: int, N: int, tubes: SolutionBundle) -> _Decision:
    sigma = np.asarray(tubes.sigma, dtype=float).reshape(N, n)
    mode = "scalar" if np.allclose(sigma, sigma[:, :1]) else "diagonal"
    return _Decision(
        z=cp.Variable((N + 1, n), name="z"),
        v=cp.Variable((N, m), name="v"),
        p=cp.Variable((N, n), name="p"),
        sigma=sigma,
        Phi_e=dict(tubes.Phi_e.blocks),
        Phi_nu=dict(tubes.Phi_nu.blocks),
        Sigma=dict(tubes.Sigma.blocks),
        Xi=list(tubes.Xi.blocks),
        alpha=float(tubes.alpha),
        mode=mode,
    )


def _psd_root(M: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def _nominal_cost(z: Any, v: Any, cost: CostSpec, N: int) -> Any:
    Sq, Sr, Sp = _psd_root(cost.Q), _psd_root(cost.R), _psd_root(cost.P_f)
    return cp.sum_squares(z[:N] @ Sq.T) + cp.sum_squares(v @ Sr.T) + cp.sum_squares(Sp @ z[N])


def _any_expr(*items: Any) -> bool:
    return any(is_expr(item) for item in items)


def _tightened(P: Polytope, point: Any, shapes: list[Any], Wbar: Polytope, form: str | None) -> list[cp.Constraint]:
    """point in P minus the Minkowski sum of G Wbar over `shapes`."""
    lhs = P.H @ point
    cons: list[cp.Constraint] = []
    for G in shapes:
        t, blocks = support_rows(Wbar, G, P.H, form)
        lhs = lhs + t
        cons += blocks.constraints
    cons.append(lhs <= P.h)
    return cons


def _stage_constraints(sys: UncertainLTI, N: int, dec: _Decision, form: str | None) -> list[cp.Constraint]:
    """Nominal dynamics, error dynamics, tightened stages 0..N-1 and the stage inclusions."""
    A, B, n = sys.A, sys.B, sys.n
    cons: list[cp.Constraint] = [dec.z[1:] == dec.z[:N] @ A.T + dec.v @ B.T + dec.p]
    if sys.is_uncertainty_free:
        # nothing to cover: the nominal disturbance is identically zero
        cons.append(dec.p == 0)
    if is_expr(dec.sigma):
        cons.append(dec.sigma >= settings.SIGMA_MIN)

    for i in range(1, N):
        for j in range(i):
            lhs, rhs = dec.Phi_e[(i + 1, j)], A @ dec.Phi_e[(i, j)] + B @ dec.Phi_nu[(i, j)] + dec.Sigma[(i + 1, j)]
            if _any_expr(lhs, rhs):
                cons.append(lhs == rhs)

    for i in range(N):
        cons += _tightened(sys.X, dec.z[i], [dec.Phi_e[(i, j)] for j in range(i)], sys.Wbar, form)
        cons += _tightened(sys.U, dec.v[i], [dec.Phi_nu[(i, j)] for j in range(i)], sys.Wbar, form)

    for dA, dB in sys.delta_vertices:
        for i in range(N):
            psi = dA @ dec.z[i] + dB @ dec.v[i] - dec.p[i]
            terms: list[tuple] = [
                (dA @ dec.Phi_e[(i, j)] + dB @ dec.Phi_nu[(i, j)] - dec.Sigma[(i + 1, j)], sys.Wbar) for j in range(i)
            ]
            terms.append((np.eye(n), sys.W))
            cons += encode_minkowski_containment(psi, terms, dec.beta(i + 1), sys.Wbar, form=form).constraints
    return cons


def _terminal_constraints(
    sys: UncertainLTI, N: int, dec: _Decision, term: TerminalIngredients, form: str | None
) -> list[cp.Constraint]:
    A, B, n = sys.A, sys.B, sys.n
    K, Z_f, Wbar = term.K_f, term.Z_f, sys.Wbar
    last_e = [dec.Phi_e[(N, j)] for j in range(N)]
    last_nu = [dec.Phi_nu[(N, j)] for j in range(N)]
    cons: list[cp.Constraint] = [Z_f.H @ dec.z[N] <= dec.alpha * Z_f.h]

    for j in range(1, N):
        lhs, rhs = last_e[j - 1], A @ last_e[j] + B @ last_nu[j] + dec.Xi[j]
        if _any_expr(lhs, rhs):
            cons.append(lhs == rhs)

    copies = [Wbar] * N
    cons += encode_affine_containment(dec.alpha, np.eye(n), 1.0, sys.X, last_e, copies, Z_f, form, multipliers=False).constraints
    cons += encode_affine_containment(dec.alpha, K, 1.0, sys.U, last_nu, copies, Z_f, form, multipliers=False).constraints
    Gamma = A @ last_e[0] + B @ last_nu[0] + dec.Xi[0]
    cons += encode_affine_containment(
        dec.alpha, A + B @ K, dec.alpha, Z_f, Gamma, Wbar, Z_f, form, multipliers=False
    ).constraints

    beta_N = dec.beta(N)
    for dA, dB in sys.delta_vertices:
        terms: list[tuple] = [(dA + dB @ K, Z_f, dec.alpha)]
        terms += [(dA @ last_e[j] + dB @ last_nu[j] - dec.Xi[j], Wbar) for j in range(N)]
        terms.append((np.eye(n), sys.W))
        cons += encode_minkowski_containment(None, terms, beta_N, Wbar, form=form).constraints
    return cons


def _check_mode(sys: UncertainLTI, mode: str) -> None:
    if mode not in SIGMA_MODES:
        raise ValueError(f"Unknown sigma mode '{mode}'; expected one of {SIGMA_MODES}.")
    if mode == "diagonal" and not sys.Wbar.is_hyperrectangle():
        raise ShapeMismatch("Diagonal filter scalings require an axis-aligned box Wbar.")


def verify_bundle(bundle: SolutionBundle, report: ResidualReport, inaccurate: bool = False, name: str = "") -> SolutionBundle:
    """Check a solved bundle against its own constraints; a failing bundle is downgraded to NumericalFailure."""
    bundle.info["max_violation"] = report.max_violation
    bundle.info["inaccurate"] = inaccurate
    if not report.admissible():
        worst, value = report.worst()
        logger.warning("%s: rejecting solution, %s residual %.3e", name or bundle.kind, worst, value)
        bundle.status = SolutionStatus.NUMERICAL_FAILURE
        bundle.info["rejected"] = worst
    return bundle


class MPCTemplate:
    """A built program plus the bookkeeping to turn solver output into bundles."""

    def __init__(
        self,
        kind: str,
        sys: UncertainLTI,
        cost: CostSpec,
        N: int,
        dec: _Decision,
        core: list[cp.Constraint],
        objective: Any,
        solver: CvxpySolver | None = None,
        checker: Callable[[SolutionBundle, Any], ResidualReport] | None = None,
    ) -> None:
        self.kind = kind
        self.checker = checker
        self.sys = sys
        self.cost = cost
        self.N = N
        self.dec = dec
        self.core = core
        self.x0 = cp.Parameter(sys.n, name="x0")
        problem = cp.Problem(cp.Minimize(objective), core + [dec.z[0] == self.x0])
        segments = {"z": dec.z, "v": dec.v, "p": dec.p, "sigma": dec.sigma}
        for name in ("Phi_e", "Phi_nu", "Sigma"):
            segments[name] = [e for e in getattr(dec, name).values() if isinstance(e, cp.Variable)]
        if dec.Xi is not None and is_expr(dec.Xi[0]):
            segments["Xi"] = dec.Xi
            segments["alpha"] = dec.alpha
        self.qp = QPProblem(name=f"{kind}_N{N}", problem=problem, segments=segments, parameters={"x0": self.x0})
        self.solver = solver or make_solver()
        self._rows: tuple | None = None

    def solve(self, x: Any, warm: SolutionBundle | None = None) -> SolutionBundle:
        self.qp.set_parameters(x0=x)
        if warm is not None:
            self._warm(warm)
        raw = self.solver.solve(self.qp, warm_start=warm is not None)
        if raw.status is not SolutionStatus.OPTIMAL:
            logger.info("%s: solve returned %s", self.qp.name, raw.status.value)
            return SolutionBundle(raw.status, self.N, kind=self.kind, solve_time=raw.solve_time)
        bundle = self._extract()
        bundle.objective = raw.objective
        bundle.solve_time = raw.solve_time
        if self.checker is not None:
            verify_bundle(bundle, self.checker(bundle, x), raw.inaccurate, self.qp.name)
        return bundle

    def feasible(self, x: Any) -> bool:
        return self.solve(x).optimal

    def row_extent(self, y: float, free_axis: int = 0) -> tuple[float, float] | None:
        """Feasible range of x0[free_axis] with the other coordinate of a planar state fixed to y."""
        if self.sys.n != 2:
            raise ShapeMismatch("Row extents need a planar state.")
        if self._rows is None or self._rows[0] != free_axis:
            fixed = 1 - free_axis
            y_par = cp.Parameter(name="row")
            cons = self.core + [self.dec.z[0, fixed] == y_par]
            lo = QPProblem(f"{self.qp.name}_row_lo", cp.Problem(cp.Minimize(self.dec.z[0, free_axis]), cons))
            hi = QPProblem(f"{self.qp.name}_row_hi", cp.Problem(cp.Maximize(self.dec.z[0, free_axis]), cons))
            self._rows = (free_axis, y_par, lo, hi)
        _, y_par, lo, hi = self._rows
        y_par.value = float(y)
        bounds = []
        for qp in (lo, hi):
            raw = self.solver.solve(qp)
            if raw.status is not SolutionStatus.OPTIMAL:
                return None
            bounds.append(float(self.dec.z.value[0, free_axis]))
        return bounds[0], bounds[1]

    def export_triplets(self, path: str | Path) -> Path:
        return self.qp.export_triplets(path)

    def _warm(self, warm: SolutionBundle) -> None:
        dec = self.dec
        for name in ("z", "v", "p"):
            value = getattr(warm, name)
            if value is not None and getattr(dec, name).shape == np.shape(value):
                getattr(dec, name).value = np.asarray(value)
        if warm.Phi_e is None or not is_expr(dec.sigma):
            return
        sigma = np.asarray(warm.sigma)
        dec.sigma.value = sigma[:, 0] if dec.mode == "scalar" else sigma
        for store, source in ((dec.Phi_e, warm.Phi_e), (dec.Phi_nu, warm.Phi_nu), (dec.Sigma, warm.Sigma)):
            for key, var in store.items():
                if isinstance(var, cp.Variable):
                    var.value = np.asarray(source[key])
        if dec.Xi is not None and warm.Xi is not None and is_expr(dec.Xi[0]):
            for var, value in zip(dec.Xi, warm.Xi.blocks):
                var.value = np.asarray(value)
            dec.alpha.value = max(float(warm.alpha), 0.0)

    def _extract(self) -> SolutionBundle:
        dec, N, n, m = self.dec, self.N, self.sys.n, self.sys.m

        def val(e: Any) -> np.ndarray:
            return np.asarray(e.value if is_expr(e) else e, dtype=float)

        sigma = val(dec.sigma)
        sigma = np.repeat(sigma.reshape(N, 1), n, axis=1) if sigma.ndim == 1 else sigma.reshape(N, n)
        bundle = SolutionBundle(
            SolutionStatus.OPTIMAL,
            N,
            kind=self.kind,
            z=val(dec.z),
            v=val(dec.v),
            p=val(dec.p),
            Phi_e=BlockLowerTriangular(N, n, n, {k: val(e) for k, e in dec.Phi_e.items()}),
            Phi_nu=BlockLowerTriangular(N, m, n, {k: val(e) for k, e in dec.Phi_nu.items()}),
            Sigma=BlockLowerTriangular(N, n, n, {k: val(e) for k, e in dec.Sigma.items()}),
            sigma=sigma,
        )
        if dec.Xi is not None:
            bundle.Xi = FilterRow(tuple(val(x) for x in dec.Xi))
            bundle.alpha = float(val(dec.alpha))
        return bundle


def build_generic(
    sys: UncertainLTI,
    cost: CostSpec,
    N: int,
    S_f: Polytope,
    sigma_mode: str = "scalar",
    form: str | None = None,
    solver: CvxpySolver | None = None,
) -> MPCTemplate:
    """Shrinking-horizon program with terminal constraint z_N in S_f minus F_N(Phi_e)."""
    _check_mode(sys, sigma_mode)
    if N < 1:
        raise ValueError("Horizon must be at least 1.")
    if S_f.dim != sys.n:
        raise ShapeMismatch(f"S_f has dimension {S_f.dim}, expected {sys.n}.")
    if not S_f.subset_of(sys.X):
        raise IncompatibleTerminalSet("Terminal set is not contained in the state constraints.")
    dec = _declare(sys.n, sys.m, N, sigma_mode, terminal_row=False)
    core = _stage_constraints(sys, N, dec, form)
    core += _tightened(S_f, dec.z[N], [dec.Phi_e[(N, j)] for j in range(N)], sys.Wbar, form)
    logger.debug("generic N=%d: %d constraint groups", N, len(core))
    objective = _nominal_cost(dec.z, dec.v, cost, N)
    return MPCTemplate("generic", sys, cost, N, dec, core, objective, solver, lambda b, x: generic_residuals(sys, S_f, b, x))


def build_receding(
    sys: UncertainLTI,
    cost: CostSpec,
    N: int,
    term: TerminalIngredients,
    sigma_mode: str = "scalar",
    form: str | None = None,
    objective: str = "nominal",
    alpha_weight: float = 1.0,
    frozen: SolutionBundle | None = None,
    solver: CvxpySolver | None = None,
) -> MPCTemplate:
    """Recursively feasible receding-horizon program.

    `objective="tube"` replaces the nominal cost by the secondary-process cost
    sum ||Phi_e[i,j]||_1 + ||Phi_nu[i,j]||_1 - alpha_weight * alpha.
    `frozen` fixes Phi_e, Phi_nu, Sigma, Xi, sigma and alpha to the values of
    a previous bundle, leaving only the nominal trajectory free.
    """
    _check_mode(sys, sigma_mode)
    if N < 1:
        raise ValueError("Horizon must be at least 1.")
    if term.Z_f.dim != sys.n or term.K_f.shape != (sys.m, sys.n):
        raise ShapeMismatch("Terminal ingredients do not match the system dimensions.")
    if not term.Z_f.subset_of(sys.X):
        raise IncompatibleTerminalSet("Z_f is not contained in the state constraints.")
    if frozen is not None:
        dec = _frozen(sys.n, sys.m, N, frozen)
        kind = "frozen"
    else:
        dec = _declare(sys.n, sys.m, N, sigma_mode, terminal_row=True)
        kind = "receding" if objective == "nominal" else "secondary"
    core = _stage_constraints(sys, N, dec, form) + _terminal_constraints(sys, N, dec, term, form)

    if objective == "nominal":
        obj = _nominal_cost(dec.z, dec.v, cost, N)
    elif objective == "tube":
        obj = sum(cp.sum(cp.abs(e)) for e in dec.Phi_e.values()) + sum(cp.sum(cp.abs(e)) for e in dec.Phi_nu.values())
        obj = obj - alpha_weight * dec.alpha
    else:
        raise ValueError(f"Unknown objective '{objective}'.")
    return MPCTemplate(kind, sys, cost, N, dec, core, obj, solver, RecedingChecker(sys, term).residuals)


def build_nominal(
    sys: UncertainLTI,
    cost: CostSpec,
    N: int,
    terminal: Polytope | None = None,
    solver: CvxpySolver | None = None,
) -> MPCTemplate:
    """Plain MPC on the nominal model with an optional terminal set."""
    n, m = sys.n, sys.m
    z = cp.Variable((N + 1, n), name="z")
    v = cp.Variable((N, m), name="v")
    p = cp.Variable((N, n), name="p")
    core = [z[1:] == z[:N] @ sys.A.T + v @ sys.B.T, p == 0]
    for i in range(N):
        core += [sys.X.H @ z[i] <= sys.X.h, sys.U.H @ v[i] <= sys.U.h]
    if terminal is not None:
        core.append(terminal.H @ z[N] <= terminal.h)
    else:
        core.append(sys.X.H @ z[N] <= sys.X.h)
    dec = _Decision(z, v, p, np.zeros((N, n)), {}, {}, {})

    def checker(b: SolutionBundle, x: Any) -> ResidualReport:
        return nominal_residuals(sys, terminal, b, x)

    return MPCTemplate("nominal", sys, cost, N, dec, core, _nominal_cost(z, v, cost, N), solver, checker)


def max_terminal_scaling(sys: UncertainLTI, term: TerminalIngredients) -> float:
    """Largest alpha with alpha*Z_f in X and alpha*K_f*Z_f in U."""
    ratios = [
        sys.X.h / np.maximum(affine_image_supports(term.Z_f, np.eye(sys.n), sys.X.H), 1e-12),
        sys.U.h / np.maximum(affine_image_supports(term.Z_f, term.K_f, sys.U.H), 1e-12),
    ]
    return float(min(r.min() for r in ratios))


class RobustStep:
    """One-step robust constraint satisfaction QP: keep every vertex successor in S_f."""

    def __init__(self, sys: UncertainLTI, cost: CostSpec, S_f: Polytope, solver: CvxpySolver | None = None) -> None:
        self.sys = sys
        self.x = cp.Parameter(sys.n, name="x")
        u = cp.Variable(sys.m, name="u")
        h_tight = S_f.h - sys.W.support_many(S_f.H)
        cons = [sys.U.H @ u <= sys.U.h]
        for dA, dB in sys.delta_vertices:
            cons.append(S_f.H @ ((sys.A + dA) @ self.x + (sys.B + dB) @ u) <= h_tight)
        successor = sys.A @ self.x + sys.B @ u
        objective = cp.sum_squares(_psd_root(cost.R) @ u) + cp.sum_squares(_psd_root(cost.P_f) @ successor)
        self.u = u
        self.qp = QPProblem("robust_csp", cp.Problem(cp.Minimize(objective), cons), {"u": u}, {"x": self.x})
        self.solver = solver or make_solver()

    def solve(self, x: Any) -> SolutionBundle:
        x = np.asarray(x, dtype=float)
        self.qp.set_parameters(x=x)
        raw = self.solver.solve(self.qp)
        if raw.status is not SolutionStatus.OPTIMAL:
            return SolutionBundle(raw.status, 1, kind="csp", solve_time=raw.solve_time)
        u = np.asarray(self.u.value, dtype=float)
        z = np.vstack([x, self.sys.nominal_step(x, u)])
        return SolutionBundle(
            SolutionStatus.OPTIMAL,
            1,
            kind="csp",
            z=z,
            v=u.reshape(1, -1),
            p=np.zeros((1, self.sys.n)),
            objective=raw.objective,
            solve_time=raw.solve_time,
        )


def robust_csp_step(sys: UncertainLTI, cost: CostSpec, S_f: Polytope, x: Any) -> SolutionBundle:
    return RobustStep(sys, cost, S_f).solve(x)


def candidate_shift(
    prev: SolutionBundle,
    wbar: Any,
    term: TerminalIngredients,
    sys: UncertainLTI,
    cost: CostSpec | None = None,
    tol: float | None = None,
) -> SolutionBundle:
    """Shifted candidate for the next receding-horizon solve.

    Vectors move one stage forward and absorb the realized auxiliary
    disturbance through the first block column; matrices shift up and left
    and re-append their last block row.
    """
    if not prev.optimal or prev.Xi is None:
        raise ValueError("Candidate shift needs an optimal receding-horizon bundle.")
    tol = settings.CHECK_TOL if tol is None else tol
    wbar = np.asarray(wbar, dtype=float).reshape(-1)
    if not sys.Wbar.contains(wbar, tol=tol):
        raise WbarOutsideSet(f"Equivalent disturbance {wbar} lies outside Wbar.")
    A, B, K = sys.A, sys.B, term.K_f
    N, n = prev.N, sys.n
    Pe, Pn, S, Xi = prev.Phi_e, prev.Phi_nu, prev.Sigma, prev.Xi

    z = np.empty_like(prev.z)
    v = np.empty_like(prev.v)
    p = np.empty_like(prev.p)
    for i in range(N):
        z[i] = prev.z[i + 1] + Pe[(i + 1, 0)] @ wbar
    z[N] = (A + B @ K) @ prev.z[N] + prev.gamma(A, B) @ wbar
    for i in range(N - 1):
        v[i] = prev.v[i + 1] + Pn[(i + 1, 0)] @ wbar
        p[i] = prev.p[i + 1] + S[(i + 2, 0)] @ wbar
    v[N - 1] = K @ prev.z[N] + Pn[(N, 0)] @ wbar
    p[N - 1] = Xi[0] @ wbar

    sigma_N = np.diag(prev.sigma[N - 1])
    candidate = SolutionBundle(
        SolutionStatus.OPTIMAL,
        N,
        kind="candidate",
        z=z,
        v=v,
        p=p,
        Phi_e=shift(Pe, Pe.last_row()),
        Phi_nu=shift(Pn, Pn.last_row()),
        Sigma=shift(S, list(Xi.blocks[1:]) + [sigma_N]),
        Xi=Xi,
        alpha=prev.alpha,
        sigma=np.vstack([prev.sigma[1:], prev.sigma[N - 1 :]]),
    )
    if cost is not None:
        candidate.objective = candidate.nominal_objective(cost)
    return candidate


def equivalent_disturbance(sys: UncertainLTI, x_k: Any, x_k1: Any, u: Any, p0: Any, sigma1: Any) -> np.ndarray:
    """wbar = (x(k+1) - A x(k) - B u - p0) / sigma1, elementwise for diagonal scalings."""
    sigma1 = np.asarray(sigma1, dtype=float)
    if np.any(np.abs(sigma1) <= 1e-10):
        raise DegenerateSigma(f"Filter scaling {sigma1} is numerically zero.")
    residual = np.asarray(x_k1, dtype=float) - sys.nominal_step(x_k, u) - np.asarray(p0, dtype=float)
    return residual / sigma1


@dataclass
class DecreaseReport:
    slack: float
    disturbance_free: bool
    violated: bool
    details: dict = field(default_factory=dict)


def value_decrease_check(
    V_prev: float, V_next: float, stage_cost: float, wbar_norm: float, tol: float | None = None
) -> DecreaseReport:
    """slack = V_next - V_prev + l(x, u); must be <= tol when wbar = 0."""
    tol = settings.CHECK_TOL if tol is None else tol
    slack = float(V_next - V_prev + stage_cost)
    quiet = wbar_norm <= 1e-12
    violated = quiet and slack > tol
    if violated:
        logger.warning("Value function increased by %.3e without disturbance", slack)
    return DecreaseReport(slack, quiet, violated, {"V_prev": V_prev, "V_next": V_next, "stage_cost": stage_cost})
