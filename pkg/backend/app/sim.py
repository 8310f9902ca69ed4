"""
Closed-loop simulation, Monte-Carlo statistics, region-of-attraction
estimation and timing tables.
"""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Sequence

import numpy as np

from .config import settings
from .controllers import Controller
from .errors import ControllerInfeasible
from .polytope import Polytope
from .sysmodel import CostSpec, UncertainLTI

logger = logging.getLogger(__name__)

W_LAWS = ("uniform", "vertex")
DELTA_LAWS = ("per_step", "fixed")


@dataclass
class SamplerSpec:
    w_law: str = "uniform"
    delta_law: str = "per_step"
    # Draw Delta at uncertainty vertices instead of inside their hull
    delta_vertex: bool = False
    max_rejections: int = 10000

    def __post_init__(self) -> None:
        if self.w_law not in W_LAWS:
            raise ValueError(f"Unknown w law '{self.w_law}'; expected one of {W_LAWS}.")
        if self.delta_law not in DELTA_LAWS:
            raise ValueError(f"Unknown delta law '{self.delta_law}'; expected one of {DELTA_LAWS}.")


class DisturbanceSampler:
    """Draws (vertex weights, w) pairs in a fixed order from one generator."""

    def __init__(self, sys: UncertainLTI, spec: SamplerSpec, rng: np.random.Generator) -> None:
        self.sys = sys
        self.spec = spec
        self.rng = rng
        self.W_vertices = sys.W.vertices()
        self.lb, self.ub = sys.W.bounding_box()
        _, radius = sys.W.chebyshev_center()
        # lower-dimensional W (e.g. a segment) has no volume to reject into
        self.full_dimensional = radius > 1e-12
        self._fixed: Optional[np.ndarray] = None

    def _fresh_weights(self) -> np.ndarray:
        n_D = self.sys.n_D
        if self.spec.delta_vertex or self.spec.w_law == "vertex":
            weights = np.zeros(n_D)
            weights[self.rng.integers(n_D)] = 1.0
            return weights
        return self.rng.dirichlet(np.ones(n_D))

    def weights(self) -> np.ndarray:
        if self.spec.delta_law == "fixed":
            if self._fixed is None:
                self._fixed = self._fresh_weights()
            return self._fixed.copy()
        return self._fresh_weights()

    def disturbance(self) -> np.ndarray:
        V = self.W_vertices
        if self.spec.w_law == "vertex":
            return V[self.rng.integers(len(V))].copy()
        if self.full_dimensional:
            for _ in range(self.spec.max_rejections):
                w = self.rng.uniform(self.lb, self.ub)
                if self.sys.W.contains(w, tol=0.0):
                    return w
            logger.warning("Rejection sampling into W exhausted; using a vertex combination")
        return self.rng.dirichlet(np.ones(len(V))) @ V


@dataclass
class RunRecord:
    run_id: int
    controller: str
    seed: int
    states: list = field(default_factory=list)
    inputs: list = field(default_factory=list)
    disturbances: list = field(default_factory=list)
    realized_deltas: list = field(default_factory=list)
    costs: list = field(default_factory=list)
    cumulative: list = field(default_factory=list)
    statuses: list = field(default_factory=list)
    events: list = field(default_factory=list)
    lam: list = field(default_factory=list)
    timings: list = field(default_factory=list)
    objectives: list = field(default_factory=list)
    audits: list = field(default_factory=list)
    infos: list = field(default_factory=list)
    violations: int = 0
    aborted: bool = False
    error: Optional[str] = None

    @property
    def steps(self) -> int:
        return len(self.inputs)

    @property
    def total_cost(self) -> float:
        return float(self.cumulative[-1]) if self.cumulative else 0.0

    @property
    def fallbacks(self) -> int:
        return sum(1 for e in self.events if e == "fallback")

    @property
    def wbar_outside(self) -> int:
        return sum(1 for a in self.audits if a.get("wbar_in_set") is False)

    def max_candidate_violation(self) -> float:
        return max((a.get("candidate_violation", 0.0) for a in self.audits), default=0.0)

    def decrease_violations(self) -> int:
        return sum(1 for i in self.infos if i.get("decrease_violated"))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["total_cost"] = self.total_cost
        return out


def closed_loop(
    controller: Controller,
    sys: UncertainLTI,
    cost: CostSpec,
    T: int,
    x0: Any,
    sampler_spec: SamplerSpec | None = None,
    seed: int = 0,
    run_id: int = 0,
) -> RunRecord:
    """Apply v*_0 for T steps under sampled uncertainty; deterministic given seed."""
    rng = np.random.default_rng(seed)
    sampler = DisturbanceSampler(sys, sampler_spec or SamplerSpec(), rng)
    x = np.asarray(x0, dtype=float)
    record = RunRecord(run_id=run_id, controller=getattr(controller, "name", type(controller).__name__), seed=seed)
    record.states.append(x.tolist())
    controller.reset(x)
    total = 0.0
    for k in range(T):
        try:
            decision = controller.control(x, k)
        except ControllerInfeasible as exc:
            logger.warning("Run %d aborted at step %d: %s", run_id, k, exc)
            record.statuses.append("Infeasible")
            record.events.append("abort")
            record.aborted, record.error = True, str(exc)
            break
        u = np.atleast_1d(np.asarray(decision.u, dtype=float))
        weights = sampler.weights()
        w = sampler.disturbance()
        x_next = sys.true_step(x, u, weights, w)

        if not sys.X.contains(x, tol=settings.CHECK_TOL) or not sys.U.contains(u, tol=settings.CHECK_TOL):
            record.violations += 1
            logger.warning("Run %d step %d: constraint violation", run_id, k)
        stage = cost.stage(x, u)
        total += stage
        record.inputs.append(u.tolist())
        record.disturbances.append(w.tolist())
        record.realized_deltas.append(weights.tolist())
        record.costs.append(stage)
        record.cumulative.append(total)
        record.statuses.append(decision.status)
        record.events.append(decision.event)
        record.lam.append(None if decision.lam is None else np.asarray(decision.lam).tolist())
        record.timings.append(decision.solve_time)
        record.objectives.append(decision.objective)
        record.infos.append(decision.info)
        record.audits.append(controller.observe(x, u, x_next))
        x = x_next
        record.states.append(x.tolist())
    if not record.aborted and not sys.X.contains(x, tol=settings.CHECK_TOL):
        record.violations += 1
    return record


# --- region of attraction --------------------------------------------------

@dataclass
class GridSpec:
    nx: int = 101
    ny: int = 101
    lb: Optional[Sequence[float]] = None
    ub: Optional[Sequence[float]] = None

    def axes(self, box: tuple[np.ndarray, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        lb = np.asarray(self.lb if self.lb is not None else box[0], dtype=float)
        ub = np.asarray(self.ub if self.ub is not None else box[1], dtype=float)
        return np.linspace(lb[0], ub[0], self.nx), np.linspace(lb[1], ub[1], self.ny)


@dataclass
class RoaResult:
    fraction: float
    mask: np.ndarray
    inside: np.ndarray
    xs: np.ndarray
    ys: np.ndarray

    def to_record(self) -> dict:
        return {
            "fraction": self.fraction,
            "xs": self.xs.tolist(),
            "ys": self.ys.tolist(),
            "mask": self.mask.astype(int).tolist(),
            "inside": self.inside.astype(int).tolist(),
        }


def _row_chunk(factory: Callable[[], Any], xs: np.ndarray, ys: np.ndarray, inside: np.ndarray, mode: str) -> np.ndarray:
    template = factory()
    tol = settings.CHECK_TOL
    mask = np.zeros((len(ys), len(xs)), dtype=bool)
    for r, y in enumerate(ys):
        if mode == "row":
            extent = template.row_extent(y)
            if extent is not None:
                lo, hi = extent
                mask[r] = (xs >= lo - tol) & (xs <= hi + tol)
        else:
            for c, x in enumerate(xs):
                if inside[r, c]:
                    mask[r, c] = template.feasible(np.array([x, y]))
    return mask


def roa_estimate(
    factory: Callable[[], Any],
    grid: GridSpec,
    denom: Polytope,
    box: tuple[np.ndarray, np.ndarray] | None = None,
    mode: str = "row",
    jobs: int = 1,
) -> RoaResult:
    """Feasible fraction of the grid points inside `denom`.

    `factory` builds the MPC template; with jobs > 1 it is pickled to each
    worker and must be a module-level callable or a partial of one.
    `mode="row"` solves one pair of LPs per grid row, `mode="grid"` one
    program per point.
    """
    if mode not in ("row", "grid"):
        raise ValueError(f"Unknown RoA mode '{mode}'.")
    if denom.dim != 2:
        raise ValueError("RoA gridding needs a planar state.")
    xs, ys = grid.axes(box or denom.bounding_box())
    inside = np.array([[denom.contains((x, y)) for x in xs] for y in ys], dtype=bool)
    if jobs <= 1:
        mask = _row_chunk(factory, xs, ys, inside, mode)
    else:
        chunks = np.array_split(np.arange(len(ys)), jobs)
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_row_chunk, [factory] * len(chunks), [xs] * len(chunks), [ys[c] for c in chunks], [inside[c] for c in chunks], [mode] * len(chunks)))
        mask = np.vstack(parts)
    n_inside = int(inside.sum())
    fraction = float((mask & inside).sum() / n_inside) if n_inside else 0.0
    logger.info("RoA fraction %.4f over %d grid points", fraction, n_inside)
    return RoaResult(fraction, mask, inside, xs, ys)


# --- statistics ---------------------------------------------------------------

def mc_stats(records: Sequence[RunRecord]) -> dict:
    costs = np.array([r.total_cost for r in records if not r.aborted], dtype=float)
    times = np.array([t for r in records for t in r.timings], dtype=float)

    def describe(a: np.ndarray, prefix: str) -> dict:
        if not a.size:
            return {f"{prefix}_{k}": None for k in ("mean", "median", "min", "max")}
        return {
            f"{prefix}_mean": float(a.mean()),
            f"{prefix}_median": float(np.median(a)),
            f"{prefix}_min": float(a.min()),
            f"{prefix}_max": float(a.max()),
        }

    return {
        "n_runs": len(records),
        "aborted_runs": sum(r.aborted for r in records),
        "violations": sum(r.violations for r in records),
        "fallback_steps": sum(r.fallbacks for r in records),
        "wbar_outside": sum(r.wbar_outside for r in records),
        "decrease_violations": sum(r.decrease_violations() for r in records),
        "eta_failures": sum(i.get("eta_failures", 0) for r in records for i in r.infos),
        "max_candidate_violation": max((r.max_candidate_violation() for r in records), default=0.0),
        **describe(costs, "cost"),
        **describe(times, "solve_time"),
    }


TIMING_COLUMNS = ("controller", "n_solves", "mean", "median", "min", "max", "p95")


def timing_report(records: Iterable[RunRecord]) -> list[dict]:
    """One row of solve-time statistics (seconds) per controller."""
    grouped: dict[str, list[float]] = {}
    for r in records:
        grouped.setdefault(r.controller, []).extend(r.timings)
    rows = []
    for name, times in grouped.items():
        a = np.asarray(times, dtype=float)
        if not a.size:
            continue
        rows.append(
            {
                "controller": name,
                "n_solves": int(a.size),
                "mean": float(a.mean()),
                "median": float(np.median(a)),
                "min": float(a.min()),
                "max": float(a.max()),
                "p95": float(np.percentile(a, 95)),
            }
        )
    return rows


# --- files ---------------------------------------------------------------------

class _Encoder(json.JSONEncoder):
    def default(self, o: Any) -> Any:
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, np.generic):
            return o.item()
        return super().default(o)


def write_jsonl(records: Iterable[RunRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), cls=_Encoder, sort_keys=True) + "\n")
    return path


def summary_columns(n: int, m: int, M: int) -> list[str]:
    return (
        ["run_id", "step"]
        + [f"x{i}" for i in range(n)]
        + [f"u{j}" for j in range(m)]
        + ["cost", "status"]
        + [f"lam{k}" for k in range(M)]
    )


def write_summary_csv(records: Sequence[RunRecord], path: str | Path, n: int, m: int, M: int = 0) -> Path:
    """Fixed schema: run_id, step, x0..x{n-1}, u0..u{m-1}, cost, status, lam0..lam{M-1}."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(summary_columns(n, m, M))
        for r in records:
            for k, u in enumerate(r.inputs):
                lam = r.lam[k] if r.lam[k] is not None else [""] * M
                writer.writerow([r.run_id, k, *r.states[k], *u, r.costs[k], r.statuses[k], *list(lam)[:M]])
    return path


def write_timing_csv(rows: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=TIMING_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return path
