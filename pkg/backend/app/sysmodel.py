"""
Problem data: uncertain LTI systems, cost specifications and the two
benchmark constructors (double integrator and planar VTOL vehicle).

True dynamics:  x+ = (A + dA) x + (B + dB) u + w,  (dA, dB) in co{D^d},  w in W.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .errors import DisturbanceOutsideW, GeometryError, ShapeMismatch
from .polytope import Polytope

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class UncertainLTI:
    A: np.ndarray
    B: np.ndarray
    delta_vertices: tuple[tuple[np.ndarray, np.ndarray], ...]
    W: Polytope
    Wbar: Polytope
    X: Polytope
    U: Polytope
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B.reshape(-1, 1)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        n, m = A.shape[0], B.shape[1]
        if A.shape != (n, n) or B.shape[0] != n:
            raise ShapeMismatch(f"A is {A.shape}, B is {B.shape}.")
        vertices = tuple(self.delta_vertices) or ((np.zeros((n, n)), np.zeros((n, m))),)
        cleaned = []
        for dA, dB in vertices:
            dA = np.asarray(dA, dtype=float).reshape(n, n)
            dB = np.asarray(dB, dtype=float).reshape(n, m)
            cleaned.append((dA, dB))
        object.__setattr__(self, "delta_vertices", tuple(cleaned))
        for label, poly, dim in (("W", self.W, n), ("Wbar", self.Wbar, n), ("X", self.X, n), ("U", self.U, m)):
            if poly.dim != dim:
                raise ShapeMismatch(f"{label} has dimension {poly.dim}, expected {dim}.")
        if np.any(self.Wbar.h <= 0):
            raise GeometryError("Wbar must contain the origin in its interior.")
        for label, poly in (("X", self.X), ("U", self.U)):
            if np.any(poly.h < 0):
                raise GeometryError(f"{label} does not contain the origin.")
            if np.any(poly.h == 0):
                logger.warning("%s: origin lies on the boundary of %s", self.name, label)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def n_D(self) -> int:
        return len(self.delta_vertices)

    @property
    def is_certain(self) -> bool:
        return all(not np.any(dA) and not np.any(dB) for dA, dB in self.delta_vertices)

    @property
    def is_uncertainty_free(self) -> bool:
        """No parametric uncertainty and W = {0}."""
        eye = np.eye(self.n)
        return self.is_certain and bool(np.all(np.abs(self.W.support_many(np.vstack([eye, -eye]))) <= 1e-12))

    def delta_combination(self, weights: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
        weights = np.asarray(weights, dtype=float).reshape(-1)
        if weights.size != self.n_D or np.any(weights < -1e-12) or abs(weights.sum() - 1.0) > 1e-9:
            raise ShapeMismatch("Vertex weights must be a probability vector over the uncertainty vertices.")
        dA = sum(w * v[0] for w, v in zip(weights, self.delta_vertices))
        dB = sum(w * v[1] for w, v in zip(weights, self.delta_vertices))
        return dA, dB

    def nominal_step(self, x: Any, u: Any) -> np.ndarray:
        return self.A @ np.asarray(x, dtype=float) + self.B @ np.atleast_1d(np.asarray(u, dtype=float))

    def true_step(self, x: Any, u: Any, weights: Sequence[float], w: Any) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return self.nominal_step(x, u) + combined_uncertainty(self, self.delta_combination(weights), x, u, w, check=False)

    def to_record(self) -> dict:
        return {
            "name": self.name,
            "params": self.params,
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "delta_vertices": [[dA.tolist(), dB.tolist()] for dA, dB in self.delta_vertices],
            "W": self.W.to_record(),
            "Wbar": self.Wbar.to_record(),
            "X": self.X.to_record(),
            "U": self.U.to_record(),
        }


@dataclass(frozen=True, eq=False)
class CostSpec:
    Q: np.ndarray
    R: np.ndarray
    P_f: np.ndarray
    lambda0_reg: float = 1.0

    def stage(self, x: Any, u: Any) -> float:
        x = np.asarray(x, dtype=float)
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return float(x @ self.Q @ x + u @ self.R @ u)

    def terminal(self, x: Any) -> float:
        x = np.asarray(x, dtype=float)
        return float(x @ self.P_f @ x)


def combined_uncertainty(sys: UncertainLTI, delta: Any, x: Any, u: Any, w: Any, check: bool = True) -> np.ndarray:
    """eta = dA x + dB u + w, for a vertex index or an explicit (dA, dB) pair."""
    if isinstance(delta, (int, np.integer)):
        dA, dB = sys.delta_vertices[int(delta)]
    else:
        dA, dB = delta
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    w = np.asarray(w, dtype=float)
    if check and not sys.W.contains(w, tol=1e-9):
        raise DisturbanceOutsideW(f"Disturbance {w} lies outside W.")
    return np.asarray(dA) @ x + np.asarray(dB) @ u + w


def _vertex_product(dA_list: list[np.ndarray], dB_list: list[np.ndarray]) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    pairs: list[tuple[np.ndarray, np.ndarray]] = []
    for dA, dB in itertools.product(dA_list, dB_list):
        if not any(np.array_equal(dA, a) and np.array_equal(dB, b) for a, b in pairs):
            pairs.append((dA, dB))
    return tuple(pairs)


def _with_riccati(Q: np.ndarray, R: np.ndarray, A: np.ndarray, B: np.ndarray, lambda0_reg: float) -> CostSpec:
    from .invariant import lqr_gain

    _, P_f = lqr_gain(A, B, Q, R)
    return CostSpec(Q=Q, R=R, P_f=P_f, lambda0_reg=lambda0_reg)


DI_A = np.array([[1.0, 0.15], [0.1, 1.0]])
DI_B = np.array([[0.1], [1.1]])


def double_integrator(
    eps_A: float = 0.1,
    eps_B: float = 0.1,
    sigma_w: float = 0.1,
    lambda0_reg: float = 1.0,
) -> tuple[UncertainLTI, CostSpec]:
    """Benchmark with |x|_inf <= 8, |u| <= 4, W = Wbar = sigma_w box, Q = 10 I, R = 1."""
    if min(eps_A, eps_B, sigma_w) < 0:
        raise ValueError("Uncertainty parameters must be nonnegative.")
    E = np.zeros((2, 2))
    E[0, 0] = eps_A
    F = np.array([[0.0], [eps_B]])
    sys = UncertainLTI(
        A=DI_A,
        B=DI_B,
        delta_vertices=_vertex_product([E, -E], [F, -F]),
        W=Polytope.from_inf_ball(2, sigma_w),
        # Wbar needs an interior; a zero disturbance keeps a tiny box
        Wbar=Polytope.from_inf_ball(2, max(sigma_w, 1e-3)),
        X=Polytope.from_inf_ball(2, 8.0),
        U=Polytope.from_inf_ball(1, 4.0),
        name="double_integrator",
        params={"eps_A": eps_A, "eps_B": eps_B, "sigma_w": sigma_w},
    )
    cost = _with_riccati(10.0 * np.eye(2), np.eye(1), sys.A, sys.B, lambda0_reg)
    return sys, cost


SKEWED_NORMALS = np.array([[np.cos(k * np.pi / 3), np.sin(k * np.pi / 3)] for k in range(6)])


def skewed_disturbance(sigma_w: float) -> Polytope:
    """Hexagonal W with normals at multiples of 60 degrees, offsets (0.5, 1, 0.5, 0.5, 1, 0.5)*sigma_w."""
    h = sigma_w * np.array([0.5, 1.0, 0.5, 0.5, 1.0, 0.5])
    return Polytope(SKEWED_NORMALS, h, normalize=False)


def double_integrator_skewed(
    eps_A: float = 0.1,
    eps_B: float = 0.1,
    sigma_w: float = 0.2,
    wbar: str = "equal_w",
    lambda0_reg: float = 1.0,
) -> tuple[UncertainLTI, CostSpec]:
    """Double integrator with the skewed hexagonal W.

    `wbar="equal_w"` designs Wbar = W (scalar filter scaling),
    `wbar="box"` uses the bounding box of W (diagonal scaling allowed).
    """
    base, cost = double_integrator(eps_A, eps_B, sigma_w, lambda0_reg)
    design = skewed_disturbance(max(sigma_w, 1e-3))
    if wbar == "box":
        lb, ub = design.bounding_box()
        Wbar = Polytope.from_box(lb, ub)
    elif wbar == "equal_w":
        Wbar = design
    else:
        raise ValueError(f"Unknown Wbar design '{wbar}'.")
    sys = UncertainLTI(
        A=base.A,
        B=base.B,
        delta_vertices=base.delta_vertices,
        W=skewed_disturbance(sigma_w),
        Wbar=Wbar,
        X=base.X,
        U=base.U,
        name="double_integrator_skewed",
        params={"eps_A": eps_A, "eps_B": eps_B, "sigma_w": sigma_w, "wbar": wbar},
    )
    return sys, cost


VTOL_DT = 0.075
VTOL_INERTIA = 0.144


def vtol_matrices(k1: float, k2: float, dt: float = VTOL_DT, inertia: float = VTOL_INERTIA) -> tuple[np.ndarray, np.ndarray]:
    """State (p_x, v_x, p_z, v_z, theta, omega), input (u_z, u_theta)."""
    A = np.eye(6)
    A[0, 1] = dt
    A[1, 4] = dt * k1
    A[2, 3] = dt
    A[4, 5] = dt
    A[5, 4] = dt * k2
    B = np.zeros((6, 2))
    B[3, 0] = dt
    B[5, 1] = dt / inertia
    return A, B


def vtol(
    sigma_w: float = 0.05,
    k1_range: tuple[float, float] = (3.33, 4.67),
    k2_range: tuple[float, float] = (4.33, 5.67),
    wbar_radius: float = 0.075,
    pz_min: float = -15.0,
    Q_diag: Sequence[float] = (10.0, 1.0, 10.0, 1.0, 1.0, 1.0),
    lambda0_reg: float = 1.0,
) -> tuple[UncertainLTI, CostSpec]:
    """Planar VTOL vehicle with uncertain rotation/translation coupling k1, k2.

    Nominal model at the interval midpoints; the two uncertainty vertices sit
    at the joint interval endpoints. `pz_min=0.0` adds the ground floor p_z >= 0,
    which leaves the landing target on the boundary of X.
    """
    k1_nom = 0.5 * sum(k1_range)
    k2_nom = 0.5 * sum(k2_range)
    A, B = vtol_matrices(k1_nom, k2_nom)
    vertices = []
    for k1, k2 in (
        (k1_range[0], k2_range[0]),
        (k1_range[1], k2_range[1]),
    ):
        dA = np.zeros((6, 6))
        dA[1, 4] = VTOL_DT * (k1 - k1_nom)
        dA[5, 4] = VTOL_DT * (k2 - k2_nom)
        vertices.append((dA, np.zeros((6, 2))))

    # W is the segment between -+ sigma_w (e_vx + e_omega)
    g = np.zeros(6)
    g[1] = g[5] = 1.0
    H_w = [np.eye(6)[i] for i in (0, 2, 3, 4)]
    H_w = H_w + [-r for r in H_w]
    diff = np.zeros(6)
    diff[1], diff[5] = 1.0, -1.0
    H_w += [diff, -diff, np.eye(6)[1], -np.eye(6)[1]]
    h_w = np.zeros(len(H_w))
    h_w[-2:] = sigma_w
    W = Polytope(np.array(H_w), h_w, vertices=np.vstack([-sigma_w * g, sigma_w * g]))

    X = Polytope.from_box([-15.0, -6.0, pz_min, -6.0, -20.0, -10.0], [15.0, 6.0, 15.0, 6.0, 20.0, 10.0])
    U = Polytope.from_box([-5.0, -25.0], [5.0, 25.0])
    sys = UncertainLTI(
        A=A,
        B=B,
        delta_vertices=tuple(vertices),
        W=W,
        Wbar=Polytope.from_inf_ball(6, wbar_radius),
        X=X,
        U=U,
        name="vtol",
        params={
            "sigma_w": sigma_w,
            "k1_range": list(k1_range),
            "k2_range": list(k2_range),
            "wbar_radius": wbar_radius,
            "pz_min": pz_min,
        },
    )
    cost = _with_riccati(np.diag(np.asarray(Q_diag, dtype=float)), np.eye(2), A, B, lambda0_reg)
    return sys, cost


SYSTEMS = {
    "double_integrator": double_integrator,
    "double_integrator_skewed": double_integrator_skewed,
    "vtol": vtol,
}


def build_system(system_id: str, **overrides: Any) -> tuple[UncertainLTI, CostSpec]:
    try:
        factory = SYSTEMS[system_id]
    except KeyError as exc:
        raise ValueError(f"Unknown system '{system_id}'.") from exc
    return factory(**overrides)
