"""
Halfspace-representation polytope calculus.

A `Polytope` is the compact set {x | Hx <= h}. Rows of H are scaled to unit
Euclidean norm on construction. Support functions are evaluated by a linear
program (HiGHS through scipy), or by a max over vertices when the vertex list
is known.

The second half of the module emits the linear containment encodings used by
the MPC builders as cvxpy constraint blocks:

- encode_affine_containment:    alpha*A*X  is inside  beta*Y minus Gamma*Z
- encode_minkowski_containment: {a} + sum_i A_i X_i  is inside  beta*Y minus Gamma*Z
- fused_offsets:                the sum of a_m X_m over sets sharing H is {x | Hx <= sum_m a_m h^m}
"""
from __future__ import annotations

import itertools
import logging
import threading
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import cvxpy as cp
import numpy as np
from scipy.optimize import linprog

from .config import settings
from .errors import (
    DimensionTooHigh,
    EmptyResult,
    GeometryError,
    Infeasible,
    ShapeMismatch,
    SharedShapeViolation,
    Unbounded,
)

logger = logging.getLogger(__name__)

ABS_TOL = 1e-9

# guards publication of the lazily computed vertex list and box flag;
# the computation itself runs unlocked and the first finished result wins
_CACHE_LOCK = threading.Lock()
VERTEX_DIM_LIMIT = 3
# boxes up to this dimension carry an explicit vertex list
BOX_VERTEX_DIM_LIMIT = 10


class Polytope:
    """Compact polytope {x | Hx <= h} with normalized facet normals.

    - `H`: (n_h, n) facet normals, unit rows, read-only
    - `h`: (n_h,) facet offsets, read-only
    - `vertices()`: known or enumerated extreme points (n <= 3 or boxes)
    """

    __slots__ = ("H", "h", "_vertices", "_is_box")

    def __init__(
        self,
        H: Any,
        h: Any,
        vertices: Any | None = None,
        normalize: bool = True,
        origin_interior: bool = False,
    ) -> None:
        H = np.atleast_2d(np.asarray(H, dtype=float))
        h = np.asarray(h, dtype=float).reshape(-1)
        if H.shape[0] != h.shape[0]:
            raise ShapeMismatch(f"H has {H.shape[0]} rows but h has {h.shape[0]} entries.")
        norms = np.linalg.norm(H, axis=1)
        if np.any(norms <= 1e-14):
            raise GeometryError("Facet matrix contains a zero row.")
        if normalize:
            H = H / norms[:, None]
            h = h / norms
        if origin_interior and np.any(h <= 0.0):
            raise GeometryError("Origin is not strictly interior (some offset <= 0).")
        H.setflags(write=False)
        h.setflags(write=False)
        self.H = H
        self.h = h
        self._is_box: bool | None = None
        if vertices is not None:
            vertices = np.atleast_2d(np.asarray(vertices, dtype=float))
            if vertices.shape[1] != H.shape[1]:
                raise ShapeMismatch("Vertex list dimension does not match H.")
            vertices.setflags(write=False)
        self._vertices = vertices

    # --- constructors -----------------------------------------------------

    @classmethod
    def from_box(cls, lb: Sequence[float], ub: Sequence[float]) -> "Polytope":
        lb = np.asarray(lb, dtype=float).reshape(-1)
        ub = np.asarray(ub, dtype=float).reshape(-1)
        if lb.shape != ub.shape:
            raise ShapeMismatch("Box bounds differ in length.")
        if np.any(ub < lb):
            raise EmptyResult("Box has an upper bound below its lower bound.")
        n = lb.size
        eye = np.eye(n)
        H = np.vstack([eye, -eye])
        h = np.concatenate([ub, -lb])
        vertices = None
        if n <= BOX_VERTEX_DIM_LIMIT:
            vertices = _dedup(np.array(list(itertools.product(*zip(lb, ub)))))
        return cls(H, h, vertices=vertices, normalize=False)

    @classmethod
    def from_inf_ball(cls, n: int, radius: float) -> "Polytope":
        r = np.full(n, float(radius))
        return cls.from_box(-r, r)

    @classmethod
    def from_vertices(cls, V: Any) -> "Polytope":
        """Convex hull of a full-dimensional point cloud, n <= 3."""
        V = np.atleast_2d(np.asarray(V, dtype=float))
        n = V.shape[1]
        if n > VERTEX_DIM_LIMIT:
            raise DimensionTooHigh("V-to-H conversion is limited to n <= 3.")
        if n == 1:
            lo, hi = V.min(), V.max()
            return cls(np.array([[1.0], [-1.0]]), np.array([hi, -lo]), vertices=_dedup(np.array([[lo], [hi]])))
        from scipy.spatial import ConvexHull

        hull = ConvexHull(V)
        eq = hull.equations
        H, h = _unique_rows(eq[:, :-1], -eq[:, -1])
        return cls(H, h, vertices=V[hull.vertices])

    @classmethod
    def from_record(cls, record: dict) -> "Polytope":
        vertices = record.get("vertices")
        return cls(record["H"], record["h"], vertices=vertices, normalize=False)

    def to_record(self) -> dict:
        record = {"H": self.H.tolist(), "h": self.h.tolist()}
        if self._vertices is not None:
            record["vertices"] = self._vertices.tolist()
        return record

    # --- basic properties -------------------------------------------------

    @property
    def dim(self) -> int:
        return self.H.shape[1]

    @property
    def n_facets(self) -> int:
        return self.H.shape[0]

    def __repr__(self) -> str:
        return f"Polytope(dim={self.dim}, facets={self.n_facets})"

    def contains(self, x: Any, tol: float = ABS_TOL) -> bool:
        x = np.asarray(x, dtype=float).reshape(-1)
        return bool(np.all(self.H @ x <= self.h + tol))

    def scale(self, s: float) -> "Polytope":
        if s < 0:
            raise GeometryError("Scaling factor must be nonnegative.")
        vertices = None if self._vertices is None else s * self._vertices
        poly = Polytope(self.H, s * self.h, vertices=vertices, normalize=False)
        poly._is_box = self._is_box
        return poly

    def intersect(self, other: "Polytope") -> "Polytope":
        if other.dim != self.dim:
            raise ShapeMismatch("Cannot intersect polytopes of different dimension.")
        return Polytope(np.vstack([self.H, other.H]), np.concatenate([self.h, other.h]), normalize=False)

    def subset_of(self, other: "Polytope", tol: float = 1e-7) -> bool:
        return bool(np.all(self.support_many(other.H) <= other.h + tol))

    def with_offsets(self, h: Any) -> "Polytope":
        """Same facets, new offsets."""
        return Polytope(self.H, h, normalize=False)

    # --- support functions ------------------------------------------------

    def support(self, xi: Any) -> float:
        xi = np.asarray(xi, dtype=float).reshape(-1)
        if xi.size != self.dim:
            raise ShapeMismatch(f"Direction has length {xi.size}, polytope dimension is {self.dim}.")
        if self._vertices is not None:
            return float(np.max(self._vertices @ xi))
        res = linprog(-xi, A_ub=self.H, b_ub=self.h, bounds=[(None, None)] * self.dim, method="highs")
        if res.status == 2:
            raise Infeasible("Support requested on an empty polytope.")
        if res.status == 3:
            raise Unbounded("Polytope is unbounded along the requested direction.")
        if res.status != 0:
            raise GeometryError(f"Support LP failed: {res.message}")
        return float(-res.fun)

    def support_many(self, directions: Any) -> np.ndarray:
        """Support value for each row of `directions`."""
        D = np.atleast_2d(np.asarray(directions, dtype=float))
        if D.shape[1] != self.dim:
            raise ShapeMismatch("Direction matrix has the wrong number of columns.")
        if self._vertices is not None:
            return np.max(D @ self._vertices.T, axis=1)
        if self.dim <= VERTEX_DIM_LIMIT and D.shape[0] > self.n_facets:
            V = self.vertices()
            return np.max(D @ V.T, axis=1)
        return np.array([self.support(d) for d in D])

    def is_bounded(self) -> bool:
        eye = np.eye(self.dim)
        try:
            self.support_many(np.vstack([eye, -eye]))
        except Unbounded:
            return False
        return True

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        eye = np.eye(self.dim)
        ub = self.support_many(eye)
        lb = -self.support_many(-eye)
        return lb, ub

    # --- emptiness and interior ------------------------------------------

    def chebyshev_center(self) -> tuple[np.ndarray, float]:
        """Center and radius of the largest inscribed ball; radius < 0 means empty."""
        n = self.dim
        c = np.zeros(n + 1)
        c[-1] = -1.0
        A = np.hstack([self.H, np.ones((self.n_facets, 1))])
        res = linprog(c, A_ub=A, b_ub=self.h, bounds=[(None, None)] * n + [(None, 1e6)], method="highs")
        if res.status != 0:
            raise GeometryError(f"Chebyshev LP failed: {res.message}")
        return res.x[:n], float(res.x[-1])

    def is_empty(self) -> bool:
        res = linprog(
            np.zeros(self.dim),
            A_ub=self.H,
            b_ub=self.h,
            bounds=[(None, None)] * self.dim,
            method="highs",
        )
        return res.status == 2

    # --- structure --------------------------------------------------------

    def box_axes(self) -> np.ndarray | None:
        """Axis index of each facet if the polytope is an axis-aligned box, else None."""
        H = self.H
        nz = np.abs(H) > 1e-12
        if np.any(nz.sum(axis=1) != 1):
            return None
        axes = np.argmax(nz, axis=1)
        signs = np.sign(H[np.arange(self.n_facets), axes])
        for k in range(self.dim):
            if not (np.any((axes == k) & (signs > 0)) and np.any((axes == k) & (signs < 0))):
                return None
        return axes

    def is_hyperrectangle(self) -> bool:
        if self._is_box is None:
            is_box = self.box_axes() is not None
            with _CACHE_LOCK:
                if self._is_box is None:
                    self._is_box = is_box
        return self._is_box

    def has_vertices(self) -> bool:
        return self._vertices is not None or self.dim <= VERTEX_DIM_LIMIT or (
            self.is_hyperrectangle() and self.dim <= BOX_VERTEX_DIM_LIMIT
        )

    def vertices(self) -> np.ndarray:
        if self._vertices is not None:
            return self._vertices
        if self.is_hyperrectangle() and self.dim <= BOX_VERTEX_DIM_LIMIT:
            lb, ub = self.bounding_box()
            V = _dedup(np.array(list(itertools.product(*zip(lb, ub)))))
        else:
            V = enumerate_vertices(self).vertices
        V.setflags(write=False)
        with _CACHE_LOCK:
            if self._vertices is None:
                self._vertices = V
            return self._vertices

    def remove_redundant(self, tol: float = 1e-9) -> "Polytope":
        """Drop duplicate rows, then every facet implied by the others (one LP per facet)."""
        H, h = _unique_rows(self.H, self.h)
        keep = np.ones(H.shape[0], dtype=bool)
        for i in range(H.shape[0]):
            others = keep.copy()
            others[i] = False
            if not np.any(others):
                continue
            # relax the tested row so the LP stays bounded near it
            A_ub = np.vstack([H[others], H[i]])
            b_ub = np.concatenate([h[others], [h[i] + 1.0]])
            res = linprog(-H[i], A_ub=A_ub, b_ub=b_ub, bounds=[(None, None)] * self.dim, method="highs")
            if res.status == 0 and -res.fun <= h[i] + tol:
                keep[i] = False
        return Polytope(H[keep], h[keep], normalize=False)


@dataclass(frozen=True)
class VertexSet:
    vertices: np.ndarray

    def __len__(self) -> int:
        return self.vertices.shape[0]


def _unique_rows(H: np.ndarray, h: np.ndarray, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Merge rows with identical normals, keeping the tightest offset."""
    out_H: list[np.ndarray] = []
    out_h: list[float] = []
    for row, off in zip(H, h):
        norm = np.linalg.norm(row)
        row = row / norm
        off = off / norm
        for k, existing in enumerate(out_H):
            if np.max(np.abs(existing - row)) <= tol:
                out_h[k] = min(out_h[k], off)
                break
        else:
            out_H.append(row)
            out_h.append(off)
    return np.array(out_H), np.array(out_h)


def _dedup(V: np.ndarray, tol: float = ABS_TOL) -> np.ndarray:
    kept: list[np.ndarray] = []
    for v in V:
        if not any(np.max(np.abs(v - k)) <= tol for k in kept):
            kept.append(v)
    return np.array(kept)


def enumerate_vertices(P: Polytope) -> VertexSet:
    """All extreme points of P by facet-intersection enumeration (n <= 3)."""
    n = P.dim
    if n > VERTEX_DIM_LIMIT:
        raise DimensionTooHigh(f"Vertex enumeration is limited to n <= {VERTEX_DIM_LIMIT}, got {n}.")
    candidates: list[np.ndarray] = []
    for rows in itertools.combinations(range(P.n_facets), n):
        Hs = P.H[list(rows)]
        if abs(np.linalg.det(Hs)) < 1e-12:
            continue
        v = np.linalg.solve(Hs, P.h[list(rows)])
        if np.all(P.H @ v <= P.h + ABS_TOL):
            candidates.append(v)
    if not candidates:
        raise EmptyResult("Polytope has no vertices (empty or unbounded).")
    return VertexSet(_dedup(np.array(candidates)))


def affine_image_supports(P: Polytope, A: Any, directions: Any) -> np.ndarray:
    """Support of A*P along each row of `directions`."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    D = np.atleast_2d(np.asarray(directions, dtype=float))
    return P.support_many(D @ A)


def minkowski_support(shapes: Iterable[tuple[Any, Polytope]], directions: Any) -> np.ndarray:
    """Support of the Minkowski sum of Gamma_j S_j along each row of `directions`."""
    D = np.atleast_2d(np.asarray(directions, dtype=float))
    total = np.zeros(D.shape[0])
    for Gamma, S in shapes:
        total += affine_image_supports(S, Gamma, D)
    return total


def pontryagin_tighten(P: Polytope, shapes: Sequence[tuple[Any, Polytope]]) -> Polytope:
    """P minus (Minkowski sum of Gamma_j S_j), reusing the facets of P."""
    h = P.h - minkowski_support(shapes, P.H)
    result = P.with_offsets(h)
    if result.is_empty():
        raise EmptyResult("Pontryagin difference is empty.")
    return result


# --- linear containment encodings ----------------------------------------

@dataclass
class ContainmentBlocks:
    """Constraint blocks whose joint feasibility is equivalent to a set containment."""

    lambda_vars: list[cp.Variable] = field(default_factory=list)
    eq_rows: list[cp.Constraint] = field(default_factory=list)
    ineq_rows: list[cp.Constraint] = field(default_factory=list)
    aux_vars: list[cp.Variable] = field(default_factory=list)

    @property
    def constraints(self) -> list[cp.Constraint]:
        return self.eq_rows + self.ineq_rows

    def extend(self, other: "ContainmentBlocks") -> "ContainmentBlocks":
        self.lambda_vars += other.lambda_vars
        self.eq_rows += other.eq_rows
        self.ineq_rows += other.ineq_rows
        self.aux_vars += other.aux_vars
        return self

    def feasible(self, solver: str | None = None) -> bool:
        problem = cp.Problem(cp.Minimize(0), self.constraints)
        problem.solve(solver=solver or settings.SOLVER)
        return problem.status in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE)


def is_expr(value: Any) -> bool:
    return isinstance(value, cp.Expression)


def _as_pairs(Gamma: Any, Z: Any) -> list[tuple[Any, Polytope]]:
    if Gamma is None or Z is None:
        return []
    if isinstance(Z, Polytope):
        return [(Gamma, Z)]
    return list(zip(Gamma, Z))


def _select_form(Z: Polytope, form: str | None) -> str:
    form = form or settings.SUPPORT_FORM
    if form == "auto":
        if Z.has_vertices() and len(Z.vertices()) <= Z.n_facets:
            return "vertex"
        return "dual"
    return form


def support_rows(
    Z: Polytope, Gamma: Any, H_y: np.ndarray, form: str | None = None
) -> tuple[Any, ContainmentBlocks]:
    """Upper bound t on h_Z(Gamma^T H_y^T), row by row, exact at the optimum.

    Constant Gamma gives numeric supports. Decision-variable Gamma gives an
    epigraph variable constrained per vertex of Z (vertex form) or through a
    nonnegative multiplier L with L H_z = H_y Gamma (dual form).
    """
    H_y = np.atleast_2d(H_y)
    if not is_expr(Gamma):
        G = np.atleast_2d(np.asarray(Gamma, dtype=float))
        return Z.support_many(H_y @ G), ContainmentBlocks()

    blocks = ContainmentBlocks()
    n_y = H_y.shape[0]
    if _select_form(Z, form) == "vertex":
        V = Z.vertices()
        t = cp.Variable(n_y)
        images = (H_y @ Gamma) @ V.T
        blocks.aux_vars.append(t)
        blocks.ineq_rows.append(images <= cp.reshape(t, (n_y, 1), order="F") @ np.ones((1, V.shape[0])))
        return t, blocks

    L = cp.Variable((n_y, Z.n_facets), nonneg=True)
    blocks.lambda_vars.append(L)
    blocks.eq_rows.append(L @ Z.H == H_y @ Gamma)
    return L @ Z.h, blocks


def _row_scaled(beta: Any, Y: Polytope) -> Any:
    """beta*h_y, where beta is a scalar or one value per coordinate of a box Y."""
    size = beta.size if is_expr(beta) else np.size(beta)
    if size > 1:
        axes = Y.box_axes()
        if axes is None:
            raise ShapeMismatch("Diagonal scaling requires an axis-aligned box.")
        if is_expr(beta):
            selector = np.zeros((Y.n_facets, Y.dim))
            selector[np.arange(Y.n_facets), axes] = 1.0
            return cp.multiply(selector @ beta, Y.h)
        return np.asarray(beta, dtype=float)[axes] * Y.h
    return beta * Y.h


def _shape_of(M: Any) -> tuple[int, int]:
    shape = M.shape if is_expr(M) else np.atleast_2d(np.asarray(M, dtype=float)).shape
    return (shape[0], shape[1]) if len(shape) == 2 else (shape[0], 1)


def _verdict(blocks: ContainmentBlocks, ok: bool) -> None:
    """Record a containment already decided numerically as a (trivially) feasible or infeasible row."""
    slack = cp.Variable(nonneg=True)
    blocks.aux_vars.append(slack)
    blocks.ineq_rows.append(slack <= (0.0 if ok else -1.0))


def _close(blocks: ContainmentBlocks, lhs: Any, rhs: Any) -> ContainmentBlocks:
    if not is_expr(lhs) and not is_expr(rhs):
        _verdict(blocks, bool(np.all(np.asarray(lhs) <= np.asarray(rhs) + ABS_TOL)))
    else:
        blocks.ineq_rows.append(lhs <= rhs)
    return blocks


def encode_affine_containment(
    alpha: Any,
    A: Any,
    beta: Any,
    Y: Polytope,
    Gamma: Any,
    Z: Any,
    X: Polytope,
    form: str | None = None,
    multipliers: bool = True,
) -> ContainmentBlocks:
    """Blocks feasible iff alpha*A*X is inside beta*Y minus Gamma*Z.

    Emits Lam >= 0, Lam H_x = alpha H_y A, Lam h_x <= beta h_y - h_Z(Gamma^T H_y^T).
    With `multipliers=False` and a constant A the multiplier is replaced by its
    optimal value alpha * h_X(A^T H_y^T), which is the same condition.
    `Gamma`/`Z` may be lists to subtract a Minkowski sum of several images.
    """
    rows, cols = _shape_of(A)
    if cols != X.dim or rows != Y.dim:
        raise ShapeMismatch(f"A is {rows}x{cols}, X has dim {X.dim}, Y has dim {Y.dim}.")
    blocks = ContainmentBlocks()
    if multipliers or is_expr(A):
        Lam = cp.Variable((Y.n_facets, X.n_facets), nonneg=True)
        blocks.lambda_vars.append(Lam)
        blocks.eq_rows.append(Lam @ X.H == alpha * (Y.H @ A))
        lhs = Lam @ X.h
    else:
        lhs = alpha * affine_image_supports(X, A, Y.H)
    rhs = _row_scaled(beta, Y)
    for G, S in _as_pairs(Gamma, Z):
        g_rows, _ = _shape_of(G)
        if g_rows != Y.dim:
            raise ShapeMismatch("Gamma rows must match the dimension of Y.")
        term, sub = support_rows(S, G, Y.H, form)
        blocks.extend(sub)
        rhs = rhs - term
    return _close(blocks, lhs, rhs)


def encode_minkowski_containment(
    a: Any,
    terms: Sequence[tuple],
    beta: Any,
    Y: Polytope,
    Gamma: Any = None,
    Z: Any = None,
    form: str | None = None,
) -> ContainmentBlocks:
    """Blocks feasible iff {a} + sum_i A_i X_i is inside beta*Y minus Gamma*Z.

    Each term is (A_i, X_i) or (A_i, X_i, c_i) with a nonnegative scalar c_i
    multiplying a constant A_i. Decision-variable A_i get a multiplier
    Lam_i >= 0 with Lam_i H_{x,i} = H_y A_i; constant terms contribute their
    exact support. `beta` is a scalar, or one value per coordinate when Y is a box.
    """
    blocks = ContainmentBlocks()
    lhs: Any = np.zeros(Y.n_facets)
    if a is not None:
        a_size = a.size if is_expr(a) else np.size(a)
        if a_size != Y.dim:
            raise ShapeMismatch("Translation vector does not match the dimension of Y.")
        lhs = Y.H @ a
    for term in terms:
        A_i, X_i = term[0], term[1]
        coeff = term[2] if len(term) > 2 else 1.0
        rows, cols = _shape_of(A_i)
        if rows != Y.dim or cols != X_i.dim:
            raise ShapeMismatch(f"Term matrix is {rows}x{cols}, expected {Y.dim}x{X_i.dim}.")
        if is_expr(A_i):
            Lam = cp.Variable((Y.n_facets, X_i.n_facets), nonneg=True)
            blocks.lambda_vars.append(Lam)
            blocks.eq_rows.append(Lam @ X_i.H == Y.H @ A_i)
            lhs = lhs + Lam @ X_i.h
        else:
            lhs = lhs + coeff * affine_image_supports(X_i, A_i, Y.H)
    rhs = _row_scaled(beta, Y)
    for G, S in _as_pairs(Gamma, Z):
        term_rows, sub = support_rows(S, G, Y.H, form)
        blocks.extend(sub)
        rhs = rhs - term_rows
    return _close(blocks, lhs, rhs)


def fused_offsets(coeffs: Any, offsets: Any, facet_matrices: Sequence[np.ndarray] | None = None) -> Any:
    """sum_m a_m h^m for sets sharing one facet matrix.

    `offsets` is a list of equally shaped offset arrays, or an (n_h, M)
    expression (e.g. a cvxpy parameter) holding one set per column.
    Numeric coefficients keep the shape of the members; expression
    coefficients return a flat affine expression.
    """
    if facet_matrices is not None:
        ref = facet_matrices[0]
        for H in facet_matrices[1:]:
            if H.shape != ref.shape or not np.allclose(H, ref, atol=1e-12):
                raise SharedShapeViolation("Fused sets must share a facet matrix.")
    if is_expr(offsets):
        n_coeffs = coeffs.size if is_expr(coeffs) else np.size(coeffs)
        if offsets.shape[1] != n_coeffs:
            raise ShapeMismatch("One coefficient per column of offsets is required.")
        return offsets @ coeffs
    arrays = [np.asarray(o, dtype=float) for o in offsets]
    if not arrays:
        raise EmptyResult("No offsets to fuse.")
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise ShapeMismatch("Fused offset arrays differ in shape.")
    stacked = np.column_stack([a.reshape(-1) for a in arrays])
    if is_expr(coeffs):
        return stacked @ coeffs
    coeffs = np.asarray(coeffs, dtype=float).reshape(-1)
    if coeffs.size != stacked.shape[1]:
        raise ShapeMismatch("One coefficient per offset vector is required.")
    return (stacked @ coeffs).reshape(shape)
