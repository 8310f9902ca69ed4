"""
Block-lower-triangular operators of the system level parameterization.

Index convention: block (i, j) with 1 <= i <= N and 0 <= j < i maps the j-th
auxiliary disturbance to the i-th error state (Phi_e), error input (Phi_nu)
or, for the filter Sigma, to the combined uncertainty of stage i-1
(so Sigma's block (i, j) is Sigma_{i,j} with the diagonal Sigma_{i,i-1} = sigma_i I).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import LengthMismatch, ShapeMismatch
from .polytope import Polytope


def _frozen(M: Any, shape: tuple[int, int]) -> np.ndarray:
    arr = np.array(M, dtype=float).reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class BlockLowerTriangular:
    N: int
    row_dim: int
    col_dim: int
    blocks: Mapping[tuple[int, int], np.ndarray]

    def __post_init__(self) -> None:
        shape = (self.row_dim, self.col_dim)
        full: dict[tuple[int, int], np.ndarray] = {}
        for (i, j), M in self.blocks.items():
            if not (1 <= i <= self.N and 0 <= j < i):
                raise ShapeMismatch(f"Block ({i}, {j}) lies outside the strictly lower pattern for N={self.N}.")
            if np.shape(M) != shape:
                raise ShapeMismatch(f"Block ({i}, {j}) has shape {np.shape(M)}, expected {shape}.")
            full[(i, j)] = _frozen(M, shape)
        for i, j in self.indices():
            full.setdefault((i, j), _frozen(np.zeros(shape), shape))
        object.__setattr__(self, "blocks", full)

    def indices(self) -> Iterable[tuple[int, int]]:
        return ((i, j) for i in range(1, self.N + 1) for j in range(i))

    def __getitem__(self, key: tuple[int, int]) -> np.ndarray:
        return self.blocks[key]

    @classmethod
    def zeros(cls, N: int, row_dim: int, col_dim: int) -> "BlockLowerTriangular":
        return cls(N, row_dim, col_dim, {})

    @classmethod
    def from_function(cls, N: int, row_dim: int, col_dim: int, fn: Callable[[int, int], Any]) -> "BlockLowerTriangular":
        return cls(N, row_dim, col_dim, {(i, j): fn(i, j) for i in range(1, N + 1) for j in range(i)})

    def map(self, fn: Callable[[np.ndarray], np.ndarray], row_dim: int | None = None) -> "BlockLowerTriangular":
        row_dim = self.row_dim if row_dim is None else row_dim
        return BlockLowerTriangular(self.N, row_dim, self.col_dim, {k: fn(M) for k, M in self.blocks.items()})

    def row(self, i: int) -> list[np.ndarray]:
        return [self.blocks[(i, j)] for j in range(i)]

    def last_row(self) -> list[np.ndarray]:
        return self.row(self.N)

    def first_column(self) -> list[np.ndarray]:
        """Blocks (i, 0) for i = 1..N."""
        return [self.blocks[(i, 0)] for i in range(1, self.N + 1)]

    def diagonal(self) -> list[np.ndarray]:
        """Blocks (i, i-1) for i = 1..N."""
        return [self.blocks[(i, i - 1)] for i in range(1, self.N + 1)]

    def max_abs(self) -> float:
        return max((float(np.max(np.abs(M))) for M in self.blocks.values()), default=0.0)

    def to_dense(self) -> np.ndarray:
        """(N*row_dim) x (N*col_dim) matrix, block row i-1 holding stage i."""
        r, c = self.row_dim, self.col_dim
        D = np.zeros((self.N * r, self.N * c))
        for (i, j), M in self.blocks.items():
            D[(i - 1) * r : i * r, j * c : (j + 1) * c] = M
        return D

    def to_record(self) -> dict:
        return {
            "N": self.N,
            "row_dim": self.row_dim,
            "col_dim": self.col_dim,
            "blocks": {f"{i},{j}": M.tolist() for (i, j), M in self.blocks.items()},
        }

    @classmethod
    def from_record(cls, record: dict) -> "BlockLowerTriangular":
        blocks = {tuple(int(s) for s in key.split(",")): np.array(val) for key, val in record["blocks"].items()}
        return cls(record["N"], record["row_dim"], record["col_dim"], blocks)


@dataclass(frozen=True, eq=False)
class FilterRow:
    """Terminal filter blocks Xi_0..Xi_{N-1}."""

    blocks: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "blocks", tuple(_frozen(M, np.shape(M)) for M in self.blocks))

    @property
    def N(self) -> int:
        return len(self.blocks)

    def __getitem__(self, j: int) -> np.ndarray:
        return self.blocks[j]

    def __len__(self) -> int:
        return len(self.blocks)

    def to_record(self) -> list:
        return [M.tolist() for M in self.blocks]

    @classmethod
    def from_record(cls, record: list) -> "FilterRow":
        return cls(tuple(np.array(M) for M in record))


def combine(coeffs: Sequence[float], ops: Sequence[BlockLowerTriangular]) -> BlockLowerTriangular:
    """Blockwise linear combination sum_m c_m op_m."""
    ref = ops[0]
    blocks = {k: sum(c * op[k] for c, op in zip(coeffs, ops)) for k in ref.indices()}
    return BlockLowerTriangular(ref.N, ref.row_dim, ref.col_dim, blocks)


def combine_rows(coeffs: Sequence[float], rows: Sequence[FilterRow]) -> FilterRow:
    return FilterRow(tuple(sum(c * r[j] for c, r in zip(coeffs, rows)) for j in range(rows[0].N)))


def shift(Abig: BlockLowerTriangular, Brow: Sequence[Any]) -> BlockLowerTriangular:
    """Drop the first block row and column, append `Brow` as the last block row."""
    if len(Brow) != Abig.N:
        raise ShapeMismatch(f"Bottom row needs {Abig.N} blocks, got {len(Brow)}.")
    blocks = {(i, j): Abig[(i + 1, j + 1)] for i in range(1, Abig.N) for j in range(i)}
    for j, M in enumerate(Brow):
        if np.shape(M) != (Abig.row_dim, Abig.col_dim):
            raise ShapeMismatch(f"Bottom row block {j} has shape {np.shape(M)}.")
        blocks[(Abig.N, j)] = M
    return BlockLowerTriangular(Abig.N, Abig.row_dim, Abig.col_dim, blocks)


def _check(Phi_e: BlockLowerTriangular, Phi_nu: BlockLowerTriangular, Sigma: BlockLowerTriangular, A: np.ndarray, B: np.ndarray) -> None:
    n, m = A.shape[0], B.shape[1]
    if not (Phi_e.N == Phi_nu.N == Sigma.N):
        raise ShapeMismatch("Operators have different horizons.")
    if (Phi_e.row_dim, Phi_e.col_dim) != (n, n) or (Sigma.row_dim, Sigma.col_dim) != (n, n):
        raise ShapeMismatch("Phi_e and Sigma must be n x n blockwise.")
    if (Phi_nu.row_dim, Phi_nu.col_dim) != (m, n):
        raise ShapeMismatch("Phi_nu must be m x n blockwise.")


def slp_residual(
    Phi_e: BlockLowerTriangular,
    Phi_nu: BlockLowerTriangular,
    Sigma: BlockLowerTriangular,
    A: Any,
    B: Any,
) -> BlockLowerTriangular:
    """Blockwise residual of Phi_e = Z(A Phi_e + B Phi_nu) + Sigma."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    _check(Phi_e, Phi_nu, Sigma, A, B)

    def residual(i: int, j: int) -> np.ndarray:
        if j == i - 1:
            return Phi_e[(i, j)] - Sigma[(i, j)]
        return Phi_e[(i, j)] - A @ Phi_e[(i - 1, j)] - B @ Phi_nu[(i - 1, j)] - Sigma[(i, j)]

    return BlockLowerTriangular.from_function(Phi_e.N, Phi_e.row_dim, Phi_e.col_dim, residual)


def forward_recursion(Phi_nu: BlockLowerTriangular, Sigma: BlockLowerTriangular, A: Any, B: Any) -> BlockLowerTriangular:
    """The unique Phi_e with zero SLP residual for the given (Phi_nu, Sigma)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    blocks: dict[tuple[int, int], np.ndarray] = {}
    for i in range(1, Sigma.N + 1):
        for j in range(i):
            if j == i - 1:
                blocks[(i, j)] = Sigma[(i, j)]
            else:
                blocks[(i, j)] = A @ blocks[(i - 1, j)] + B @ Phi_nu[(i - 1, j)] + Sigma[(i, j)]
    return BlockLowerTriangular(Sigma.N, Sigma.row_dim, Sigma.col_dim, blocks)


def rollout_error(
    Phi_e: BlockLowerTriangular, Phi_nu: BlockLowerTriangular, wbar_seq: Sequence[Any]
) -> tuple[np.ndarray, np.ndarray]:
    """e_i = sum_{j<i} Phi_e[i,j] wbar_j and nu_i likewise, rows i = 1..N."""
    if len(wbar_seq) != Phi_e.N:
        raise LengthMismatch(f"Need {Phi_e.N} auxiliary disturbances, got {len(wbar_seq)}.")
    W = [np.asarray(w, dtype=float).reshape(-1) for w in wbar_seq]
    e = np.array([sum(Phi_e[(i, j)] @ W[j] for j in range(i)) for i in range(1, Phi_e.N + 1)])
    nu = np.array([sum(Phi_nu[(i, j)] @ W[j] for j in range(i)) for i in range(1, Phi_nu.N + 1)])
    return e, nu


def tube_offsets(Phi: BlockLowerTriangular, Wbar: Polytope, H_target: Any) -> np.ndarray:
    """Row i (i = 0..N) holds sum_{j<i} h_Wbar(Phi[i,j]^T H^T), the tightening of stage i."""
    H = np.atleast_2d(np.asarray(H_target, dtype=float))
    if H.shape[1] != Phi.row_dim:
        raise ShapeMismatch("Target facets do not match the operator's row dimension.")
    out = np.zeros((Phi.N + 1, H.shape[0]))
    for i in range(1, Phi.N + 1):
        out[i] = sum(Wbar.support_many(H @ M) for M in Phi.row(i))
    return out
