# Code purpose: Test the block-lower-triangular operators and the SLP relations

import numpy as np
import pytest

from app.errors import LengthMismatch, ShapeMismatch
from app.polytope import Polytope
from app.slp import (
    BlockLowerTriangular,
    FilterRow,
    combine,
    combine_rows,
    forward_recursion,
    rollout_error,
    shift,
    slp_residual,
    tube_offsets,
)

A = np.array([[1.0, 0.15], [0.1, 1.0]])
B = np.array([[0.1], [1.1]])


def _random_response(rng, N=4):
    Phi_nu = BlockLowerTriangular.from_function(N, 1, 2, lambda i, j: rng.normal(size=(1, 2)))
    Sigma = BlockLowerTriangular.from_function(
        N, 2, 2, lambda i, j: 0.3 * np.eye(2) if j == i - 1 else rng.normal(scale=0.1, size=(2, 2))
    )
    return Phi_nu, Sigma, forward_recursion(Phi_nu, Sigma, A, B)


def test_pattern_is_enforced():
    with pytest.raises(ShapeMismatch):
        BlockLowerTriangular(3, 2, 2, {(1, 1): np.eye(2)})
    with pytest.raises(ShapeMismatch):
        BlockLowerTriangular(3, 2, 2, {(2, 0): np.eye(3)})
    Z = BlockLowerTriangular.zeros(3, 2, 1)
    assert len(list(Z.indices())) == 6
    assert np.allclose(Z[(3, 2)], 0.0)


def test_blocks_are_read_only():
    op = BlockLowerTriangular(2, 1, 1, {(1, 0): np.ones((1, 1))})
    with pytest.raises(ValueError):
        op[(1, 0)][0, 0] = 2.0


def test_forward_recursion_has_zero_residual(rng):
    Phi_nu, Sigma, Phi_e = _random_response(rng)
    assert slp_residual(Phi_e, Phi_nu, Sigma, A, B).max_abs() < 1e-12
    assert all(np.allclose(D, 0.3 * np.eye(2)) for D in Phi_e.diagonal())

    perturbed = Phi_e.map(lambda M: M + 1e-3)
    assert slp_residual(perturbed, Phi_nu, Sigma, A, B).max_abs() > 1e-4


def test_rollout_matches_closed_loop_error(rng):
    N = 4
    Phi_nu, Sigma, Phi_e = _random_response(rng, N)
    wbar = [rng.uniform(-1, 1, size=2) for _ in range(N)]
    e, nu = rollout_error(Phi_e, Phi_nu, wbar)
    # e_{i+1} = A e_i + B nu_i + sum_j Sigma[i+1, j] wbar_j with e_0 = 0, nu_0 = 0
    e_prev, nu_prev = np.zeros(2), np.zeros(1)
    for i in range(1, N + 1):
        expected = A @ e_prev + B @ nu_prev + sum(Sigma[(i, j)] @ wbar[j] for j in range(i))
        assert np.allclose(e[i - 1], expected)
        e_prev, nu_prev = e[i - 1], nu[i - 1]
    with pytest.raises(LengthMismatch):
        rollout_error(Phi_e, Phi_nu, wbar[:2])


def test_shift_moves_blocks_up_and_left(rng):
    Phi_nu, Sigma, Phi_e = _random_response(rng, 3)
    bottom = [np.full((2, 2), float(k)) for k in range(3)]
    S = shift(Phi_e, bottom)
    assert np.allclose(S[(1, 0)], Phi_e[(2, 1)])
    assert np.allclose(S[(2, 1)], Phi_e[(3, 2)])
    assert np.allclose(S[(2, 0)], Phi_e[(3, 1)])
    assert all(np.allclose(S[(3, j)], bottom[j]) for j in range(3))
    with pytest.raises(ShapeMismatch):
        shift(Phi_e, bottom[:2])


def test_combine_is_blockwise(rng):
    ops = [_random_response(rng, 3)[2] for _ in range(3)]
    coeffs = [0.2, 0.3, 0.5]
    C = combine(coeffs, ops)
    for key in C.indices():
        assert np.allclose(C[key], sum(c * op[key] for c, op in zip(coeffs, ops)))
    rows = [FilterRow(tuple(rng.normal(size=(2, 2)) for _ in range(3))) for _ in range(3)]
    R = combine_rows(coeffs, rows)
    assert np.allclose(R[1], sum(c * r[1] for c, r in zip(coeffs, rows)))


def test_tube_offsets_sum_supports():
    Phi = BlockLowerTriangular(2, 2, 2, {(1, 0): np.eye(2), (2, 0): 2.0 * np.eye(2), (2, 1): np.eye(2)})
    Wbar = Polytope.from_inf_ball(2, 0.1)
    out = tube_offsets(Phi, Wbar, np.eye(2))
    assert np.allclose(out[0], 0.0)
    assert np.allclose(out[1], [0.1, 0.1])
    assert np.allclose(out[2], [0.3, 0.3])


def test_record_roundtrip(rng):
    op = _random_response(rng, 3)[2]
    back = BlockLowerTriangular.from_record(op.to_record())
    assert np.allclose(op.to_dense(), back.to_dense())
    assert op.to_dense().shape == (6, 6)
