# Code purpose: Test the tube memory, its update policies and the primary/secondary processes

from dataclasses import replace

import numpy as np
import pytest

from app.asynchronous import (
    EMA_KEEP,
    FRESH_SCORE,
    Memory,
    PrimaryTemplate,
    SecondaryProcess,
    build_primary,
    entry_from_bundle,
    fallback_entry,
    fused_sigma1,
    primary_candidate,
    run_secondary,
    store_fallback,
    update_memory_secondary,
)
from app.config import settings
from app.errors import EmptyMemory, SecondaryInfeasible
from app.invariant import terminal_ingredients
from app.sltmpc import build_nominal, build_receding
from app.sysmodel import double_integrator
from app.verify import primary_residuals

X0 = np.array([-7.0, 0.0])


@pytest.fixture(scope="module")
def secondary(di_sys, di_cost, di_term):
    return SecondaryProcess(di_sys, di_cost, 5, di_term)


@pytest.fixture(scope="module")
def entry(secondary):
    return secondary.run(X0)


def _fresh(entry, score=FRESH_SCORE):
    copy = replace(entry)
    copy.score = score
    return copy


def test_secondary_entry_offsets(di_sys, entry):
    assert entry.origin == "secondary"
    assert np.allclose(entry.anchor, X0)
    assert entry.N == 5
    assert entry.Z.shape == (6, di_sys.X.n_facets)
    assert entry.V.shape == (6, di_sys.U.n_facets)
    assert entry.Q.shape == (di_sys.n_D, 6, di_sys.Wbar.n_facets)
    assert entry.Zs.shape == (5, di_sys.X.n_facets)
    # tightened sets never exceed the original constraints
    assert np.all(entry.Z <= di_sys.X.h + 1e-9)
    assert np.all(entry.V <= di_sys.U.h + 1e-9)
    assert entry.alpha >= 0.0


def test_secondary_infeasible_anchor(secondary):
    with pytest.raises(SecondaryInfeasible):
        secondary.run(np.array([9.0, 9.0]))


def test_memory_requires_two_slots():
    with pytest.raises(ValueError):
        Memory(1)


def test_score_policy_fills_then_replaces_lowest(entry):
    memory = Memory(3)
    assert update_memory_secondary(memory, _fresh(entry)) == 0
    assert update_memory_secondary(memory, _fresh(entry)) == 1
    assert update_memory_secondary(memory, _fresh(entry)) == 2
    assert memory.is_full
    memory.slots[1].score = 0.7
    memory.slots[2].score = 0.2
    new = _fresh(entry, score=0.0)
    assert update_memory_secondary(memory, new) == 2
    assert memory.slots[2] is new
    assert new.score == FRESH_SCORE
    # slot 0 is never evicted
    memory.slots[0].score = -1.0
    memory.slots[1].score = 0.5
    memory.slots[2].score = 0.5
    assert update_memory_secondary(memory, _fresh(entry)) == 1


def test_rotate_policy(entry):
    memory = Memory(4)
    first, second = _fresh(entry), _fresh(entry)
    assert update_memory_secondary(memory, first, "rotate") == 1
    assert update_memory_secondary(memory, second, "rotate") == 1
    assert memory.slots[1] is second
    assert memory.slots[2] is first
    assert memory.slots[3] is None
    with pytest.raises(ValueError):
        update_memory_secondary(memory, _fresh(entry), "lru")


def test_record_usage_is_an_ema(entry):
    memory = Memory(3)
    memory.seed({0: _fresh(entry), 1: _fresh(entry, 0.5)})
    memory.record_usage([0.25, 0.75, 0.0])
    assert memory.slots[0].score == pytest.approx(EMA_KEEP * 1.0 + (1 - EMA_KEEP) * 0.25)
    assert memory.slots[1].score == pytest.approx(EMA_KEEP * 0.5 + (1 - EMA_KEEP) * 0.75)
    assert memory.slots[2] is None
    with pytest.raises(IndexError):
        memory.seed({3: _fresh(entry)})


def test_dump_writes_one_file_per_slot(entry, tmp_path):
    memory = Memory(3)
    memory.seed({0: _fresh(entry), 2: _fresh(entry)})
    written = memory.dump(tmp_path)
    assert sorted(p.name for p in written) == ["slot_0.json", "slot_2.json"]


def test_fallback_entry_is_the_shifted_tube(di_sys, entry):
    fb = fallback_entry(di_sys, (entry, None), [1.0, 0.0])
    assert fb.origin == "fallback"
    assert np.allclose(fb.Z[:5], entry.Zs)
    assert np.allclose(fb.Z[5], entry.Z[5])
    assert np.allclose(fb.Phi_e[(1, 0)], entry.Phi_e[(2, 1)])
    with pytest.raises(EmptyMemory):
        fallback_entry(di_sys, (entry, None), [0.0, 1.0])


def test_primary_solution_and_candidate(di_sys, di_cost, di_term, entry):
    memory = Memory(3)
    memory.seed({0: _fresh(entry), 1: _fresh(entry)})
    template = PrimaryTemplate(di_sys, di_cost, 5, 3, di_term.Z_f)
    snapshot = memory.snapshot()
    template.load(snapshot)
    bundle = template.solve(X0)
    assert bundle.optimal
    assert bundle.kind == "primary"
    assert bundle.lam.sum() == pytest.approx(1.0, abs=1e-6)
    assert abs(bundle.lam[2]) <= 1e-6
    assert primary_residuals(di_sys, snapshot, bundle.lam, bundle, X0, di_term.Z_f).ok()

    sigma1 = fused_sigma1(snapshot, bundle.lam)
    assert np.allclose(sigma1, entry.sigma1)

    wbar = np.array([0.05, -0.08])
    x_next = di_sys.nominal_step(X0, bundle.control) + bundle.p[0] + sigma1 * wbar
    candidate = primary_candidate(di_sys, bundle, snapshot, wbar, di_term.K_f, di_cost)
    store_fallback(memory, bundle, snapshot, di_sys)
    assert memory.slots[0].origin == "fallback"
    assert np.allclose(candidate.z[0], x_next, atol=1e-8)
    assert np.allclose(candidate.lam, [1.0, 0.0, 0.0])
    report = primary_residuals(di_sys, memory.snapshot(), candidate.lam, candidate, x_next, di_term.Z_f)
    assert report.max_violation <= settings.CHECK_TOL


def test_primary_load_validation(di_sys, di_cost, di_term, entry):
    template = PrimaryTemplate(di_sys, di_cost, 5, 3, di_term.Z_f)
    with pytest.raises(EmptyMemory):
        template.load((None, None, None))
    with pytest.raises(ValueError):
        template.load((entry, None))


def _vertex_support(H, vertices):
    return np.max(vertices @ np.atleast_2d(H).T, axis=0)


def test_entry_offsets_match_the_stored_responses(di_sys, di_cost, di_term, entry):
    fresh = run_secondary(di_sys, di_cost, 5, di_term, X0)
    assert fresh.origin == "secondary"
    assert np.allclose(fresh.anchor, X0)
    assert fresh.alpha == pytest.approx(entry.alpha, abs=1e-6)

    X, U, Wbar, N = di_sys.X, di_sys.U, di_sys.Wbar, entry.N
    Wv = Wbar.vertices()
    w_sup = _vertex_support(Wbar.H, di_sys.W.vertices())
    Phi_e, Phi_nu, Sigma, Xi = entry.Phi_e, entry.Phi_nu, entry.Sigma, entry.Xi

    def psi(dA, dB, i, j):
        filt = Xi[j] if i == N else Sigma[(i + 1, j)]
        return dA @ Phi_e[(i, j)] + dB @ Phi_nu[(i, j)] - filt

    def scaled(i):
        row = np.broadcast_to(np.atleast_1d(entry.sigma[min(i, N - 1)]), (Wbar.dim,))
        return _vertex_support(Wbar.H @ np.diag(row), Wv)

    for i in range(N + 1):
        Z = X.h - sum((_vertex_support(X.H @ Phi_e[(i, j)], Wv) for j in range(i)), np.zeros(X.n_facets))
        V = U.h - sum((_vertex_support(U.H @ Phi_nu[(i, j)], Wv) for j in range(i)), np.zeros(U.n_facets))
        assert np.allclose(entry.Z[i], Z, atol=1e-9)
        assert np.allclose(entry.V[i], V, atol=1e-9)
        for d, (dA, dB) in enumerate(di_sys.delta_vertices):
            Q = scaled(i) - w_sup - sum((_vertex_support(Wbar.H @ psi(dA, dB, i, j), Wv) for j in range(i)), np.zeros(Wbar.n_facets))
            assert np.allclose(entry.Q[d, i], Q, atol=1e-9)

    # the shifted tube drops the first block column
    for i in range(N):
        Zs = X.h - sum((_vertex_support(X.H @ Phi_e[(i + 1, j)], Wv) for j in range(1, i + 1)), np.zeros(X.n_facets))
        Vs = U.h - sum((_vertex_support(U.H @ Phi_nu[(i + 1, j)], Wv) for j in range(1, i + 1)), np.zeros(U.n_facets))
        assert np.allclose(entry.Zs[i], Zs, atol=1e-9)
        assert np.allclose(entry.Vs[i], Vs, atol=1e-9)
        for d, (dA, dB) in enumerate(di_sys.delta_vertices):
            Qs = scaled(i + 1) - w_sup - sum(
                (_vertex_support(Wbar.H @ psi(dA, dB, i + 1, j), Wv) for j in range(1, i + 1)), np.zeros(Wbar.n_facets)
            )
            assert np.allclose(entry.Qs[d, i], Qs, atol=1e-9)


def test_build_primary_loads_only_a_stored_memory(di_sys, di_cost, di_term, entry):
    empty = build_primary(di_sys, di_cost, 5, Memory(3), di_term.Z_f)
    assert empty.snapshot == [None, None, None]
    memory = Memory(3)
    memory.seed({1: _fresh(entry)})
    template = build_primary(di_sys, di_cost, 5, memory, di_term.Z_f)
    bundle = template.solve(X0)
    assert bundle.optimal
    assert bundle.lam == pytest.approx([0.0, 1.0, 0.0], abs=1e-6)
    assert bundle.info["max_violation"] <= settings.CHECK_TOL
    assert "rejected" not in bundle.info


def test_single_entry_primary_matches_the_frozen_tube(di_sys, di_cost, di_term, secondary):
    tubes = secondary.template.solve(X0)
    assert tubes.optimal
    memory = Memory(2)
    memory.seed({1: entry_from_bundle(di_sys, tubes)})
    primary = build_primary(di_sys, di_cost, 5, memory, di_term.Z_f)
    frozen = build_receding(di_sys, di_cost, 5, di_term, frozen=tubes)
    compared = 0
    for x in (X0, np.array([-6.3, 0.0]), np.array([-6.5, 0.4])):
        fused, fixed = primary.solve(x), frozen.solve(x)
        assert fused.optimal == fixed.optimal, x
        if fixed.optimal:
            assert fused.objective == pytest.approx(fixed.objective, rel=1e-6, abs=1e-6)
            compared += 1
    assert compared >= 1


def test_uncertainty_free_primary_is_nominal_mpc():
    sys, cost = double_integrator(eps_A=0.0, eps_B=0.0, sigma_w=0.0)
    term = terminal_ingredients(sys, cost)
    x0 = np.array([-5.0, 1.0])
    seeded = run_secondary(sys, cost, 5, term, x0)
    memory = Memory(2)
    memory.seed({1: seeded})
    bundle = build_primary(sys, cost, 5, memory, term.Z_f).solve(x0)
    nominal = build_nominal(sys, cost, 5, term.Z_f.scale(seeded.alpha)).solve(x0)
    assert bundle.optimal and nominal.optimal
    assert np.allclose(bundle.p, 0.0, atol=1e-8)
    assert bundle.objective == pytest.approx(nominal.objective, rel=1e-6, abs=1e-6)
