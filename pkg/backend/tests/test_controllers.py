# Code purpose: Test the closed-loop controllers

import numpy as np
import pytest

from app.controllers import AsyncController, RecedingController, ShrinkingController
from app.errors import ControllerInfeasible
from app.invariant import rci_set, terminal_ingredients
from app.sim import closed_loop
from app.sysmodel import double_integrator


def test_receding_controller_fallback_and_infeasible(di_sys, di_cost, di_term):
    controller = RecedingController(di_sys, di_cost, 5, di_term)
    controller.reset(None)
    with pytest.raises(ControllerInfeasible):
        controller.control(np.array([9.0, 9.0]), 0)

    x = np.array([-4.0, 0.5])
    decision = controller.control(x, 0)
    assert decision.status == "Optimal"
    assert decision.event is None
    assert "sigma1" in decision.info
    assert decision.info["solve_check"]["max_violation"] <= 1e-6
    x_next = di_sys.nominal_step(x, decision.u) + controller.prev.p[0]
    audit = controller.observe(x, decision.u, x_next)
    assert audit["wbar_in_set"]
    assert audit["candidate_violation"] <= 1e-6

    # an unreachable state makes the solve fail, the shifted candidate takes over
    fallback = controller.control(np.array([9.0, 9.0]), 1)
    assert fallback.event == "fallback"
    assert fallback.status == "Candidate"
    assert np.allclose(fallback.u, controller.candidate.control)


def test_shrinking_controller_switches_to_one_step(di_sys, di_cost):
    S_f = rci_set(di_sys)
    controller = ShrinkingController(di_sys, di_cost, 3, S_f)
    assert [controller.horizon(k) for k in range(4)] == [3, 2, 1, 0]
    record = closed_loop(controller, di_sys, di_cost, 5, [-3.0, 0.5], seed=1)
    assert not record.aborted
    assert [i["horizon"] for i in record.infos] == [3, 2, 1, 1, 1]
    assert record.violations == 0
    assert all(a["in_terminal_set"] for a in record.audits[2:])
    assert all(a["wbar_in_set"] for a in record.audits[:2])


def test_async_controller_serial_updates(di_sys, di_cost, di_term):
    controller = AsyncController(di_sys, di_cost, 5, di_term, capacity=3, cadence=2)
    record = closed_loop(controller, di_sys, di_cost, 5, [-5.0, 0.0], seed=2)
    controller.close()
    assert not record.aborted
    assert record.violations == 0
    assert all(lam is not None and len(lam) == 3 for lam in record.lam)
    assert all(abs(sum(lam) - 1.0) <= 1e-6 for lam in record.lam)
    updates = [i.get("memory_update_slot") for i in record.infos]
    assert updates[1] is not None and updates[3] is not None
    assert updates[0] is None
    assert record.max_candidate_violation() <= 1e-6
    assert controller.memory.slots[0].origin == "fallback"


@pytest.mark.slow
def test_async_controller_concurrent(di_sys, di_cost, di_term):
    controller = AsyncController(di_sys, di_cost, 5, di_term, capacity=4, cadence=3, policy="rotate", concurrent=True)
    try:
        record = closed_loop(controller, di_sys, di_cost, 12, [-5.0, 0.0], seed=3)
    finally:
        controller.close()
    assert not record.aborted
    assert record.violations == 0
    assert record.max_candidate_violation() <= 1e-6


def test_async_controller_seed_anchors(di_sys, di_cost, di_term):
    controller = AsyncController(
        di_sys, di_cost, 5, di_term, capacity=4, cadence=50, seed_anchors=[(0, [-5.0, 0.0]), (3, [0.0, 0.0])]
    )
    controller.reset(np.array([-5.0, 0.0]))
    slots = controller.memory.snapshot()
    assert slots[0] is not None and slots[3] is not None
    assert slots[1] is None and slots[2] is None
    assert np.allclose(slots[3].anchor, [0.0, 0.0])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_async_primary_stays_feasible_under_random_schedules(di_sys, di_cost, di_term, seed):
    draw = np.random.default_rng(seed)
    cadence = int(draw.integers(1, 4))
    policy = str(draw.choice(["score", "rotate"]))
    capacity = int(draw.integers(3, 5))
    controller = AsyncController(di_sys, di_cost, 5, di_term, capacity=capacity, cadence=cadence, policy=policy)
    try:
        record = closed_loop(controller, di_sys, di_cost, 6, [-5.0, 0.0], seed=seed)
    finally:
        controller.close()
    assert not record.aborted
    assert record.fallbacks == 0
    assert all(status == "Optimal" for status in record.statuses)
    assert record.max_candidate_violation() <= 1e-6
    assert all(i["solve_check"]["max_violation"] <= 1e-6 for i in record.infos)


def _quiet_run(controller, sys, cost, x0, T):
    """Closed loop with every disturbance at zero; returns (V_k, l(x_k, u_k)) per step."""
    x = np.asarray(x0, dtype=float)
    controller.reset(x)
    trace = []
    for k in range(T):
        decision = controller.control(x, k)
        assert decision.event is None
        trace.append((decision.objective, cost.stage(x, decision.u), decision.info))
        x_next = sys.nominal_step(x, decision.u) + controller.prev.p[0]
        controller.observe(x, decision.u, x_next)
        x = x_next
    return trace


def test_receding_value_decreases_without_disturbance(di_sys, di_cost, di_term):
    controller = RecedingController(di_sys, di_cost, 5, di_term)
    trace = _quiet_run(controller, di_sys, di_cost, [-1.5, 0.5], 5)
    for (V_prev, stage, _), (V_next, _, info) in zip(trace, trace[1:]):
        assert info["decrease_violated"] is False
        assert info["decrease_slack"] <= 1e-6
        assert V_next - V_prev + stage <= 1e-6


def test_async_value_decreases_without_disturbance():
    # the decrease holds only without the fallback weight penalty
    sys, cost = double_integrator(lambda0_reg=0.0)
    term = terminal_ingredients(sys, cost)
    controller = AsyncController(sys, cost, 5, term, capacity=3, cadence=1000)
    try:
        trace = _quiet_run(controller, sys, cost, [-1.5, 0.5], 5)
    finally:
        controller.close()
    for (V_prev, stage, _), (V_next, _, _) in zip(trace, trace[1:]):
        assert V_next - V_prev + stage <= 1e-6
