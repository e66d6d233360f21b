import math

import numpy as np
import pytest

from conftest import HELI_BOX, sample_region
from rsimplex.dynamics import dense_trajectory, pendulum_safe_set
from rsimplex.faults import FaultSpec, with_faults
from rsimplex.geometry import HPolytope, HyperInterval, box_in_polytope, contains_points
from rsimplex.runtime import (BC, MC, NO_DECISION, ActuatorLatch, BaseController, ConfigError,
                              CycleSchedule, FunctionMC, Scenario, audit_mc_decisions, dm_decide,
                              run_simulation)
from rsimplex.scenarios import helicopter_scenario, pendulum_scenario

SCHED = CycleSchedule(0.05, 0.25)


class BoxBC(BaseController):
    """Polytope region with a constant command; enough for plants with x' = 0."""

    def __init__(self, region: HPolytope, u):
        self.region = region
        self.u = np.asarray(u, dtype=float)

    def box_in_region(self, box):
        return box_in_polytope(box, self.region)

    def contains(self, x):
        return bool(contains_points(self.region, np.asarray(x, dtype=float)))

    def choose(self, x_sample, u_held, lead):
        return self.u.copy()


def unit_box(r=1.0, n=2):
    return HyperInterval(-r * np.ones(n), r * np.ones(n)).to_polytope()


def still_scenario(still, n_cycles=60, **kw):
    s = unit_box(2.0)
    return Scenario(still, s, BoxBC(unit_box(1.0), [0.0]), FunctionMC(lambda x: np.array([0.3])), SCHED,
                    np.array([0.2, -0.4]), n_cycles, **kw)


# --- schedule ----------------------------------------------------------------------

def test_schedule_defaults():
    assert SCHED.m == 5
    assert SCHED.epsilon == pytest.approx(0.0005)


@pytest.mark.parametrize("tau_c,tau_r,eps", [(0.05, 0.26, None), (0.05, 0.0, None), (0.05, 0.25, 0.05),
                                             (0.05, 0.25, 0.0), (0.05, 0.02, None)])
def test_schedule_rejects_bad_values(tau_c, tau_r, eps):
    with pytest.raises(ConfigError):
        CycleSchedule(tau_c, tau_r, eps)


def test_actuator_latch_set():
    latch = ActuatorLatch(np.zeros(1))
    latch.set([2.0], 0.15)
    assert latch.u.tolist() == [2.0] and latch.t == 0.15


# --- decision module -----------------------------------------------------------------

def test_dm_still_deep_inside_chooses_mc(still):
    bc = BoxBC(unit_box(1.0), [0.0])
    x_pred = HyperInterval([-0.1, -0.1], [0.1, 0.1])
    assert dm_decide(bc, unit_box(2.0), x_pred, [0.5], still, SCHED) == MC


def test_dm_falls_back_to_bc(still, integrator):
    bc = BoxBC(unit_box(1.0), [0.0])
    s = unit_box(2.0)
    inside = HyperInterval([-0.1, -0.1], [0.1, 0.1])
    assert dm_decide(bc, s, inside, None, still, SCHED) == BC
    assert dm_decide(bc, s, inside, [7.0], still, SCHED) == BC
    assert dm_decide(bc, s, inside, [np.nan], still, SCHED) == BC
    assert dm_decide(bc, s, None, [0.0], still, SCHED) == BC
    # x' = u = 5 leaves I = [-1, 1] within tau_c + tau_r = 0.3 s from 0.
    bc1 = BoxBC(unit_box(1.0, 1), [0.0])
    assert dm_decide(bc1, unit_box(3.0, 1), HyperInterval.point([0.0]), [5.0], integrator, SCHED) == BC
    assert dm_decide(bc1, unit_box(3.0, 1), HyperInterval.point([0.0]), [2.0], integrator, SCHED) == MC
    # ... and the tube condition alone rejects it when S is tight.
    assert dm_decide(bc1, unit_box(0.5, 1), HyperInterval.point([0.0]), [2.0], integrator, SCHED) == BC


def test_dm_rejects_wrong_way_maximum_voltage(pendulum, pendulum_synth):
    rc = pendulum_synth.controller
    sc = pendulum_scenario(rc, 10)
    x = np.array([3.04, -0.8])
    box = HyperInterval.point(x)
    assert dm_decide(sc.bc, sc.safe, box, [-4.0], pendulum, sc.sched) == BC


def test_dm_randomized_audit(pendulum, pendulum_synth):
    """Every MC verdict survives a dense simulation over tau_c + tau_r."""
    rc = pendulum_synth.controller
    s = pendulum_safe_set()
    sc = pendulum_scenario(rc, 10)
    rng = np.random.default_rng(7)
    dom = rc.grid.centers(rc.controller.domain_ids)
    n_mc = 0
    for i in range(150):
        x = dom[rng.integers(len(dom))] + rng.uniform(-0.5, 0.5, 2) * rc.grid.eta
        if not rc.in_domain(x):
            continue
        u = rng.uniform(-4, 4, 1)
        if dm_decide(sc.bc, s, HyperInterval.point(x), u, pendulum, SCHED) != MC:
            continue
        n_mc += 1
        _, xs = dense_trajectory(pendulum, x, u, 0.3, 2.5e-4)
        assert np.all(contains_points(s, xs))
        assert rc.in_domain(xs[200]) and rc.in_domain(xs[-1])
    assert n_mc > 10


# --- simulation ---------------------------------------------------------------------

def test_restart_with_still_plant_keeps_state(still):
    sc = with_faults(still_scenario(still), [FaultSpec("ComputerReboot", (20,))])
    trace = run_simulation(sc)
    assert trace.n_restarts == 1
    xs = np.array([r.x for r in trace.records])
    assert np.allclose(xs, [0.2, -0.4], atol=0)


def test_initial_state_must_be_in_region(still):
    sc = still_scenario(still)
    sc.x0 = np.array([1.5, 0.0])
    with pytest.raises(ConfigError):
        run_simulation(sc)


def trace_invariants(trace, sched):
    recs = trace.records
    ts = [r.t for r in recs]
    assert all(b > a for a, b in zip(ts, ts[1:]))
    for i, r in enumerate(recs):
        assert math.isclose(r.t / sched.tau_c, round(r.t / sched.tau_c), abs_tol=1e-6)
        if r.restart:
            nxt = recs[i + 1] if i + 1 < len(recs) else None
            if nxt is not None:
                assert nxt.t - r.t == pytest.approx(sched.tau_r)
                assert nxt.k == 1 and nxt.decision == BC
            # The actuator keeps the previous command through the restart.
            assert np.array_equal(r.u, recs[i - 1].u)
        if r.k == 1 and i > 0:
            assert recs[i - 1].restart


def test_watchdog_completeness_and_latch_discipline(pendulum_synth):
    faults = [FaultSpec("TimingFaultCpu", (30,)), FaultSpec("RtosFreeze", (45,)),
              FaultSpec("TimingFaultResource", (60,)), FaultSpec("NoOutput", (70, 71))]
    trace = run_simulation(with_faults(pendulum_scenario(pendulum_synth.controller, 90), faults))
    trace_invariants(trace, SCHED)
    assert [r.g for r in trace.records if r.restart] == [30, 45, 60]
    missing = [r for r in trace.records if r.decision == NO_DECISION or r.u_bc is None]
    assert all(r.restart for r in missing)
    assert trace.violations == 0
    assert trace.records[70].decision == BC and not trace.records[70].restart


def test_periodic_forced_restarts(pendulum_synth):
    sc = with_faults(pendulum_scenario(pendulum_synth.controller, 200), [FaultSpec("ComputerReboot", period=20)])
    trace = run_simulation(sc)
    assert trace.n_restarts == 10
    assert trace.violations == 0
    trace_invariants(trace, SCHED)
    assert audit_mc_decisions(trace, sc) == []


def test_determinism(pendulum_synth):
    def run():
        sc = with_faults(pendulum_scenario(pendulum_synth.controller, 120),
                         [FaultSpec("TimingFaultCpu", rate=0.05, seed=3), FaultSpec("MaximumVoltage", rate=0.1, seed=4)])
        return run_simulation(sc)

    a, b = run(), run()
    assert a.digest() == b.digest()
    assert a.to_csv() == b.to_csv()


def test_trace_csv_columns(pendulum_synth):
    trace = run_simulation(pendulum_scenario(pendulum_synth.controller, 5))
    head = trace.to_csv().splitlines()[0].split(",")
    assert head == ["t", "g", "k", "x1", "x2", "u1", "decision", "restart", "fault", "safe"]
    assert len(trace.to_csv().splitlines()) == 6


def test_first_decision_after_boot_is_bc(pendulum_synth):
    trace = run_simulation(pendulum_scenario(pendulum_synth.controller, 30))
    assert trace.records[0].decision == BC
    assert trace.records[1].decision == MC


def test_helicopter_closed_loop(heli):
    plant, pair, m, region, _ = heli
    sc = helicopter_scenario(plant, region, 200)
    trace = run_simulation(sc)
    assert trace.violations == 0
    assert trace.decisions()[MC] > 150
    assert audit_mc_decisions(trace, sc) == []
    # Settles near the MC setpoint.
    assert np.allclose(trace.records[-1].x[:2], [0.05, 0.0], atol=0.01)


def test_helicopter_restarts_from_sampled_states(heli):
    plant, pair, m, region, _ = heli
    rng = np.random.default_rng(11)
    starts = sample_region(region.polytope, 5, rng, *HELI_BOX)
    for x0 in starts:
        sc = with_faults(helicopter_scenario(plant, region, 40, x0), [FaultSpec("ComputerReboot", period=8)])
        trace = run_simulation(sc)
        assert trace.violations == 0 and trace.n_restarts == 5


@pytest.mark.slow
def test_zero_fault_pendulum_long_run(pendulum_synth):
    sc = pendulum_scenario(pendulum_synth.controller, 10_000)
    trace = run_simulation(sc)
    assert trace.violations == 0 and trace.n_restarts == 0
    assert all(r.decision == MC for r in trace.records[-100:])
    assert abs(trace.records[-1].x[0] - math.pi) < 0.1
