import pytest

from rsimplex.faults import (APPLICATION_FAULTS, FAULT_KINDS, SYSTEM_FAULTS, FaultInjector, FaultSpec,
                             apply_fault, expected_outcome, run_campaign, system_fault_allowed,
                             standard_faults, validate_faults, with_faults, worker_count)
from rsimplex.runtime import BC, MC, ConfigError, run_simulation
from rsimplex.scenarios import pendulum_scenario

# Whether each fault kind is expected to force a restart.
EXPECTED_RESTART = {"NoOutput": False, "MaximumVoltage": False, "TimeDegradedControl": False,
          "TimingFaultCpu": True, "TimingFaultResource": True, "RtosFreeze": True, "ComputerReboot": True}


def test_expected_outcomes_match_table():
    assert list(EXPECTED_RESTART) == list(FAULT_KINDS)
    for kind, restart in EXPECTED_RESTART.items():
        out = expected_outcome(kind)
        assert out.expected_restart is restart and out.expected_safety


@pytest.mark.parametrize("kwargs", [dict(kind="Meteor"), dict(kind="NoOutput", cycles=(1,)),
                                    dict(kind="NoOutput", rate=1.5), dict(kind="ComputerReboot", period=0),
                                    dict(kind="TimeDegradedControl", params={"gain": 1.2})])
def test_fault_spec_validation(kwargs):
    with pytest.raises(ConfigError):
        FaultSpec(**kwargs)


def test_apply_fault_effects():
    h = {k: apply_fault(FaultSpec(k)) for k in FAULT_KINDS}
    assert h["NoOutput"].suppress_mc and not h["NoOutput"].suppress_flush
    assert h["MaximumVoltage"].mc_transform is not None
    assert h["TimeDegradedControl"].mc_transform is not None
    assert h["TimingFaultCpu"].suppress_bc and not h["TimingFaultCpu"].suppress_flush
    assert h["TimingFaultResource"].suppress_flush and not h["TimingFaultResource"].suppress_bc
    r = h["RtosFreeze"]
    assert r.suppress_mc and r.suppress_dm and r.suppress_bc and r.suppress_flush
    assert h["ComputerReboot"].suppress_bc and h["ComputerReboot"].suppress_flush
    for kind in APPLICATION_FAULTS:
        assert not (h[kind].suppress_bc or h[kind].suppress_flush or h[kind].suppress_dm)


def test_protected_window():
    m = 5
    assert not system_fault_allowed(6, m) and system_fault_allowed(7, m)
    validate_faults([FaultSpec("RtosFreeze", (7,))], 50, m)
    with pytest.raises(ConfigError):
        validate_faults([FaultSpec("RtosFreeze", (6,))], 50, m)
    # After a restart at 20, cycle 21 is the boot and 22..26 are protected.
    validate_faults([FaultSpec("RtosFreeze", (20, 27))], 50, m)
    with pytest.raises(ConfigError):
        validate_faults([FaultSpec("RtosFreeze", (20,)), FaultSpec("TimingFaultCpu", (26,))], 50, m)
    with pytest.raises(ConfigError):
        validate_faults([FaultSpec("ComputerReboot", period=5)], 50, m)
    # Application faults are never restricted.
    validate_faults([FaultSpec("NoOutput", (2, 3))], 50, m)


def test_stochastic_faults_respect_boot_window(pendulum_synth):
    sc = with_faults(pendulum_scenario(pendulum_synth.controller, 80), [FaultSpec("TimingFaultCpu", rate=1.0)])
    trace = run_simulation(sc)
    fired = [r.g for r in trace.records if r.restart]
    # First allowed at g = 7, then every m + 2 = 7 cycles.
    assert fired == list(range(7, 81, 7))
    assert all(r.k >= 7 for r in trace.records if r.restart)
    assert trace.violations == 0
    # Every boot executes the BC once.
    boots = [r for r in trace.records if r.k == 1]
    assert len(boots) == len(fired) + 1 - (fired[-1] == 80) and all(r.decision == BC for r in boots)


def test_injector_log_is_reproducible():
    specs = [FaultSpec("NoOutput", rate=0.3, seed=5)]
    a, b = FaultInjector(specs, 5), FaultInjector(specs, 5)
    for g in range(2, 60):
        a(g, g), b(g, g)
    assert a.log == b.log and 0 < len(a.log) < 58


def test_maximum_voltage_is_caught_by_dm(pendulum_synth):
    sc = with_faults(pendulum_scenario(pendulum_synth.controller, 70), [FaultSpec("MaximumVoltage", range(30, 50))])
    trace = run_simulation(sc)
    window = [r for r in trace.records if r.faults]
    assert len(window) == 20
    assert all(r.decision == BC for r in window)
    assert all(abs(r.u_mc[0]) == 4.0 for r in window)
    assert trace.n_restarts == 0 and trace.violations == 0


def test_timing_fault_resource_recovers(pendulum_synth):
    sc = with_faults(pendulum_scenario(pendulum_synth.controller, 70), [FaultSpec("TimingFaultResource", (30,))])
    trace = run_simulation(sc)
    assert trace.n_restarts == 1 and trace.violations == 0
    assert trace.records[-1].decision == MC


def test_rtos_freeze_restarts_at_cycle_boundary(pendulum_synth):
    sc = with_faults(pendulum_scenario(pendulum_synth.controller, 70), [FaultSpec("RtosFreeze", (50,))])
    trace = run_simulation(sc)
    rec = next(r for r in trace.records if r.restart)
    assert rec.g == 50 and rec.decision == "NONE"
    assert rec.t == pytest.approx(49 * 0.05)
    nxt = trace.records[trace.records.index(rec) + 1]
    assert nxt.k == 1 and nxt.decision == BC and nxt.t == pytest.approx(rec.t + 0.25)


def test_time_degraded_control_is_scaled_and_stale(pendulum_synth):
    rc = pendulum_synth.controller
    sc = with_faults(pendulum_scenario(rc, 40, x0=(3.0, 0.3)), [FaultSpec("TimeDegradedControl", (20,), params={"gain": 0.5})])
    trace = run_simulation(sc)
    rec = trace.records[19]
    assert rec.g == 20
    stale = trace.records[17].x_sample
    assert rec.u_mc[0] == pytest.approx(0.5 * sc.mc(stale)[0])
    assert trace.n_restarts == 0 and trace.violations == 0


def test_campaign_baseline_and_report(pendulum_synth):
    sc = pendulum_scenario(pendulum_synth.controller, 30)
    rep = run_campaign({"pendulum": sc}, [], workers=1)
    assert len(rep.rows) == 1 and rep.rows[0].fault == "None" and rep.rows[0].restarts == 0
    csv_head = rep.to_csv().splitlines()[0]
    assert csv_head.startswith("plant,fault,trial,expected_restart,restarts,violations")
    assert "None" in rep.table()


def test_campaign_parallel_matches_serial(pendulum_synth):
    sc = pendulum_scenario(pendulum_synth.controller, 30)
    faults = [FaultSpec("NoOutput", (10, 11)), FaultSpec("RtosFreeze", (12,))]
    a = run_campaign({"p": sc}, faults, trials=2, workers=1)
    b = run_campaign({"p": sc}, faults, trials=2, workers=2)
    assert a.to_csv() == b.to_csv()
    assert a.restart_column("p") == {"NoOutput": False, "RtosFreeze": True}


def test_standard_fault_set():
    specs = standard_faults()
    assert [s.kind for s in specs] == list(FAULT_KINDS)
    assert all(len(s.cycles) == 1 for s in specs if s.kind in SYSTEM_FAULTS)


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("RSIMPLEX_WORKERS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("RSIMPLEX_WORKERS", "zero")
    with pytest.raises(ConfigError):
        worker_count()
    monkeypatch.delenv("RSIMPLEX_WORKERS")
    assert worker_count(2) == 2
