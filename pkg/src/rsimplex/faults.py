"""Declarative fault injection and fault campaigns.

Application faults corrupt the mission controller only. System faults stop
the BC or the flushing task, so the watchdog restarts the system. System
faults are never activated within tau_r of a boot: with tau_r = m tau_c,
that rules out boot cycles k < m + 2.
"""
from __future__ import annotations

import csv
import io
import multiprocessing
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .dynamics import dense_trajectory
from .runtime import (BC, MC, ConfigError, CycleHooks, NO_HOOKS, Scenario, SimTrace,
                      run_simulation)

APPLICATION_FAULTS = ("NoOutput", "MaximumVoltage", "TimeDegradedControl")
SYSTEM_FAULTS = ("TimingFaultCpu", "TimingFaultResource", "RtosFreeze", "ComputerReboot")
FAULT_KINDS = APPLICATION_FAULTS + SYSTEM_FAULTS
WORKERS_ENV = "RSIMPLEX_WORKERS"


@dataclass(frozen=True)
class FaultSpec:
    """One fault source.

    Activation is any union of explicit ``cycles``, every ``period``-th cycle,
    and independent draws with probability ``rate`` per cycle from a
    generator seeded with ``seed``. Cycle numbers are global trace indices g.
    """

    kind: str
    cycles: tuple = ()
    period: int | None = None
    rate: float | None = None
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise ConfigError(f"unknown fault kind {self.kind!r}")
        object.__setattr__(self, "cycles", tuple(int(c) for c in self.cycles))
        if any(c < 2 for c in self.cycles):
            raise ConfigError("fault cycles start at 2 (cycle 1 is the boot cycle)")
        if self.period is not None and self.period < 1:
            raise ConfigError("period must be >= 1")
        if self.rate is not None and not 0 <= self.rate <= 1:
            raise ConfigError("rate must lie in [0, 1]")
        gain = self.params.get("gain", 0.5)
        if self.kind == "TimeDegradedControl" and not 0 < gain < 1:
            raise ConfigError("TimeDegradedControl gain must lie in (0, 1)")

    @property
    def is_system(self) -> bool:
        return self.kind in SYSTEM_FAULTS


@dataclass(frozen=True)
class FaultOutcome:
    expected_restart: bool
    expected_safety: bool = True


def expected_outcome(kind: str) -> FaultOutcome:
    return FaultOutcome(kind in SYSTEM_FAULTS)


# --- per-cycle effects -------------------------------------------------------------

def _max_voltage(u, ctx):
    """Input-box vertex that leaves the least S slack after one period."""
    verts = ctx.system.input_bounds.vertices()
    s = ctx.safe.canonical()
    best, best_slack = verts[0], np.inf
    for v in verts:
        _, xs = dense_trajectory(ctx.system, ctx.x_sample, v, ctx.sched.tau_c, ctx.sched.tau_c / 10)
        slack = np.min(s.b_vec - xs @ s.a_mat.T)
        if slack < best_slack:
            best, best_slack = v, slack
    return best.copy()


def _degraded(gain):
    def transform(u, ctx):
        x = ctx.x_sample if ctx.x_sample_old is None else ctx.x_sample_old
        stale = ctx.mc(x)
        return None if stale is None else gain * np.asarray(stale, dtype=float)
    return transform


def apply_fault(spec: FaultSpec) -> CycleHooks:
    """Stage suppressions and MC overrides for one active cycle of ``spec``."""
    label = (spec.kind,)
    kind = spec.kind
    if kind == "NoOutput":
        return CycleHooks(suppress_mc=True, labels=label)
    if kind == "MaximumVoltage":
        return CycleHooks(mc_transform=_max_voltage, labels=label)
    if kind == "TimeDegradedControl":
        return CycleHooks(mc_transform=_degraded(spec.params.get("gain", 0.5)), labels=label)
    if kind == "TimingFaultCpu":
        return CycleHooks(suppress_bc=True, labels=label)
    if kind == "TimingFaultResource":
        return CycleHooks(suppress_flush=True, labels=label)
    if kind == "RtosFreeze":
        return CycleHooks(True, True, True, True, labels=label)
    # ComputerReboot: the tasks of the cycle are lost before the flush.
    return CycleHooks(suppress_bc=True, suppress_flush=True, labels=label)


def system_fault_allowed(k: int, m: int) -> bool:
    """True once the first tau_r = m cycles after the boot latch have passed."""
    return k >= m + 2


def validate_faults(specs, n_cycles: int, m: int) -> None:
    """Reject explicit or periodic system faults inside a protected window.

    Restarts are predicted from the system faults themselves (each one
    restarts exactly once); stochastic activations are filtered at run time.
    """
    planned = {}
    for spec in specs:
        if spec.is_system and spec.period is not None and spec.period < m + 1:
            raise ConfigError(f"{spec.kind}: period {spec.period} leaves no room for a boot window")
        for g in range(2, n_cycles + 1):
            if g in spec.cycles or (spec.period is not None and g % spec.period == 0):
                planned.setdefault(g, []).append(spec)
    k = 2
    for g in range(2, n_cycles + 1):
        active = planned.get(g, [])
        system = [s for s in active if s.is_system]
        if system and not system_fault_allowed(k, m):
            raise ConfigError(f"{system[0].kind} at cycle {g} falls within tau_r of a boot")
        k = 1 if system else k + 1


class FaultInjector:
    """``hooks_for(g, k)`` callable for run_simulation."""

    def __init__(self, specs, m: int):
        self.specs = list(specs)
        self.m = m
        self.rngs = [np.random.default_rng(s.seed) for s in self.specs]
        self.log = []

    def __call__(self, g: int, k: int) -> CycleHooks:
        hooks = NO_HOOKS
        for spec, rng in zip(self.specs, self.rngs):
            hit = g in spec.cycles or (spec.period is not None and g % spec.period == 0)
            if spec.rate is not None:
                hit |= bool(rng.random() < spec.rate)
            if hit and spec.is_system and not system_fault_allowed(k, self.m):
                hit = False
            if hit:
                hooks = hooks.merge(apply_fault(spec))
                self.log.append((g, k, spec.kind))
        return hooks


def with_faults(sc: Scenario, specs) -> Scenario:
    specs = list(specs)
    validate_faults(specs, sc.n_cycles, sc.sched.m)
    return replace(sc, hooks_for=FaultInjector(specs, sc.sched.m))


# --- campaigns ----------------------------------------------------------------------

def standard_faults(start: int = 40, window: int = 20, gain: float = 0.5) -> list:
    """One FaultSpec per fault kind: application faults span a window, system faults hit once."""
    span = tuple(range(start, start + window))
    out = [FaultSpec("NoOutput", span), FaultSpec("MaximumVoltage", span),
           FaultSpec("TimeDegradedControl", span, params={"gain": gain})]
    out += [FaultSpec(kind, (start,)) for kind in SYSTEM_FAULTS]
    return out


@dataclass(frozen=True)
class CampaignRow:
    plant: str
    fault: str
    trial: int
    expected_restart: bool
    restarts: int
    violations: int
    bc_cycles: int
    mc_cycles: int
    recovery_cycles: float | None
    digest: str

    @property
    def observed_restart(self) -> bool:
        return self.restarts > 0

    @property
    def conforms(self) -> bool:
        return self.observed_restart == self.expected_restart and self.violations == 0


def recovery_cycles(trace: SimTrace) -> float | None:
    """Mean number of cycles from a fault activation to the next MC decision."""
    out = []
    recs = trace.records
    for i, r in enumerate(recs):
        if r.faults and (i == 0 or not recs[i - 1].faults):
            for j in range(i + 1, len(recs)):
                if recs[j].decision == MC and not recs[j].faults:
                    out.append(recs[j].g - r.g)
                    break
    return statistics.fmean(out) if out else None


def _run_one(job) -> CampaignRow:
    plant, sc, spec, trial = job
    specs = [] if spec is None else [_shift(spec, trial)]
    trace = run_simulation(with_faults(sc, specs))
    dec = trace.decisions()
    kind = "None" if spec is None else spec.kind
    return CampaignRow(plant, kind, trial, expected_outcome(kind).expected_restart if spec else False,
                       trace.n_restarts, trace.violations, dec[BC], dec[MC],
                       recovery_cycles(trace), trace.digest())


def _shift(spec: FaultSpec, trial: int) -> FaultSpec:
    if trial == 0:
        return spec
    return replace(spec, cycles=tuple(c + trial for c in spec.cycles), seed=spec.seed + trial)


_JOBS: list = []


def _run_index(i: int) -> CampaignRow:
    return _run_one(_JOBS[i])


def worker_count(default: int = 1) -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None:
        return default
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be >= 1")
    return n


def run_campaign(scenarios: dict, faults, trials: int = 1, workers: int | None = None,
                 baseline: bool = True, progress: Callable | None = None) -> "CampaignReport":
    """Run every (plant, fault, trial) triple; scenarios map a plant name to a Scenario.

    Parallel runs fork worker processes; results come back in job order, so
    the report does not depend on the worker count.
    """
    global _JOBS
    faults = list(faults)
    specs = ([None] if baseline else []) + faults
    jobs = [(name, sc, spec, t) for name, sc in scenarios.items() for spec in specs for t in range(trials)]
    for name, sc, spec, t in jobs:
        validate_faults([] if spec is None else [_shift(spec, t)], sc.n_cycles, sc.sched.m)
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(jobs) <= 1:
        rows = []
        for job in jobs:
            rows.append(_run_one(job))
            if progress:
                progress(rows[-1])
    else:
        _JOBS = jobs
        try:
            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(min(workers, len(jobs)), mp_context=ctx) as pool:
                rows = list(pool.map(_run_index, range(len(jobs))))
        finally:
            _JOBS = []
        if progress:
            for r in rows:
                progress(r)
    return CampaignReport(rows)


@dataclass
class CampaignReport:
    rows: list

    @property
    def total_violations(self) -> int:
        return sum(r.violations for r in self.rows)

    @property
    def conforms(self) -> bool:
        return all(r.conforms for r in self.rows)

    def restart_column(self, plant: str) -> dict:
        """Fault kind -> observed restart (any trial) for one plant."""
        out = {}
        for r in self.rows:
            if r.plant == plant and r.fault != "None":
                out[r.fault] = out.get(r.fault, False) or r.observed_restart
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["plant", "fault", "trial", "expected_restart", "restarts", "violations",
                    "bc_cycles", "mc_cycles", "recovery_cycles", "trace_sha256"])
        for r in self.rows:
            rec = "" if r.recovery_cycles is None else f"{r.recovery_cycles:.3f}"
            w.writerow([r.plant, r.fault, r.trial, int(r.expected_restart), r.restarts, r.violations,
                        r.bc_cycles, r.mc_cycles, rec, r.digest])
        return buf.getvalue()

    def table(self) -> str:
        """Summary table: one line per fault kind and plant."""
        plants = list(dict.fromkeys(r.plant for r in self.rows))
        head = f"{'Failure type':<22}{'Class':<13}{'Expected':<10}" + "".join(
            f"{p + ' restarted':<22}{'violations':<12}" for p in plants)
        lines = [head, "-" * len(head)]
        kinds = list(dict.fromkeys(r.fault for r in self.rows))
        for kind in kinds:
            cls = "baseline" if kind == "None" else ("system" if kind in SYSTEM_FAULTS else "application")
            exp = "No" if kind == "None" else ("Yes" if kind in SYSTEM_FAULTS else "No")
            line = f"{kind:<22}{cls:<13}{exp:<10}"
            for p in plants:
                rows = [r for r in self.rows if r.plant == p and r.fault == kind]
                seen = "Yes" if any(r.observed_restart for r in rows) else "No"
                line += f"{seen + ' (' + str(sum(r.restarts for r in rows)) + ')':<22}"
                line += f"{sum(r.violations for r in rows):<12}"
            lines.append(line)
        return "\n".join(lines) + "\n"
