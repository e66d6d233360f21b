"""Cycle-accurate simulation of the restart-tolerant Simplex loop.

Cycle k ends at its latch instant t. Within the cycle, in order: the mission
controller (MC) computes a command from the latest sample, the decision
module (DM) checks it against the predicted state at t, the plant evolves to
t - eps where the sensors are sampled, the base controller (BC) computes its
command for the state at t, the plant evolves the final eps, and the
flushing task latches the chosen command at t and kicks the watchdog. A
missing DM or BC output, or a suppressed flush, expires the watchdog at t.

A restart lasts tau_r. The plant runs on the held command throughout; the
rebooted BC samples at t + tau_r - eps and its command is latched at
t + tau_r as cycle k = 1 of the new boot.
"""
from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import EPS_GEOM
from .dynamics import ControlSystem, LinearSystem, dense_trajectory, discretize
from .geometry import HPolytope, HyperInterval, box_in_polytope, contains_points
from .invariant_linear import LinearBcProblem, bc_linear_robust
from .reach import DEFAULT_SEGMENTS, DEFAULT_STEP, OVERFLOW, predict_state, sweep
from .synthesis import NoSafeInput, RefinedController

MC, BC = "MC", "BC"
NO_DECISION = "NONE"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CycleSchedule:
    tau_c: float
    tau_r: float
    epsilon: float | None = None

    def __post_init__(self):
        if self.tau_c <= 0 or self.tau_r <= 0:
            raise ConfigError("tau_c and tau_r must be positive")
        m = self.tau_r / self.tau_c
        if abs(m - round(m)) > 1e-9 or round(m) < 1:
            raise ConfigError("tau_r must be a positive integer multiple of tau_c")
        eps = self.tau_c / 100 if self.epsilon is None else float(self.epsilon)
        if not 0 < eps < self.tau_c:
            raise ConfigError("epsilon must lie in (0, tau_c)")
        object.__setattr__(self, "epsilon", eps)

    @property
    def m(self) -> int:
        return int(round(self.tau_r / self.tau_c))


# --- controllers ------------------------------------------------------------------

class MissionController:
    """Unverified controller; ``None`` means no output this cycle."""

    def reset(self) -> None:
        pass

    def __call__(self, x):
        raise NotImplementedError


@dataclass
class FunctionMC(MissionController):
    fn: Callable[[np.ndarray], np.ndarray]

    def __call__(self, x):
        return np.asarray(self.fn(np.asarray(x, dtype=float)), dtype=float).reshape(-1)


@dataclass
class LinearFeedbackMC(MissionController):
    """u = clip(u_ref - K (x - x_ref)) to the input box."""

    gain: np.ndarray
    x_ref: np.ndarray
    u_ref: np.ndarray
    bounds: HyperInterval

    def __call__(self, x):
        u = self.u_ref - self.gain @ (np.asarray(x, dtype=float) - self.x_ref)
        return np.clip(u, self.bounds.lower, self.bounds.upper)


def lqr_gain(lin: LinearSystem, tau: float, q, r) -> np.ndarray:
    """Discrete-time LQR gain for the zero-order-hold model."""
    from scipy.linalg import solve_discrete_are

    pair = discretize(lin, tau)
    q = np.atleast_2d(np.asarray(q, dtype=float))
    r = np.atleast_2d(np.asarray(r, dtype=float))
    p = solve_discrete_are(pair.a_d, pair.b_d, q, r)
    bt_p = pair.b_d.T @ p
    return np.linalg.solve(r + bt_p @ pair.b_d, bt_p @ pair.a_d)


class BaseController:
    """Verified controller over an invariant region I."""

    def box_in_region(self, box: HyperInterval) -> bool:
        raise NotImplementedError

    def contains(self, x) -> bool:
        raise NotImplementedError

    def choose(self, x_sample, u_held, lead: float) -> np.ndarray:
        """Command for the state ``lead`` seconds after ``x_sample`` (u_held None = unknown)."""
        raise NotImplementedError


class GridBC(BaseController):
    def __init__(self, sys: ControlSystem, rc: RefinedController, h: float = DEFAULT_STEP):
        self.sys = sys
        self.rc = rc
        self.h = h

    def box_in_region(self, box):
        return self.rc.box_in_domain(box)

    def contains(self, x):
        return bool(self.rc.in_domain(x))

    def choose(self, x_sample, u_held, lead):
        x_sample = np.asarray(x_sample, dtype=float)
        if lead <= 0:
            box = HyperInterval.point(x_sample)
        else:
            u = self.sys.input_bounds if u_held is None else u_held
            box = predict_state(self.sys, x_sample, u, lead, h=self.h)
            if box is OVERFLOW:
                box = HyperInterval.point(x_sample)
        return self.rc.inputs[self.rc.choose_index_for_box(box)].copy()


class LinearBC(BaseController):
    """LP base controller; the eps lead is propagated exactly (affine in u)."""

    def __init__(self, model: LinearSystem, problem: LinearBcProblem, input_bounds: HyperInterval,
                 epsilon: float):
        self.problem = problem
        self.region = problem.region.polytope
        self.bounds = input_bounds
        self.lead_pair = discretize(model, epsilon)
        self.epsilon = epsilon

    def box_in_region(self, box):
        return box_in_polytope(box, self.region)

    def contains(self, x):
        return bool(contains_points(self.region, np.asarray(x, dtype=float)))

    def choose(self, x_sample, u_held, lead):
        x_sample = np.asarray(x_sample, dtype=float)
        if lead <= 0:
            pts = x_sample[None]
        else:
            if abs(lead - self.epsilon) > 1e-12:
                raise ValueError("LinearBC was built for a different sampling lead")
            us = self.bounds.vertices() if u_held is None else np.atleast_2d(u_held)
            pts = x_sample @ self.lead_pair.a_d.T + us @ self.lead_pair.b_d.T
        try:
            return bc_linear_robust(self.problem, pts)
        except (ValueError, RuntimeError) as exc:
            raise NoSafeInput(str(exc)) from exc


# --- decision module ----------------------------------------------------------------

def dm_decide(bc: BaseController, s: HPolytope, x_pred, u_mc, sys: ControlSystem,
              sched: CycleSchedule, n_seg: int = DEFAULT_SEGMENTS, h: float = DEFAULT_STEP) -> str:
    """MC iff the reach sets at tau_c and tau_c + tau_r lie in I and the tube lies in S."""
    if x_pred is OVERFLOW or x_pred is None or u_mc is None:
        return BC
    u_mc = np.asarray(u_mc, dtype=float).reshape(-1)
    if u_mc.shape != (sys.input_dim,) or not np.all(np.isfinite(u_mc)):
        return BC
    if not sys.input_bounds.contains(u_mc):
        return BC
    n_samples = n_seg * (sched.m + 1)
    sw = sweep(sys, x_pred.lower, x_pred.upper, u_mc, sched.tau_c + sched.tau_r, n_samples, h)
    if sw.overflow[0]:
        return BC
    for i in (n_seg, n_samples):
        if not bc.box_in_region(HyperInterval(sw.lower[i, 0], sw.upper[i, 0])):
            return BC
    sc = s.canonical()
    c = 0.5 * (sw.seg_lower[:, 0] + sw.seg_upper[:, 0])
    r = 0.5 * (sw.seg_upper[:, 0] - sw.seg_lower[:, 0])
    if np.any(c @ sc.a_mat.T + r @ np.abs(sc.a_mat).T > sc.b_vec + EPS_GEOM):
        return BC
    return MC


# --- fault hooks ----------------------------------------------------------------------

@dataclass
class CycleContext:
    """What a fault hook may look at when overriding the MC output."""

    system: ControlSystem
    safe: HPolytope
    sched: CycleSchedule
    mc: MissionController
    x_sample: np.ndarray
    x_sample_old: np.ndarray | None


@dataclass
class CycleHooks:
    suppress_mc: bool = False
    suppress_dm: bool = False
    suppress_bc: bool = False
    suppress_flush: bool = False
    mc_transform: Callable | None = None
    labels: tuple = ()

    def merge(self, other: "CycleHooks") -> "CycleHooks":
        transforms = [t for t in (self.mc_transform, other.mc_transform) if t is not None]

        def chain(u, ctx):
            for t in transforms:
                u = t(u, ctx)
            return u

        return CycleHooks(
            self.suppress_mc or other.suppress_mc,
            self.suppress_dm or other.suppress_dm,
            self.suppress_bc or other.suppress_bc,
            self.suppress_flush or other.suppress_flush,
            chain if transforms else None,
            self.labels + other.labels,
        )


NO_HOOKS = CycleHooks()


# --- simulation ----------------------------------------------------------------------

@dataclass
class ActuatorLatch:
    """Last latched command; changes only at latch instants and holds through restarts."""

    u: np.ndarray
    t: float = 0.0

    def set(self, u, t: float) -> None:
        self.u = np.asarray(u, dtype=float).copy()
        self.t = t


@dataclass(frozen=True)
class DecisionRecord:
    k: int
    u_mc: np.ndarray | None
    u_bc: np.ndarray | None
    dm_choice: str
    timestamp_valid: bool

@dataclass
class CycleRecord:
    t: float
    g: int
    k: int
    x: np.ndarray
    x_sample: np.ndarray
    u: np.ndarray
    u_mc: np.ndarray | None
    u_bc: np.ndarray | None
    decision: str
    restart: bool
    faults: tuple
    safe: bool
    x_pred: HyperInterval | None = None

    def decision_record(self) -> DecisionRecord:
        return DecisionRecord(self.k, self.u_mc, self.u_bc, self.decision, not self.restart)


@dataclass
class Scenario:
    system: ControlSystem
    safe: HPolytope
    bc: BaseController
    mc: MissionController
    sched: CycleSchedule
    x0: np.ndarray
    n_cycles: int
    hooks_for: Callable[[int, int], CycleHooks] | None = None
    seed: int = 0
    name: str = "scenario"
    plant_step: float = DEFAULT_STEP
    reach_step: float = DEFAULT_STEP
    n_seg: int = DEFAULT_SEGMENTS


@dataclass
class SimTrace:
    scenario: str
    state_dim: int
    input_dim: int
    records: list = field(default_factory=list)
    seed: int = 0

    @property
    def restart_times(self) -> list:
        return [r.t for r in self.records if r.restart]

    @property
    def n_restarts(self) -> int:
        return sum(r.restart for r in self.records)

    @property
    def violations(self) -> int:
        return sum(not r.safe for r in self.records)

    def decisions(self) -> dict:
        out = {MC: 0, BC: 0, NO_DECISION: 0}
        for r in self.records:
            out[r.decision] += 1
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n, p = self.state_dim, self.input_dim
        w.writerow(["t", "g", "k"] + [f"x{i + 1}" for i in range(n)] + [f"u{i + 1}" for i in range(p)]
                   + ["decision", "restart", "fault", "safe"])
        for r in self.records:
            w.writerow([repr(r.t), r.g, r.k] + [repr(float(v)) for v in r.x] + [repr(float(v)) for v in r.u]
                       + [r.decision, int(r.restart), "+".join(r.faults), int(r.safe)])
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_csv().encode()).hexdigest()


class _Plant:
    def __init__(self, sc: Scenario, x0):
        self.sys = sc.system
        self.safe = sc.safe
        self.h = sc.plant_step
        self.x = np.asarray(x0, dtype=float).copy()

    def evolve(self, u, duration: float) -> bool:
        """Advance under held ``u``; True when every mesh state stayed in S."""
        if duration <= 0:
            return True
        _, xs = dense_trajectory(self.sys, self.x, u, duration, self.h)
        self.x = xs[-1].copy()
        return bool(np.all(contains_points(self.safe, xs)))


def _validate(sc: Scenario):
    x0 = np.asarray(sc.x0, dtype=float)
    if x0.shape != (sc.system.state_dim,):
        raise ConfigError(f"x0 must have {sc.system.state_dim} components")
    if sc.n_cycles < 1:
        raise ConfigError("n_cycles must be >= 1")
    if not sc.bc.contains(x0):
        raise ConfigError(f"initial state {x0.tolist()} is outside the BC region")


def run_simulation(sc: Scenario) -> SimTrace:
    """Deterministic trace of ``n_cycles`` latch instants (restarts included)."""
    _validate(sc)
    sched, sys = sc.sched, sc.system
    eps = sched.epsilon
    hooks_for = sc.hooks_for or (lambda g, k: NO_HOOKS)
    trace = SimTrace(sc.name, sys.state_dim, sys.input_dim, seed=sc.seed)
    plant = _Plant(sc, sc.x0)
    sc.mc.reset()

    def boot_command(x_s, u_held, lead):
        try:
            return sc.bc.choose(x_s, u_held, lead)
        except NoSafeInput:
            return None

    # Start as a completed boot: the BC latches for the exact initial state.
    t = 0.0
    u0 = boot_command(plant.x, None, 0.0)
    if u0 is None:
        raise ConfigError("BC has no command for the initial state")
    latch = ActuatorLatch(u0, t)
    trace.records.append(CycleRecord(t, 1, 1, plant.x.copy(), plant.x.copy(), latch.u.copy(), None,
                                     latch.u.copy(), BC, False, (), True))
    known, prev_known = latch.u.copy(), None
    x_s_prev, lead_prev, x_s_old = plant.x.copy(), 0.0, None
    g, k = 2, 2
    while g <= sc.n_cycles:
        hooks = hooks_for(g, k)
        # MC
        u_mc = None
        if not hooks.suppress_mc:
            u_mc = sc.mc(x_s_prev)
        if hooks.mc_transform is not None:
            ctx = CycleContext(sys, sc.safe, sched, sc.mc, x_s_prev, x_s_old)
            u_mc = hooks.mc_transform(u_mc, ctx)
        # DM
        x_pred = None
        if hooks.suppress_dm:
            decision = NO_DECISION
        elif k == 1:
            decision = BC
        else:
            x_pred = predict_state(sys, x_s_prev, known, sched.tau_c, lead=lead_prev,
                                   u_lead=prev_known, h=sc.reach_step)
            decision = dm_decide(sc.bc, sc.safe, x_pred, u_mc, sys, sched, sc.n_seg, sc.reach_step)
        # Plant to the sampling instant, BC, final eps.
        safe = plant.evolve(latch.u, sched.tau_c - eps)
        x_s = plant.x.copy()
        u_bc = None if hooks.suppress_bc else boot_command(x_s, known, eps)
        safe &= plant.evolve(latch.u, eps)
        t = _advance(t, sched.tau_c)
        flush = not hooks.suppress_flush and decision != NO_DECISION and u_bc is not None
        if flush:
            new = u_mc if decision == MC else u_bc
            latch.set(new, t)
            prev_known, known = known, latch.u.copy()
            trace.records.append(CycleRecord(t, g, k, plant.x.copy(), x_s, latch.u.copy(), _copy(u_mc),
                                             _copy(u_bc), decision, False, hooks.labels, safe, x_pred))
            x_s_old, x_s_prev, lead_prev = x_s_prev, x_s, eps
            g, k = g + 1, k + 1
            continue
        # Watchdog expiry at t: restart with the actuator holding ``latch``.
        trace.records.append(CycleRecord(t, g, k, plant.x.copy(), x_s, latch.u.copy(), _copy(u_mc),
                                         _copy(u_bc), decision, True, hooks.labels, safe, x_pred))
        g += 1
        while True:
            sc.mc.reset()
            safe = plant.evolve(latch.u, sched.tau_r - eps)
            x_s = plant.x.copy()
            u_boot = boot_command(x_s, None, eps)
            safe &= plant.evolve(latch.u, eps)
            t = _advance(t, sched.tau_r)
            if u_boot is not None or g > sc.n_cycles:
                break
            trace.records.append(CycleRecord(t, g, 1, plant.x.copy(), x_s, latch.u.copy(), None, None,
                                             NO_DECISION, True, ("bc_no_input",), safe))
            g += 1
        if u_boot is None:
            break
        latch.set(u_boot, t)
        known, prev_known = latch.u.copy(), None
        trace.records.append(CycleRecord(t, g, 1, plant.x.copy(), x_s, latch.u.copy(), None, latch.u.copy(),
                                         BC, False, (), safe))
        x_s_old, x_s_prev, lead_prev = None, x_s, eps
        g, k = g + 1, 2
    return trace


def _advance(t: float, dt: float) -> float:
    # Snap to the tau grid to keep latch times exact multiples in the trace.
    return float(round((t + dt) * 1e9) / 1e9)


def _copy(u):
    return None if u is None else np.asarray(u, dtype=float).copy()


def audit_mc_decisions(trace: SimTrace, sc: Scenario, h: float = 2.5e-4) -> list:
    """Re-simulate every MC choice from the true latched state; return failing cycle indices.

    Checks the dense trajectory in S over tau_c + tau_r and both endpoints in I.
    """
    bad = []
    prev = None
    sched = sc.sched
    for rec in trace.records:
        if rec.decision == MC and prev is not None:
            x_latch = prev.x
            ts, xs = dense_trajectory(sc.system, x_latch, rec.u, sched.tau_c + sched.tau_r, h)
            i_c = int(round(sched.tau_c / h))
            ok = bool(np.all(contains_points(sc.safe, xs)))
            ok &= sc.bc.contains(xs[i_c]) and sc.bc.contains(xs[-1])
            if not ok:
                bad.append(rec.g)
        prev = rec
    return bad
