"""Ready-made simulation scenarios for the two shipped plants."""
from __future__ import annotations

import numpy as np

from .dynamics import LinearPlant, pendulum_mc, pendulum_safe_set, pendulum_system
from .invariant_linear import InvariantRegion, LinearBcProblem
from .runtime import (CycleSchedule, FunctionMC, GridBC, LinearBC, LinearFeedbackMC, Scenario,
                      lqr_gain)
from .synthesis import RefinedController

PENDULUM_X0 = (3.04, -0.8)
# Start state of the helicopter trajectory figure (elevation low, rising pitch rate).
HELICOPTER_X0 = (-0.1410, 0.0, 0.0, -0.0281, 0.0513, 0.0)
HELICOPTER_SETPOINT = (0.05, 0.0, 0.3, 0.0, 0.0, 0.0)
# Heavy pitch-rate weight: the adjusted safe set allows only |pitch rate| <= 0.0825.
HELICOPTER_Q = (5.0, 20.0, 0.5, 1.0, 1000.0, 5.0)
HELICOPTER_R = 50.0


def pendulum_scenario(rc: RefinedController, n_cycles: int, x0=PENDULUM_X0, *,
                      epsilon=None, name: str = "pendulum", **kw) -> Scenario:
    sys = pendulum_system()
    sched = CycleSchedule(float(rc.meta.get("tau_c", 0.05)), float(rc.meta.get("tau_r", 0.25)), epsilon)
    return Scenario(sys, pendulum_safe_set(), GridBC(sys, rc), FunctionMC(pendulum_mc), sched,
                    np.asarray(x0, dtype=float), n_cycles, name=name, **kw)


def helicopter_mc(plant: LinearPlant, setpoint=HELICOPTER_SETPOINT) -> LinearFeedbackMC:
    gain = lqr_gain(plant.model, plant.tau_c, np.diag(HELICOPTER_Q), HELICOPTER_R * np.eye(plant.model.input_dim))
    return LinearFeedbackMC(gain, np.asarray(setpoint, dtype=float), np.zeros(plant.model.input_dim),
                            plant.input_bounds)


def helicopter_scenario(plant: LinearPlant, region: InvariantRegion, n_cycles: int, x0=HELICOPTER_X0, *,
                        epsilon=None, name: str = "helicopter", **kw) -> Scenario:
    from .dynamics import discretize

    sched = CycleSchedule(plant.tau_c, plant.tau_r, epsilon)
    pair = discretize(plant.model, plant.tau_c)
    problem = LinearBcProblem.build(pair, sched.m, plant.input_set, region)
    bc = LinearBC(plant.model, problem, plant.input_bounds, sched.epsilon)
    return Scenario(plant.control_system(), plant.safe_set, bc, helicopter_mc(plant), sched,
                    np.asarray(x0, dtype=float), n_cycles, name=name, **kw)
