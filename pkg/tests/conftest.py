import math

import numpy as np
import pytest

from rsimplex.dynamics import LinearSystem, linear_control_system, pendulum_system
from rsimplex.geometry import HyperInterval


def make_linear(a, b, u_max=1.0, op=10.0):
    lin = LinearSystem(a, b)
    n, p = lin.state_dim, lin.input_dim
    return linear_control_system(lin, HyperInterval(-u_max * np.ones(p), u_max * np.ones(p)),
                                 HyperInterval(-op * np.ones(n), op * np.ones(n)))


@pytest.fixture
def still():
    """x' = 0 in two dimensions."""
    return make_linear(np.zeros((2, 2)), np.zeros((2, 1)))


@pytest.fixture
def integrator():
    """Scalar x' = u with |u| <= 5."""
    return make_linear([[0.0]], [[1.0]], u_max=5.0)


@pytest.fixture(scope="session")
def pendulum():
    return pendulum_system()


PI = math.pi


@pytest.fixture(scope="session")
def pendulum_synth(pendulum):
    from rsimplex.dynamics import pendulum_safe_set
    from rsimplex.synthesis import synthesize_grid
    return synthesize_grid(pendulum, pendulum_safe_set(), [0.05, 0.1], 0.05, 0.25)


@pytest.fixture(scope="session")
def heli():
    from rsimplex.dynamics import discretize, load_linear_plant
    from rsimplex.invariant_linear import LinearBcProblem, compute_inv_region
    plant = load_linear_plant()
    pair = discretize(plant.model, plant.tau_c)
    m = round(plant.tau_r / plant.tau_c)
    region = compute_inv_region(plant.adjusted_safe_set, plant.input_set, pair, m)
    return plant, pair, m, region, LinearBcProblem.build(pair, m, plant.input_set, region)


def sample_region(region, n, rng, lower, upper):
    """Rejection-sample n points of an H-polytope from a bounding box."""
    from rsimplex.geometry import contains_points
    out = []
    while sum(len(o) for o in out) < n:
        xs = rng.uniform(lower, upper, size=(20 * n, len(lower)))
        out.append(xs[contains_points(region, xs)])
    return np.concatenate(out)[:n]


HELI_BOX = ([-0.15, -0.5, -1.0, -0.3, -0.1, -1.0], [0.6, 0.5, 1.0, 0.3, 0.1, 1.0])


# Acceptance results, one line per criterion, echoed in the terminal summary.
ACCEPTANCE: dict = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
