import math

import numpy as np
import pytest
from scipy.linalg import expm

from rsimplex import dynamics as d
from rsimplex.dynamics import LinearSystem

from conftest import make_linear


def test_integrate_trivial(still, integrator):
    assert np.allclose(d.integrate(still, [0.3, -2.0], [0.0], 1.0, 0.01), [0.3, -2.0])
    assert math.isclose(d.integrate(integrator, [0.0], [3.0], 0.05, 0.001)[0], 0.15, abs_tol=1e-12)


def test_dense_trajectory_mesh(still):
    ts, xs = d.dense_trajectory(still, [1.0, 2.0], [0.0], 0.3, 0.07)
    assert len(ts) == math.ceil(0.3 / 0.07) + 1
    assert ts[0] == 0.0 and ts[-1] == 0.3
    assert np.all(xs == [1.0, 2.0])
    ts, _ = d.dense_trajectory(still, [1.0, 2.0], [0.0], 0.05, 0.001)
    assert len(ts) == 51


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_integration_divergence_reports_time():
    blowup = d.ControlSystem(1, 1, d.HyperInterval([-1], [1]), lambda x, u: x * 1e300)
    with pytest.raises(d.IntegrationDiverged) as exc:
        d.integrate(blowup, [1e100], [0.0], 1.0, 0.1)
    assert 0 < exc.value.t <= 1.0


def test_pendulum_field_examples(pendulum):
    f = pendulum.vector_field
    assert np.allclose(f(np.array([math.pi, 0.0]), np.array([0.0])), [0.0, -2 * 0.0125 * math.pi], atol=1e-15)
    assert np.allclose(f(np.array([0.0, 0.0]), np.array([0.0])), [0.0, 0.0])
    with pytest.raises(ValueError):
        d.integrate(pendulum, [math.pi, 0.0], [5.0], 0.05, 0.001)


def test_pendulum_mc_examples():
    assert d.pendulum_mc([math.pi, 0.0])[0] == pytest.approx(0.0)
    assert d.pendulum_mc([math.pi - 1, 0.0])[0] == pytest.approx(2.0)
    assert d.pendulum_mc([0.0, 0.0])[0] == 4.0


def test_rk4_fourth_order(pendulum):
    x0, u, tau = [3.0, 0.4], [1.5], 1.0
    ref = d.integrate(pendulum, x0, u, tau, 1e-4)
    errs = [np.linalg.norm(d.integrate(pendulum, x0, u, tau, h) - ref) for h in (0.1, 0.05)]
    assert 12.0 < errs[0] / errs[1] < 20.0


def test_mc_closed_loop_converges(pendulum):
    # The -2*gamma*x1 term biases the closed-loop rest point slightly below pi.
    from scipy.optimize import brentq
    rest = brentq(lambda a: math.sin(a) + math.cos(a) * 2 * (math.pi - a) + 2 * 0.0125 * a, 2.9, math.pi)
    x = np.array([3.0, 0.0])
    for _ in range(400):
        x = d.integrate(pendulum, x, d.pendulum_mc(x), 0.05, 0.001)
    assert np.linalg.norm(x - [rest, 0.0]) < 1e-3
    assert abs(x[0] - math.pi) < abs(3.0 - math.pi)


def test_discretize_zero_matrix():
    b = np.array([[1.0], [2.0]])
    pair = d.discretize(LinearSystem(np.zeros((2, 2)), b), 0.05)
    assert np.allclose(pair.a_d, np.eye(2)) and np.allclose(pair.b_d, 0.05 * b)


def test_discretize_scalar_exponential():
    for a in (-3.0, 0.7, 25.0):
        pair = d.discretize(LinearSystem([[a]], [[1.0]]), 0.05, 20)
        assert abs(pair.a_d[0, 0] - math.exp(a * 0.05)) < 1e-9 * max(1, math.exp(a * 0.05))
        assert abs(pair.b_d[0, 0] - (math.exp(a * 0.05) - 1) / a) < 1e-9


def test_discretize_double_integrator():
    pair = d.discretize(LinearSystem([[0, 1], [0, 0]], [[0], [1]]), 0.05)
    assert np.allclose(pair.a_d, [[1, 0.05], [0, 1]], atol=1e-15)
    assert np.allclose(pair.b_d, [[0.00125], [0.05]], atol=1e-15)


def test_discretize_matches_integration():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.normal(size=(3, 3))
        b = rng.normal(size=(3, 2))
        sys = make_linear(a, b, u_max=2.0, op=1e6)
        pair = d.discretize(LinearSystem(a, b), 0.05, 20)
        x0, u = rng.normal(size=3), rng.uniform(-1, 1, size=2)
        assert np.linalg.norm(d.integrate(sys, x0, u, 0.05, 1e-4) - pair.step(x0, u)) <= 1e-6


def test_discretize_scaling_and_squaring_against_expm():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(4, 4)) * 20
    b = rng.normal(size=(4, 1))
    pair = d.discretize(LinearSystem(a, b), 0.5, 20)
    aug = np.zeros((5, 5))
    aug[:4, :4], aug[:4, 4:] = a * 0.5, b * 0.5
    ref = expm(aug)
    scale = np.abs(ref).max()
    assert np.abs(pair.a_d - ref[:4, :4]).max() < 1e-9 * scale
    assert np.abs(pair.b_d - ref[:4, 4:]).max() < 1e-9 * scale


def test_horizon_matrices_examples():
    b_d = np.array([[0.3], [0.7]])
    a1, b1 = d.horizon_matrices(d.DiscretePair(np.eye(2), b_d, 0.05), 1)
    assert np.allclose(a1, np.eye(2)) and np.allclose(b1, 2 * b_d)
    a0, b0 = d.horizon_matrices(d.DiscretePair(np.zeros((2, 2)), b_d, 0.05), 3)
    assert np.allclose(a0, 0) and np.allclose(b0, b_d)


def test_horizon_matrices_equal_composed_steps():
    rng = np.random.default_rng(2)
    pair = d.discretize(LinearSystem([[0, 1], [0, 0]], [[0], [1]]), 0.05)
    for m in (1, 5, 9):
        am, bm = d.horizon_matrices(pair, m)
        for _ in range(20):
            x, u = rng.normal(size=2), rng.normal(size=1)
            y = x.copy()
            for _ in range(m + 1):
                y = pair.step(y, u)
            assert np.abs(am @ x + bm @ u - y).max() <= 1e-9


def test_helicopter_model_and_fixture():
    plant = d.load_linear_plant()
    assert (plant.model.state_dim, plant.model.input_dim) == (6, 2)
    hx = [[-1, -0.33, 0, 0, 0, 0], [-1, 0.33, 0, 0, 0, 0], [0, 0, 0, 1, 0, 0],
          [0, 0, 0, -1, 0, 0], [0, 0, 0, 0, 1, 0], [0, 0, 0, 0, -1, 0]]
    assert np.array_equal(plant.safe_set.a_mat, hx)
    assert np.array_equal(plant.safe_set.b_vec, [0.3, 0.3, 0.4, 0.4, 1.5, 1.5])
    assert np.array_equal(plant.input_set.b_vec, [1.1, 1.1, 1.1, 1.1])
    assert np.array_equal(plant.adjusted_safe_set.a_mat, plant.safe_set.a_mat)
    assert np.array_equal(plant.adjusted_safe_set.b_vec,
                          [0.1418, 0.1418, 0.2828, 0.2828, 0.0825, 0.0825])
    assert d.helicopter_system().a_mat.shape == (6, 6)
    assert plant.tau_r / plant.tau_c == pytest.approx(5)


def test_param_file_errors(tmp_path):
    bad = tmp_path / "bad.params"
    bad.write_text("name = x\n")
    with pytest.raises(ValueError, match="header"):
        d.load_linear_plant(bad)
    bad.write_text("# plant-params v1\na_mat = [1 2; 3]\n")
    with pytest.raises(ValueError, match="ragged"):
        d.load_linear_plant(bad)
    bad.write_text("# plant-params v1\na_mat = [1 0; 0 1]\n")
    with pytest.raises(ValueError, match="lacks key"):
        d.load_linear_plant(bad)
    with pytest.raises(FileNotFoundError):
        d.load_linear_plant(tmp_path / "missing.params")


def test_param_parse_values():
    p = d.parse_params("# plant-params v1\nx = 1.5e-3  # c\nm = [1 2; 3 4]\nname = heli\n")
    assert p["x"] == 1.5e-3 and p["name"] == "heli"
    assert np.array_equal(p["m"], [[1, 2], [3, 4]])
