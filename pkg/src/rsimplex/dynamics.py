"""Plant models, fixed-step RK4 integration and exact discretisation of LTI systems."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from . import EPS_GEOM
from .geometry import HPolytope, HyperInterval

PARAMS_HEADER = "# plant-params v1"

PENDULUM_OMEGA = 1.0
PENDULUM_GAMMA = 0.0125
PENDULUM_U_MAX = 4.0


class IntegrationDiverged(RuntimeError):
    def __init__(self, t: float):
        super().__init__(f"integration produced a non-finite state at t={t:.6g}")
        self.t = t


@dataclass(frozen=True)
class GrowthBound:
    """Component-wise growth data for interval reachability.

    ``jacobian(u_lo, u_hi)`` returns a Metzler matrix K with K_ii >= sup df_i/dx_i
    and K_ij >= sup |df_i/dx_j| over the operating box; ``input_gain`` bounds
    |df/du|; ``speed`` bounds |f| over the operating box. All three take the
    input as an interval so that unknown held commands can be propagated.
    """

    jacobian: Callable[[np.ndarray, np.ndarray], np.ndarray]
    input_gain: Callable[[np.ndarray, np.ndarray], np.ndarray]
    speed: Callable[[np.ndarray, np.ndarray], np.ndarray]
    rigorous: bool = True


@dataclass(frozen=True, eq=False)
class ControlSystem:
    """x' = f(x, u) with u restricted to ``input_bounds``.

    ``vector_field`` must accept arrays with leading batch axes, shape (..., n)
    and (..., p), and return shape (..., n).
    """

    state_dim: int
    input_dim: int
    input_bounds: HyperInterval
    vector_field: Callable[[np.ndarray, np.ndarray], np.ndarray]
    operating_box: HyperInterval | None = None
    growth: GrowthBound | None = None
    name: str = "plant"

    def check_input(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.shape[-1:] != (self.input_dim,):
            raise ValueError(f"{self.name}: input must have {self.input_dim} components")
        if np.any(u < self.input_bounds.lower - EPS_GEOM) or np.any(u > self.input_bounds.upper + EPS_GEOM):
            raise ValueError(f"{self.name}: input {u} outside bounds {self.input_bounds}")
        return u


def _rk4_step(f, x, u, h):
    k1 = f(x, u)
    k2 = f(x + 0.5 * h * k1, u)
    k3 = f(x + 0.5 * h * k2, u)
    k4 = f(x + h * k3, u)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_mesh(tau: float, h: float) -> np.ndarray:
    """Mesh 0, h, 2h, ... ending exactly at tau (last step shortened)."""
    if tau <= 0 or h <= 0:
        raise ValueError("tau and h must be positive")
    n = max(1, math.ceil(tau / h - 1e-9))
    ts = np.arange(n + 1, dtype=float) * h
    ts[-1] = tau
    return ts


def dense_trajectory(sys: ControlSystem, x0, u, tau: float, h: float):
    """RK4 mesh states under constant input; returns (times, states) with states (len, ..., n)."""
    u = sys.check_input(u)
    x = np.asarray(x0, dtype=float)
    ts = rk4_mesh(tau, h)
    out = np.empty((len(ts),) + x.shape)
    out[0] = x
    for i in range(1, len(ts)):
        x = _rk4_step(sys.vector_field, x, u, ts[i] - ts[i - 1])
        if not np.all(np.isfinite(x)):
            raise IntegrationDiverged(ts[i])
        out[i] = x
    return ts, out


def integrate(sys: ControlSystem, x0, u, tau: float, h: float) -> np.ndarray:
    """State after holding ``u`` for ``tau`` seconds (classical RK4, step ``h``)."""
    return dense_trajectory(sys, x0, u, tau, h)[1][-1]


# --- inverted pendulum ---------------------------------------------------------

def _pendulum_field(omega, gamma):
    w2 = omega**2

    def f(x, u):
        if x.size == 2 and u.size == 1:
            # Single state: scalar math avoids per-call array overhead.
            a, b = x.flat
            v = -w2 * (math.sin(a) + math.cos(a) * u.flat[0]) - 2.0 * gamma * a
            return np.array((b, v)).reshape(x.shape if x.ndim >= u.ndim else u.shape[:-1] + (2,))
        x1 = x[..., 0]
        shape = x.shape if u.shape[:-1] == x.shape[:-1] else np.broadcast_shapes(x.shape, u.shape[:-1] + (2,))
        out = np.empty(shape)
        out[..., 0] = x[..., 1]
        out[..., 1] = -w2 * (np.sin(x1) + np.cos(x1) * u[..., 0]) - 2.0 * gamma * x1
        return out

    return f


def pendulum_system(omega: float = PENDULUM_OMEGA, gamma: float = PENDULUM_GAMMA,
                    u_max: float = PENDULUM_U_MAX) -> ControlSystem:
    """Damped pendulum; angle measured from the downward vertical, upright at pi."""
    op = HyperInterval([0.5 * math.pi, -2.0], [1.5 * math.pi, 2.0])
    x1_abs = float(np.max(np.abs([op.lower[0], op.upper[0]])))
    x2_abs = float(np.max(np.abs([op.lower[1], op.upper[1]])))
    w2 = omega**2

    def umag(u_lo, u_hi):
        return float(np.max(np.abs([u_lo[0], u_hi[0]])))

    # |d f2 / d x1| = |w^2 (cos x1 - u sin x1) + 2 gamma| <= w^2 sqrt(1 + u^2) + 2 gamma
    def jacobian(u_lo, u_hi):
        return np.array([[0.0, 1.0], [w2 * math.hypot(1.0, umag(u_lo, u_hi)) + 2 * gamma, 0.0]])

    def input_gain(u_lo, u_hi):
        return np.array([[0.0], [w2]])

    def speed(u_lo, u_hi):
        return np.array([x2_abs, w2 * math.hypot(1.0, umag(u_lo, u_hi)) + 2 * gamma * x1_abs])

    return ControlSystem(
        state_dim=2,
        input_dim=1,
        input_bounds=HyperInterval([-u_max], [u_max]),
        vector_field=_pendulum_field(omega, gamma),
        operating_box=op,
        growth=GrowthBound(jacobian, input_gain, speed),
        name="pendulum",
    )


def pendulum_safe_set() -> HPolytope:
    return HPolytope([[-1, 0], [1, 0], [0, -1], [0, 1]],
                     [-0.75 * math.pi, 1.25 * math.pi, 1.0, 1.0])


def pendulum_mc(x, u_max: float = PENDULUM_U_MAX) -> np.ndarray:
    """Stabilising mission controller 2 (pi - x1 - x2), saturated to the input bounds."""
    x = np.asarray(x, dtype=float)
    return np.clip(2.0 * (math.pi - x[..., 0:1] - x[..., 1:2]), -u_max, u_max)


# --- linear systems --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LinearSystem:
    a_mat: np.ndarray
    b_mat: np.ndarray

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a_mat, dtype=float))
        b = np.asarray(self.b_mat, dtype=float)
        if b.ndim == 1:
            b = b[:, None]
        if a.shape[0] != a.shape[1] or b.shape[0] != a.shape[0]:
            raise ValueError(f"inconsistent shapes A{a.shape} B{b.shape}")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("system matrices must be finite")
        object.__setattr__(self, "a_mat", a)
        object.__setattr__(self, "b_mat", b)

    @property
    def state_dim(self) -> int:
        return self.a_mat.shape[0]

    @property
    def input_dim(self) -> int:
        return self.b_mat.shape[1]


@dataclass(frozen=True, eq=False)
class DiscretePair:
    a_d: np.ndarray
    b_d: np.ndarray
    tau: float

    def step(self, x, u) -> np.ndarray:
        return np.asarray(x) @ self.a_d.T + np.asarray(u) @ self.b_d.T


def _series(a_tau: np.ndarray, tau: float, p_trunc: int):
    n = a_tau.shape[0]
    term = np.eye(n)            # (A tau)^k / k!
    a_d = np.eye(n)
    integral = tau * np.eye(n)  # sum_k A^k tau^{k+1} / (k+1)!
    for k in range(1, p_trunc + 1):
        term = term @ a_tau / k
        a_d = a_d + term
        integral = integral + term * (tau / (k + 1))
    return a_d, integral


def discretize(sys: LinearSystem, tau: float, p_trunc: int = 20) -> DiscretePair:
    """Zero-order-hold discretisation by the truncated exponential series.

    When ||A tau|| > 1 the interval is halved until the series argument is
    small, and the pair is recovered by squaring
    (A_d(2t) = A_d(t)^2, B_d(2t) = (A_d(t) + I) B_d(t)).
    """
    if tau <= 0 or p_trunc < 1:
        raise ValueError("need tau > 0 and p_trunc >= 1")
    a = sys.a_mat
    norm = np.linalg.norm(a * tau, ord=np.inf)
    squarings = max(0, math.ceil(math.log2(norm))) if norm > 1.0 else 0
    t_small = tau / 2**squarings
    a_d, integral = _series(a * t_small, t_small, p_trunc)
    b_d = integral @ sys.b_mat
    eye = np.eye(a.shape[0])
    for _ in range(squarings):
        b_d = (a_d + eye) @ b_d
        a_d = a_d @ a_d
    return DiscretePair(a_d, b_d, tau)


def horizon_matrices(pair: DiscretePair, m: int):
    """(A_d^(m+1), (A_d^m + ... + A_d + I) B_d): state after m+1 steps with the input held."""
    if m < 1:
        raise ValueError("m must be >= 1")
    n = pair.a_d.shape[0]
    power = np.eye(n)
    acc = np.zeros_like(pair.a_d)
    for _ in range(m + 1):
        acc = acc + power
        power = power @ pair.a_d
    return power, acc @ pair.b_d


def linear_control_system(lin: LinearSystem, input_bounds: HyperInterval,
                          operating_box: HyperInterval, name: str = "linear") -> ControlSystem:
    """Wrap an LTI model as a ControlSystem with its exact growth bound."""
    a, b = lin.a_mat, lin.b_mat
    metzler = np.abs(a)
    np.fill_diagonal(metzler, np.diag(a))
    x_abs = np.maximum(np.abs(operating_box.lower), np.abs(operating_box.upper))

    def f(x, u):
        return x @ a.T + u @ b.T

    def speed(u_lo, u_hi):
        u_abs = np.maximum(np.abs(u_lo), np.abs(u_hi))
        return np.abs(a) @ x_abs + np.abs(b) @ u_abs

    return ControlSystem(
        state_dim=lin.state_dim,
        input_dim=lin.input_dim,
        input_bounds=input_bounds,
        vector_field=f,
        operating_box=operating_box,
        growth=GrowthBound(lambda lo, hi: metzler, lambda lo, hi: np.abs(b), speed),
        name=name,
    )


# --- parameter files -------------------------------------------------------------

_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"


def _parse_value(text: str):
    text = text.strip()
    if text.startswith("["):
        if not text.endswith("]"):
            raise ValueError(f"unterminated matrix literal: {text!r}")
        rows = [r.split() for r in text[1:-1].split(";")]
        if any(not re.fullmatch(_NUM, tok) for r in rows for tok in r):
            raise ValueError(f"bad number in matrix literal: {text!r}")
        widths = {len(r) for r in rows}
        if len(widths) != 1:
            raise ValueError(f"ragged matrix literal: {text!r}")
        return np.array([[float(t) for t in r] for r in rows])
    if re.fullmatch(_NUM, text):
        return float(text)
    return text


def parse_params(text: str) -> dict:
    """Key-value plant parameter format.

    First line is the version header. Each further line is ``key = value``
    where value is a number, a bare word, or a row-major matrix literal
    ``[a b; c d]`` (rows separated by ``;``). ``#`` starts a comment.
    """
    lines = text.splitlines()
    if not lines or lines[0].strip() != PARAMS_HEADER:
        raise ValueError(f"missing header line {PARAMS_HEADER!r}")
    out = {}
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _parse_value(value)
    return out


def load_params(path=None, name: str | None = None) -> dict:
    if path is not None:
        return parse_params(Path(path).read_text())
    return parse_params(resources.files("rsimplex.data").joinpath(name).read_text())


@dataclass(frozen=True, eq=False)
class LinearPlant:
    """A linear plant bundled with its safety data from a parameter file."""

    name: str
    model: LinearSystem
    safe_set: HPolytope
    adjusted_safe_set: HPolytope
    input_set: HPolytope
    input_bounds: HyperInterval
    operating_box: HyperInterval
    tau_c: float
    tau_r: float
    params: dict = field(repr=False, default_factory=dict)

    def control_system(self) -> ControlSystem:
        return linear_control_system(self.model, self.input_bounds, self.operating_box, self.name)


def _vec(params, key):
    return np.asarray(params[key], dtype=float).reshape(-1)


def load_linear_plant(path=None, name: str = "helicopter.params") -> LinearPlant:
    p = load_params(path, name)
    try:
        model = LinearSystem(p["a_mat"], p["b_mat"])
        plant = LinearPlant(
            name=str(p.get("name", "linear")),
            model=model,
            safe_set=HPolytope(p["h_x"], _vec(p, "h_x_offset")),
            adjusted_safe_set=HPolytope(p["h_x_adj"], _vec(p, "h_x_adj_offset")),
            input_set=HPolytope(p["h_u"], _vec(p, "h_u_offset")),
            input_bounds=HyperInterval(_vec(p, "u_lower"), _vec(p, "u_upper")),
            operating_box=HyperInterval(_vec(p, "op_lower"), _vec(p, "op_upper")),
            tau_c=float(p["tau_c"]),
            tau_r=float(p["tau_r"]),
            params=p,
        )
    except KeyError as exc:
        raise ValueError(f"parameter file lacks key {exc}") from None
    n, m = model.state_dim, model.input_dim
    if plant.safe_set.dim != n or plant.adjusted_safe_set.dim != n or plant.input_set.dim != m:
        raise ValueError("safe-set dimensions do not match the model")
    return plant


def helicopter_system(path=None) -> LinearSystem:
    """6-state, 2-input 3-DOF helicopter linearisation (stand-in parameters, see data file)."""
    return load_linear_plant(path).model


def with_growth(sys: ControlSystem, growth: GrowthBound) -> ControlSystem:
    return replace(sys, growth=growth)
