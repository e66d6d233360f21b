"""Interval over-approximation of reachable sets via growth bounds.

The centre of the initial box follows the nominal flow (RK4); the radius
follows r' = K r + w (stepped exactly, it is linear), where K is a Metzler bound on the Jacobian and w bounds
the effect of input uncertainty. Between mesh points, tube segments are
closed off with the a-priori speed bound |f| <= F.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import EPS_GEOM
from .dynamics import ControlSystem, GrowthBound, LinearSystem, discretize, rk4_mesh
from .geometry import HyperInterval

GrowthModel = GrowthBound

DEFAULT_STEP = 1e-3
DEFAULT_SEGMENTS = 10
# Padding on radii (relative, absolute) absorbing RK4 truncation error of the
# centre and radius integration. The absolute part stays below EPS_GEOM.
RADIUS_PAD = 1e-9
RADIUS_PAD_ABS = 1e-10


class _Overflow:
    """Result marker: the over-approximation left the operating box."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "OVERFLOW"

    def __bool__(self):
        return False


OVERFLOW = _Overflow()


@dataclass(frozen=True, eq=False)
class ReachTube:
    """Segments [t_start[i], t_end[i]] with an enclosing box each (arrays of shape (n_seg, n))."""

    t_start: np.ndarray
    t_end: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    endpoint: HyperInterval

    def __len__(self):
        return len(self.t_start)

    def segment(self, i: int) -> HyperInterval:
        return HyperInterval(self.lower[i], self.upper[i])

    def hull(self) -> HyperInterval:
        return HyperInterval(self.lower.min(axis=0), self.upper.max(axis=0))


@dataclass(frozen=True, eq=False)
class Sweep:
    """Batched reach data at uniform sample times.

    ``lower``/``upper`` have shape (n_times, batch, n); ``seg_lower``/``seg_upper``
    have shape (n_times - 1, batch, n); ``overflow`` has shape (batch,).
    """

    times: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    seg_lower: np.ndarray
    seg_upper: np.ndarray
    overflow: np.ndarray

    def index_of(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-12:
            raise ValueError(f"time {t} is not a sample time of this sweep")
        return i


def input_interval(sys: ControlSystem, u):
    if isinstance(u, HyperInterval):
        lo, hi = u.lower, u.upper
    else:
        lo = hi = np.asarray(u, dtype=float).reshape(-1)
    sys.check_input(lo)
    sys.check_input(hi)
    return lo, hi


def _growth(sys: ControlSystem) -> GrowthBound:
    if sys.growth is None:
        raise ValueError(f"{sys.name} has no growth model")
    return sys.growth


def sweep(sys: ControlSystem, lower, upper, u, tau: float, n_samples: int,
          h: float = DEFAULT_STEP) -> Sweep:
    """Over-approximate reach boxes at ``n_samples + 1`` uniform times over [0, tau].

    ``lower``/``upper`` may carry a leading batch axis; all boxes share the input.
    """
    gb = _growth(sys)
    lower = np.atleast_2d(np.asarray(lower, dtype=float))
    upper = np.atleast_2d(np.asarray(upper, dtype=float))
    u_lo, u_hi = input_interval(sys, u)
    u_mid = 0.5 * (u_lo + u_hi)
    k_mat = np.asarray(gb.jacobian(u_lo, u_hi), dtype=float)
    w = np.asarray(gb.input_gain(u_lo, u_hi), dtype=float) @ (0.5 * (u_hi - u_lo))
    speed = np.asarray(gb.speed(u_lo, u_hi), dtype=float)
    f = sys.vector_field

    times = np.linspace(0.0, tau, n_samples + 1)
    dt_seg = tau / n_samples
    # The radius ODE is linear with constant coefficients: step it exactly.
    rad_pair = discretize(LinearSystem(k_mat, np.eye(len(w))), dt_seg)
    rad_const = rad_pair.b_d @ w
    c = 0.5 * (lower + upper)
    rad = 0.5 * (upper - lower)
    out_c = np.empty((n_samples + 1,) + lower.shape)
    out_r = np.empty_like(out_c)
    out_c[0], out_r[0] = c, rad
    z0_r = rad.copy()
    uu = np.broadcast_to(u_mid, lower.shape[:-1] + u_mid.shape)
    steps = np.diff(rk4_mesh(dt_seg, h))
    for i in range(1, n_samples + 1):
        for dt in steps:
            k1 = f(c, uu)
            k2 = f(c + (0.5 * dt) * k1, uu)
            k3 = f(c + (0.5 * dt) * k2, uu)
            k4 = f(c + dt * k3, uu)
            c = c + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        rad = rad @ rad_pair.a_d.T + rad_const
        out_c[i], out_r[i] = c, rad
    if not (np.all(np.isfinite(out_c)) and np.all(np.isfinite(out_r))):
        bad = ~np.all(np.isfinite(out_c) & np.isfinite(out_r), axis=(0, 2))
        raise FloatingPointError(f"reach computation diverged for batch entries {np.flatnonzero(bad)}")
    out_r = out_r * (1.0 + RADIUS_PAD) + RADIUS_PAD_ABS
    out_r[0] = z0_r
    lo_t, hi_t = out_c - out_r, out_c + out_r

    seg_hi = np.maximum(np.maximum(hi_t[:-1], hi_t[1:]), 0.5 * (hi_t[:-1] + hi_t[1:] + speed * dt_seg))
    seg_lo = np.minimum(np.minimum(lo_t[:-1], lo_t[1:]), 0.5 * (lo_t[:-1] + lo_t[1:] - speed * dt_seg))

    if sys.operating_box is not None:
        op = sys.operating_box
        inside = np.all(seg_lo >= op.lower - EPS_GEOM, axis=(0, 2)) & np.all(seg_hi <= op.upper + EPS_GEOM, axis=(0, 2))
        overflow = ~inside
    else:
        overflow = np.zeros(lower.shape[0], dtype=bool)
    return Sweep(times, lo_t, hi_t, seg_lo, seg_hi, overflow)


def reach_over(sys: ControlSystem, x0: HyperInterval, u, tau: float, h: float = DEFAULT_STEP):
    """Box containing every state reachable at time ``tau``, or OVERFLOW."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    sw = sweep(sys, x0.lower, x0.upper, u, tau, 1, h)
    if sw.overflow[0]:
        return OVERFLOW
    return HyperInterval(sw.lower[-1, 0], sw.upper[-1, 0])


def reach_tube(sys: ControlSystem, x0: HyperInterval, u, tau: float,
               n_seg: int = DEFAULT_SEGMENTS, h: float = DEFAULT_STEP):
    """Piecewise-box enclosure of all trajectories over [0, tau], or OVERFLOW."""
    if n_seg < 1:
        raise ValueError("n_seg must be >= 1")
    sw = sweep(sys, x0.lower, x0.upper, u, tau, n_seg, h)
    if sw.overflow[0]:
        return OVERFLOW
    return ReachTube(sw.times[:-1], sw.times[1:], sw.seg_lower[:, 0], sw.seg_upper[:, 0],
                     HyperInterval(sw.lower[-1, 0], sw.upper[-1, 0]))


def predict_state(sys: ControlSystem, x_prev, u_prev, tau_c: float, *,
                  lead: float = 0.0, u_lead=None, h: float = DEFAULT_STEP):
    """Over-approximated state one control period after the sample ``x_prev``.

    With ``lead > 0`` the sample was taken ``lead`` seconds before ``u_prev``
    was latched, and the state first evolves under ``u_lead`` (a point, an
    interval, or None for the full input range).
    """
    box = x_prev if isinstance(x_prev, HyperInterval) else HyperInterval.point(x_prev)
    if lead > 0:
        if u_lead is None:
            u_lead = sys.input_bounds
        box = reach_over(sys, box, u_lead, lead, h)
        if box is OVERFLOW:
            return OVERFLOW
    return reach_over(sys, box, u_prev, tau_c, h)


def estimate_growth_bound(sys: ControlSystem, n_samples: int = 2000, seed: int = 0,
                          margin: float = 1.2, fd_step: float = 1e-6) -> GrowthBound:
    """Sampling-based growth data for plants without an analytic bound (not rigorous)."""
    if sys.operating_box is None:
        raise ValueError("estimating a growth bound needs an operating box")
    rng = np.random.default_rng(seed)
    n, p = sys.state_dim, sys.input_dim
    op, ub = sys.operating_box, sys.input_bounds
    xs = rng.uniform(op.lower, op.upper, size=(n_samples, n))
    us = rng.uniform(ub.lower, ub.upper, size=(n_samples, p))
    f0 = sys.vector_field(xs, us)
    jx = np.empty((n_samples, n, n))
    for j in range(n):
        dx = np.zeros(n)
        dx[j] = fd_step
        jx[:, :, j] = (sys.vector_field(xs + dx, us) - f0) / fd_step
    ju = np.empty((n_samples, n, p))
    for j in range(p):
        du = np.zeros(p)
        du[j] = fd_step
        ju[:, :, j] = (sys.vector_field(xs, us + du) - f0) / fd_step
    k_mat = np.abs(jx).max(axis=0) * margin
    diag = jx[:, np.arange(n), np.arange(n)].max(axis=0)
    k_mat[np.arange(n), np.arange(n)] = np.where(diag > 0, diag * margin, diag / margin)
    g_mat = np.abs(ju).max(axis=0) * margin
    spd = np.abs(f0).max(axis=0) * margin
    return GrowthBound(lambda lo, hi: k_mat, lambda lo, hi: g_mat, lambda lo, hi: spd, rigorous=False)
