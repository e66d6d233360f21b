"""Polytopic restart-tolerant invariant region for linear plants and its LP controller."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import EPS_GEOM
from .dynamics import DiscretePair, horizon_matrices
from .geometry import (MAX_FM_ROWS, HPolytope, chebyshev_center, contains_point, is_empty,
                       is_subset, project_to_states, remove_redundant)

logger = logging.getLogger(__name__)

DEFAULT_P_MAX = 64


class InvariantError(RuntimeError):
    def __init__(self, message: str, trace):
        super().__init__(message)
        self.trace = list(trace)


class RegionEmpty(InvariantError):
    """An iterate became empty: the dynamics admit no such region."""


class BudgetExceeded(InvariantError):
    """No fixpoint within the iteration budget."""


class OutOfDomain(ValueError):
    pass


class InfeasibleInput(RuntimeError):
    """No admissible input for a state inside the region (the region is broken)."""


@dataclass(frozen=True)
class TraceEntry:
    p: int
    rows: int
    empty: bool


@dataclass(frozen=True, eq=False)
class InvariantRegion:
    polytope: HPolytope
    iterations: int
    trace: list = field(default_factory=list)
    iterates: list = field(default_factory=list, repr=False)

    @property
    def h_mat(self) -> np.ndarray:
        return self.polytope.a_mat

    @property
    def h_vec(self) -> np.ndarray:
        return self.polytope.b_vec

    @property
    def n_rows(self) -> int:
        return self.polytope.n_rows


def lifted_constraints(region: HPolytope, h_u: HPolytope, pair: DiscretePair, a_m, b_m) -> HPolytope:
    """{(x, u) : A^(m+1)x + B^(m+1)u ∈ I, A x + B u ∈ I, u ∈ S_u, x ∈ I}."""
    h, g = region.a_mat, region.b_vec
    n, p = pair.b_d.shape
    rows = [
        h @ np.hstack([a_m, b_m]),
        h @ np.hstack([pair.a_d, pair.b_d]),
        np.hstack([np.zeros((h_u.n_rows, n)), h_u.a_mat]),
        np.hstack([h, np.zeros((h.shape[0], p))]),
    ]
    return HPolytope(np.vstack(rows), np.concatenate([g, g, h_u.b_vec, g]))


def invariant_step(region: HPolytope, h_u: HPolytope, pair: DiscretePair, m: int,
                   max_rows: int = MAX_FM_ROWS) -> HPolytope:
    a_m, b_m = horizon_matrices(pair, m)
    lifted = lifted_constraints(region, h_u, pair, a_m, b_m)
    return remove_redundant(project_to_states(lifted, pair.a_d.shape[0], max_rows))


def compute_inv_region(h_a: HPolytope, h_u: HPolytope, pair: DiscretePair, m: int,
                       p_max: int = DEFAULT_P_MAX, max_rows: int = MAX_FM_ROWS,
                       on_iteration=None) -> InvariantRegion:
    """Shrink the adjusted safe set until one held command keeps it invariant at both horizons.

    Raises RegionEmpty or BudgetExceeded; both carry the iteration trace.
    ``on_iteration`` receives each TraceEntry as it is produced.
    """
    n, p = pair.b_d.shape
    if h_a.dim != n or h_u.dim != p:
        raise ValueError("safe-set dimensions do not match the model")
    if p_max < 1 or m < 1:
        raise ValueError("p_max and m must be >= 1")
    h_u = h_u.canonical()
    cur = remove_redundant(h_a)
    if is_empty(cur):
        raise ValueError("adjusted safe set is empty")
    trace = [TraceEntry(0, cur.n_rows, False)]
    iterates = [cur]
    if on_iteration:
        on_iteration(trace[-1])
    for it in range(p_max):
        nxt = invariant_step(cur, h_u, pair, m, max_rows)
        empty = is_empty(nxt)
        trace.append(TraceEntry(it + 1, nxt.n_rows, empty))
        logger.info("iteration %d: %d rows%s", it + 1, nxt.n_rows, " (empty)" if empty else "")
        if on_iteration:
            on_iteration(trace[-1])
        iterates.append(nxt)
        if not empty and is_subset(cur, nxt):
            return InvariantRegion(cur, it, trace, iterates)
        if empty:
            raise RegionEmpty(f"iterate {it + 1} is empty", trace)
        cur = nxt
    raise BudgetExceeded(f"no fixpoint after {p_max} iterations", trace)


@dataclass(frozen=True, eq=False)
class LinearBcProblem:
    pair: DiscretePair
    a_m: np.ndarray
    b_m: np.ndarray
    h_u: HPolytope
    region: InvariantRegion

    @classmethod
    def build(cls, pair: DiscretePair, m: int, h_u: HPolytope, region: InvariantRegion):
        a_m, b_m = horizon_matrices(pair, m)
        return cls(pair, a_m, b_m, h_u.canonical(), region)

    def input_polytope(self, xs) -> HPolytope:
        """Inputs satisfying every constraint block for all states in ``xs`` (shape (k, n))."""
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        h, g = self.region.h_mat, self.region.h_vec
        a_rows = [self.h_u.a_mat]
        b_rows = [self.h_u.b_vec]
        for x in xs:
            a_rows += [h @ self.pair.b_d, h @ self.b_m]
            b_rows += [g - h @ (self.pair.a_d @ x), g - h @ (self.a_m @ x)]
        return HPolytope(np.vstack(a_rows), np.concatenate(b_rows))

    def slack(self, x, u) -> np.ndarray:
        """Slack of every constraint block at (x, u); all >= 0 means admissible."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        h, g = self.region.h_mat, self.region.h_vec
        return np.concatenate([
            self.h_u.b_vec - self.h_u.a_mat @ u,
            g - h @ (self.pair.a_d @ x + self.pair.b_d @ u),
            g - h @ (self.a_m @ x + self.b_m @ u),
        ])


def bc_linear(problem: LinearBcProblem, x, tol: float = EPS_GEOM) -> np.ndarray:
    """Chebyshev centre of the admissible input polytope at state x."""
    x = np.asarray(x, dtype=float)
    if not contains_point(problem.region.polytope, x, tol):
        raise OutOfDomain(f"state {x.tolist()} is outside the invariant region")
    return _centre(problem.input_polytope(x), tol)


def bc_linear_robust(problem: LinearBcProblem, xs, tol: float = EPS_GEOM) -> np.ndarray:
    """Input admissible for every state in ``xs``; falls back to their mean if none is."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    centre, radius = chebyshev_center(problem.input_polytope(xs))
    if radius >= -tol:
        return centre
    return bc_linear(problem, xs.mean(axis=0), tol)


def _centre(poly: HPolytope, tol: float) -> np.ndarray:
    centre, radius = chebyshev_center(poly)
    if radius < -tol:
        raise InfeasibleInput("no admissible input: the region is not invariant")
    return centre
