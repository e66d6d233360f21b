"""Half-space polytopes, hyper-intervals and ellipsoids.

All half-space comparisons use an absolute slack of ``EPS_GEOM`` on rows that
have been scaled to unit Euclidean norm, so the slack is a distance.
"""
from __future__ import annotations

import io
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import ConvexHull, QhullError

from . import EPS_GEOM

logger = logging.getLogger(__name__)

# Coefficients below this magnitude (on unit-norm rows) are treated as zero.
COEF_TOL = 1e-12
# Default cap on rows produced during Fourier-Motzkin elimination.
MAX_FM_ROWS = 200_000
# Below this many rows, redundancy removal always uses per-row LPs.
HULL_MIN_ROWS = 64
# Minimum inscribed radius for the hull-based redundancy filter.
HULL_MIN_RADIUS = 1e-6

TEXT_HEADER = "# hpolytope v1"


class GeometryError(Exception):
    """Base class for geometry failures."""


class LPError(GeometryError):
    """The LP backend failed for a reason other than infeasibility/unboundedness."""


class ProjectionError(GeometryError):
    """Fourier-Motzkin elimination exceeded its row budget."""


def _solve_lp(c, a_ub, b_ub, bounds):
    res = linprog(c, A_ub=a_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if res.status not in (0, 2, 3):
        raise LPError(f"LP solver failed: status={res.status} ({res.message})")
    return res


@dataclass(frozen=True, eq=False)
class HPolytope:
    """The set {x | a_mat @ x <= b_vec}.

    Zero rows are allowed in a raw polytope; :meth:`canonical` drops the
    trivially satisfied ones. A canonical polytope with no rows is all of R^n.
    """

    a_mat: np.ndarray
    b_vec: np.ndarray

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a_mat, dtype=float))
        b = np.asarray(self.b_vec, dtype=float).reshape(-1)
        if a.shape[0] != b.shape[0]:
            raise ValueError(f"row count mismatch: {a.shape[0]} rows vs {b.shape[0]} offsets")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("polytope data must be finite")
        object.__setattr__(self, "a_mat", a)
        object.__setattr__(self, "b_vec", b)

    @property
    def dim(self) -> int:
        return self.a_mat.shape[1]

    @property
    def n_rows(self) -> int:
        return self.a_mat.shape[0]

    def canonical(self) -> "HPolytope":
        """Rows scaled to unit norm, trivial zero rows dropped.

        A zero row with a negative offset makes the set empty; that case is
        represented by the contradictory pair ``x_0 <= -1, -x_0 <= -1``.
        """
        norms = np.linalg.norm(self.a_mat, axis=1)
        zero = norms <= COEF_TOL
        if np.any(self.b_vec[zero] < -EPS_GEOM):
            return empty_polytope(self.dim)
        keep = ~zero
        a = self.a_mat[keep] / norms[keep, None]
        b = self.b_vec[keep] / norms[keep]
        a[np.abs(a) <= COEF_TOL] = 0.0
        return HPolytope(a, b)

    def __repr__(self):
        return f"HPolytope(dim={self.dim}, rows={self.n_rows})"


def empty_polytope(n: int) -> HPolytope:
    a = np.zeros((2, n))
    a[0, 0], a[1, 0] = 1.0, -1.0
    return HPolytope(a, np.array([-1.0, -1.0]))


@dataclass(frozen=True, eq=False)
class HyperInterval:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).reshape(-1)
        hi = np.asarray(self.upper, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise ValueError("lower/upper shape mismatch")
        if np.any(lo > hi):
            raise ValueError(f"empty hyper-interval: lower={lo}, upper={hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def from_center(cls, center, radius) -> "HyperInterval":
        c = np.asarray(center, dtype=float)
        r = np.broadcast_to(np.asarray(radius, dtype=float), c.shape)
        return cls(c - r, c + r)

    @classmethod
    def point(cls, x) -> "HyperInterval":
        x = np.asarray(x, dtype=float)
        return cls(x, x.copy())

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def radius(self) -> np.ndarray:
        return 0.5 * (self.upper - self.lower)

    def contains(self, x, tol: float = EPS_GEOM) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def contains_interval(self, other: "HyperInterval", tol: float = EPS_GEOM) -> bool:
        return bool(np.all(other.lower >= self.lower - tol) and np.all(other.upper <= self.upper + tol))

    def hull(self, other: "HyperInterval") -> "HyperInterval":
        return HyperInterval(np.minimum(self.lower, other.lower), np.maximum(self.upper, other.upper))

    def vertices(self) -> np.ndarray:
        """All 2^n corner points, shape (2^n, n)."""
        n = self.dim
        bits = (np.arange(2**n)[:, None] >> np.arange(n)[None, :]) & 1
        return np.where(bits == 1, self.upper, self.lower)

    def to_polytope(self) -> HPolytope:
        n = self.dim
        eye = np.eye(n)
        return HPolytope(np.vstack([eye, -eye]), np.concatenate([self.upper, -self.lower]))

    def __repr__(self):
        return f"HyperInterval({self.lower.tolist()}, {self.upper.tolist()})"


@dataclass(frozen=True, eq=False)
class Ellipsoid:
    """{x | ||l_mat (x - center)||_2 <= 1}; supported for membership only."""

    l_mat: np.ndarray
    center: np.ndarray

    def __post_init__(self):
        l_mat = np.atleast_2d(np.asarray(self.l_mat, dtype=float))
        c = np.asarray(self.center, dtype=float).reshape(-1)
        if l_mat.shape != (c.shape[0], c.shape[0]) or not np.all(np.isfinite(l_mat)):
            raise ValueError("l_mat must be a finite n x n matrix")
        object.__setattr__(self, "l_mat", l_mat)
        object.__setattr__(self, "center", c)

    def contains(self, x, tol: float = EPS_GEOM) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.linalg.norm(self.l_mat @ (x - self.center)) <= 1.0 + tol)


def contains_point(p: HPolytope, x, tol: float = EPS_GEOM) -> bool:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != p.dim:
        raise ValueError(f"dimension mismatch: point has {x.shape[0]}, polytope has {p.dim}")
    c = p.canonical()
    return bool(np.all(c.a_mat @ x <= c.b_vec + tol))


def contains_points(p: HPolytope, xs, tol: float = EPS_GEOM) -> np.ndarray:
    """Vectorised membership for an array of points with shape (..., n)."""
    xs = np.asarray(xs, dtype=float)
    if xs.shape[-1] != p.dim:
        raise ValueError(f"dimension mismatch: points have {xs.shape[-1]}, polytope has {p.dim}")
    c = p.canonical()
    return np.all(xs @ c.a_mat.T <= c.b_vec + tol, axis=-1)


def box_support(p: HPolytope, box: HyperInterval) -> np.ndarray:
    """max over the box of each (canonical) row minus its offset."""
    c = p.canonical()
    return c.a_mat @ box.center + np.abs(c.a_mat) @ box.radius - c.b_vec


def box_in_polytope(box: HyperInterval, p: HPolytope, tol: float = EPS_GEOM) -> bool:
    """Exact containment of a hyper-interval in a polytope (closed-form support)."""
    if box.dim != p.dim:
        raise ValueError("dimension mismatch")
    return bool(np.all(box_support(p, box) <= tol))


def chebyshev_center(p: HPolytope):
    """Centre and radius of the largest inscribed ball, radius capped at 1.

    A negative radius means the polytope is empty (the LP maximises the
    uniform slack, which becomes negative when no point satisfies all rows).
    """
    c = p.canonical()
    n = c.dim
    if c.n_rows == 0:
        return np.zeros(n), 1.0
    a_ub = np.hstack([c.a_mat, np.ones((c.n_rows, 1))])
    obj = np.zeros(n + 1)
    obj[-1] = -1.0
    bounds = [(None, None)] * n + [(None, 1.0)]
    res = _solve_lp(obj, a_ub, c.b_vec, bounds)
    if res.status != 0:
        raise LPError(f"Chebyshev LP did not solve: {res.message}")
    return res.x[:n], float(res.x[-1])


def is_empty(p: HPolytope, tol: float = EPS_GEOM) -> bool:
    _, radius = chebyshev_center(p)
    return radius < -tol


def max_linear(p: HPolytope, direction) -> float:
    """sup of direction @ x over p; +inf if unbounded, -inf if p is empty."""
    c = p.canonical()
    d = np.asarray(direction, dtype=float)
    if c.n_rows == 0:
        return 0.0 if np.all(d == 0) else np.inf
    res = _solve_lp(-d, c.a_mat, c.b_vec, [(None, None)] * c.dim)
    if res.status == 2:
        return -np.inf
    if res.status == 3:
        return np.inf
    return float(-res.fun)


def is_subset(p: HPolytope, q: HPolytope, tol: float = EPS_GEOM) -> bool:
    """p ⊆ q, decided with one LP per row of q."""
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")
    if is_empty(p):
        return True
    cq = q.canonical()
    for a, b in zip(cq.a_mat, cq.b_vec):
        if max_linear(p, a) > b + tol:
            return False
    return True


def _dedupe(a: np.ndarray, b: np.ndarray):
    """Collapse parallel rows with the same direction, keeping the tightest offset."""
    if a.shape[0] == 0:
        return a, b
    key = np.round(a, 10)
    order = np.lexsort(np.vstack([b, key.T[::-1]]))
    key_s = key[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = np.any(key_s[1:] != key_s[:-1], axis=1)
    keep = np.sort(order[first])
    return a[keep], b[keep]


def _redundant_lp(a: np.ndarray, b: np.ndarray, tol: float) -> np.ndarray:
    keep = np.ones(a.shape[0], dtype=bool)
    free = [(None, None)] * a.shape[1]
    for i in range(a.shape[0]):
        keep[i] = False
        b_try = b.copy()
        b_try[i] += 1.0
        rows = keep.copy()
        rows[i] = True
        res = _solve_lp(-a[i], a[rows], b_try[rows], free)
        if res.status != 0 or -res.fun > b[i] + tol:
            keep[i] = True
    return keep


def _redundant_hull(a: np.ndarray, b: np.ndarray, z: np.ndarray):
    """Irredundant rows as vertices of the polar of (P - z); None if qhull cannot decide."""
    dual = a / (b - a @ z)[:, None]
    # Work inside the span of the normals so that cylinders stay full-dimensional.
    _, sv, vt = np.linalg.svd(dual, full_matrices=False)
    rank = int(np.sum(sv > sv[0] * 1e-10)) if len(sv) else 0
    if rank < 2:
        return None
    pts = np.vstack([np.zeros(rank), dual @ vt[:rank].T])
    try:
        hull = ConvexHull(pts)
    except QhullError:
        return None
    keep = np.zeros(a.shape[0], dtype=bool)
    verts = hull.vertices[hull.vertices > 0] - 1
    keep[verts] = True
    return keep


def remove_redundant(p: HPolytope, tol: float = EPS_GEOM) -> HPolytope:
    """Drop every row whose removal leaves the set unchanged.

    Large systems with a well-inscribed ball are filtered through the convex
    hull of the polar dual points (qhull); survivors, and small systems, go
    through the per-row LP test: a row is redundant when maximising it over
    the remaining rows (itself relaxed by one unit to keep the LP bounded)
    stays within ``tol`` of its offset.
    """
    c = p.canonical()
    if c.n_rows == 0:
        return c
    z, radius = chebyshev_center(c)
    if radius < -tol:
        return empty_polytope(c.dim)
    a, b = _dedupe(c.a_mat, c.b_vec)
    if a.shape[0] > HULL_MIN_ROWS and radius > HULL_MIN_RADIUS:
        keep = _redundant_hull(a, b, z)
        if keep is not None:
            a, b = a[keep], b[keep]
    keep = _redundant_lp(a, b, tol)
    return HPolytope(a[keep], b[keep])


def _eliminate_last(a: np.ndarray, b: np.ndarray):
    col = a[:, -1]
    pos = col > COEF_TOL
    neg = col < -COEF_TOL
    zer = ~(pos | neg)
    new_a = [a[zer, :-1]]
    new_b = [b[zer]]
    if np.any(pos) and np.any(neg):
        ap = a[pos] / col[pos, None]
        bp = b[pos] / col[pos]
        an = a[neg] / -col[neg, None]
        bn = b[neg] / -col[neg]
        comb_a = (ap[:, None, :-1] + an[None, :, :-1]).reshape(-1, a.shape[1] - 1)
        comb_b = (bp[:, None] + bn[None, :]).reshape(-1)
        new_a.append(comb_a)
        new_b.append(comb_b)
    return np.vstack(new_a), np.concatenate(new_b)


def project_to_states(p: HPolytope, n_keep: int, max_rows: int = MAX_FM_ROWS) -> HPolytope:
    """Orthogonal projection onto the first ``n_keep`` coordinates.

    Trailing coordinates are removed one at a time by Fourier-Motzkin
    elimination, each step followed by redundancy removal.
    """
    if not 0 < n_keep <= p.dim:
        raise ValueError(f"cannot keep {n_keep} of {p.dim} coordinates")
    cur = remove_redundant(p)
    while cur.dim > n_keep:
        if is_empty(cur):
            return empty_polytope(n_keep)
        a, b = cur.a_mat, cur.b_vec
        n_pos = int(np.sum(a[:, -1] > COEF_TOL))
        n_neg = int(np.sum(a[:, -1] < -COEF_TOL))
        if n_pos * n_neg + a.shape[0] > max_rows:
            raise ProjectionError(
                f"eliminating coordinate {cur.dim - 1} would create {n_pos * n_neg} rows "
                f"(cap {max_rows})"
            )
        a, b = _eliminate_last(a, b)
        cur = remove_redundant(HPolytope(a.reshape(-1, cur.dim - 1), b))
        logger.debug("eliminated coordinate, %d rows remain", cur.n_rows)
    return cur


# --- text serialisation --------------------------------------------------------

def dumps(p: HPolytope) -> str:
    """Plain-text form: a header, then one inequality per line (coefficients, offset)."""
    buf = io.StringIO()
    buf.write(f"{TEXT_HEADER} dim={p.dim} rows={p.n_rows}\n")
    for a, b in zip(p.a_mat, p.b_vec):
        buf.write(" ".join(repr(float(v)) for v in a) + " " + repr(float(b)) + "\n")
    return buf.getvalue()


def loads(text: str) -> HPolytope:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith(TEXT_HEADER):
        raise ValueError("missing hpolytope header")
    fields = dict(tok.split("=", 1) for tok in lines[0][len(TEXT_HEADER):].split())
    dim, rows = int(fields["dim"]), int(fields["rows"])
    body = [ln for ln in lines[1:] if not ln.startswith("#")]
    if len(body) != rows:
        raise ValueError(f"expected {rows} rows, found {len(body)}")
    data = np.array([[float(v) for v in ln.split()] for ln in body]).reshape(rows, dim + 1)
    return HPolytope(data[:, :dim], data[:, dim])


def save(p: HPolytope, path) -> None:
    Path(path).write_text(dumps(p))


def load(path) -> HPolytope:
    return loads(Path(path).read_text())
