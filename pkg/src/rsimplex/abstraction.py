"""Finite abstraction of a sampled plant over a uniform grid of cells.

Cells tile the gridded region from its lower corner: cell index j in a
dimension covers [lo + j*eta, lo + (j+1)*eta]. Anything outside the tiled
region is the single overflow symbol, whose id equals the number of cells.

A transition (cell, input) lists every cell overlapped by the reach box at
tau_c or at tau_c + tau_r, or is BLOCKED when either box (or the tube between)
leaves the grid.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import EPS_GEOM
from .dynamics import ControlSystem, IntegrationDiverged, integrate
from .geometry import HPolytope, HyperInterval
from .reach import DEFAULT_SEGMENTS, DEFAULT_STEP, sweep

MAX_CELLS = 20_000_000
BATCH = 4096
ABS_MAGIC = b"RSABS\0"
ABS_VERSION = 1


class GridError(ValueError):
    pass


class AbstractionError(RuntimeError):
    """Reach computation failed for a specific (cell, input) pair."""

    def __init__(self, cell: int, input_index: int, cause: Exception):
        super().__init__(f"reach failed for cell {cell}, input {input_index}: {cause}")
        self.cell = cell
        self.input_index = input_index


@dataclass(frozen=True, eq=False)
class SymbolicGrid:
    lower: np.ndarray
    eta: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).reshape(-1)
        eta = np.asarray(self.eta, dtype=float).reshape(-1)
        counts = np.asarray(self.counts, dtype=np.int64).reshape(-1)
        if not (len(lo) == len(eta) == len(counts)):
            raise GridError("lower, eta and counts must have equal length")
        if np.any(eta <= 0) or np.any(counts < 1):
            raise GridError("eta must be positive and every dimension needs a cell")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "counts", counts)
        # Row-major: the last dimension varies fastest.
        strides = np.ones(len(counts), dtype=np.int64)
        for i in range(len(counts) - 2, -1, -1):
            strides[i] = strides[i + 1] * counts[i + 1]
        object.__setattr__(self, "strides", strides)

    @property
    def dim(self) -> int:
        return len(self.eta)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.counts))

    @property
    def overflow(self) -> int:
        return self.n_cells

    @property
    def upper(self) -> np.ndarray:
        return self.lower + self.counts * self.eta

    @property
    def region(self) -> HyperInterval:
        return HyperInterval(self.lower, self.upper)

    def unravel(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        return (ids[..., None] // self.strides) % self.counts

    def ravel(self, idx) -> np.ndarray:
        return np.asarray(idx, dtype=np.int64) @ self.strides

    def cell_lower(self, ids) -> np.ndarray:
        return self.lower + self.unravel(ids) * self.eta

    def cell_upper(self, ids) -> np.ndarray:
        return self.lower + (self.unravel(ids) + 1) * self.eta

    def centers(self, ids=None) -> np.ndarray:
        if ids is None:
            ids = np.arange(self.n_cells)
        return self.lower + (self.unravel(ids) + 0.5) * self.eta

    def cell_box(self, cell: int) -> HyperInterval:
        if not 0 <= cell < self.n_cells:
            raise GridError(f"cell {cell} is not an interior cell")
        return HyperInterval(self.cell_lower(cell), self.cell_upper(cell))

    def index_of(self, x) -> np.ndarray:
        """Per-dimension cell index (may fall outside [0, counts))."""
        t = (np.asarray(x, dtype=float) - self.lower) / self.eta
        j = np.ceil(t).astype(np.int64) - 1
        # The lower face of the grid belongs to cell 0.
        return np.where(t == 0, 0, j)

    def quantize(self, x) -> np.ndarray:
        """Cell id of each point (overflow outside the grid); faces go to the smaller index."""
        j = self.index_of(x)
        inside = np.all((j >= 0) & (j < self.counts), axis=-1)
        ids = np.where(inside, np.clip(j, 0, self.counts - 1) @ self.strides, self.overflow)
        return ids if ids.ndim else int(ids)

    def index_range(self, lower, upper, tol: float = EPS_GEOM):
        """Index bounds of cells overlapping boxes, ignoring contact thinner than ``tol``.

        Returns (j_lo, j_hi, inside) where inside is False if a box leaves the grid.
        """
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        j_lo = np.floor((lower - self.lower + tol) / self.eta).astype(np.int64)
        j_hi = np.ceil((upper - self.lower - tol) / self.eta).astype(np.int64) - 1
        # Boxes thinner than 2 tol sitting on a face still own one cell.
        thin = j_hi < j_lo
        if np.any(thin):
            j_mid = self.index_of(0.5 * (lower + upper))
            j_lo = np.where(thin, j_mid, j_lo)
            j_hi = np.where(thin, j_mid, j_hi)
        inside = np.all((lower >= self.lower - tol) & (upper <= self.upper + tol), axis=-1)
        inside &= np.all((j_lo >= 0) & (j_hi < self.counts), axis=-1)
        return j_lo, j_hi, inside

    def cells_in_range(self, j_lo, j_hi) -> np.ndarray:
        axes = [np.arange(a, b + 1) for a, b in zip(j_lo, j_hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.sort(sum(m.reshape(-1) * s for m, s in zip(mesh, self.strides)))

    def cells_overlapping(self, box: HyperInterval):
        """Sorted ids of cells overlapping ``box``, or None if it leaves the grid."""
        j_lo, j_hi, inside = self.index_range(box.lower, box.upper)
        if not inside:
            return None
        return self.cells_in_range(j_lo, j_hi)


def build_grid(bounds: HyperInterval, eta, max_cells: int = MAX_CELLS) -> SymbolicGrid:
    """Tile ``bounds`` with cells of size ``eta``; a partial last slice is left to overflow."""
    eta = np.asarray(eta, dtype=float).reshape(-1)
    if eta.shape != (bounds.dim,):
        raise GridError(f"eta must have {bounds.dim} components")
    if np.any(eta <= 0) or not np.all(np.isfinite(eta)):
        raise GridError("eta must be positive and finite")
    width = bounds.upper - bounds.lower
    if np.any(width <= 0):
        raise GridError("grid bounds must have positive volume")
    counts = np.floor(width / eta + 1e-9).astype(np.int64)
    if np.any(counts < 1):
        raise GridError("eta exceeds the bounds in some dimension")
    total = math.prod(int(c) for c in counts)
    if total > max_cells:
        raise GridError(f"grid needs {total} cells, cap is {max_cells}")
    return SymbolicGrid(bounds.lower, eta, counts)


@dataclass(frozen=True, eq=False)
class Quantizer:
    grid: SymbolicGrid

    def __call__(self, x):
        return self.grid.quantize(x)

    def preimage(self, cell: int) -> HyperInterval:
        return self.grid.cell_box(cell)


BLOCKED = None


@dataclass(frozen=True, eq=False)
class AbstractSystem:
    """Transitions of every (cell, input) pair in CSR form.

    Pair p = cell * n_inputs + input; its successors are
    ``indices[indptr[p]:indptr[p+1]]`` (sorted, empty when blocked).
    ``tube_ok[c, u]`` records whether the reach tube stayed inside the guard
    set given at build time (all True without a guard). ``overshoot`` holds
    how far the tube exceeds the hull of the cell and both endpoint boxes.
    """

    grid: SymbolicGrid
    inputs: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    blocked: np.ndarray
    tube_ok: np.ndarray
    overshoot: np.ndarray
    tau_c: float = 0.0
    tau_r: float = 0.0

    @property
    def n_inputs(self) -> int:
        return len(self.inputs)

    def post(self, cell: int, u: int):
        """Successor ids, or BLOCKED (None)."""
        if cell == self.grid.overflow:
            return BLOCKED
        if self.blocked[cell, u]:
            return BLOCKED
        p = cell * self.n_inputs + u
        return self.indices[self.indptr[p]:self.indptr[p + 1]]

    @property
    def n_edges(self) -> int:
        return len(self.indices)

    @classmethod
    def from_lists(cls, grid: SymbolicGrid, inputs, successors, tau_c=0.0, tau_r=0.0):
        """Build from ``successors[cell][u]`` given as id lists or BLOCKED."""
        inputs = np.asarray(inputs, dtype=float).reshape(len(successors[0]) if successors else 0, -1)
        n, k = grid.n_cells, len(inputs)
        blocked = np.zeros((n, k), dtype=bool)
        rows = []
        for c in range(n):
            for u in range(k):
                s = successors[c][u]
                if s is BLOCKED:
                    blocked[c, u] = True
                    rows.append(np.empty(0, dtype=np.int64))
                else:
                    rows.append(np.unique(np.asarray(s, dtype=np.int64)))
        indptr = np.concatenate([[0], np.cumsum([len(r) for r in rows])]).astype(np.int64)
        indices = np.concatenate(rows) if rows else np.empty(0, dtype=np.int64)
        return cls(grid, inputs, indptr, indices.astype(np.int64), blocked,
                   np.ones((n, k), dtype=bool), np.zeros((n, k, grid.dim)), tau_c, tau_r)

    def same_as(self, other: "AbstractSystem") -> bool:
        return dumps_abstraction(self) == dumps_abstraction(other)


def input_grid(bounds: HyperInterval, counts) -> np.ndarray:
    """Uniform grid of ``counts[i]`` values per input dimension, endpoints included."""
    counts = np.broadcast_to(np.asarray(counts, dtype=int), (bounds.dim,))
    axes = [np.linspace(lo, hi, c) if c > 1 else np.array([0.5 * (lo + hi)])
            for lo, hi, c in zip(bounds.lower, bounds.upper, counts)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=-1)


def _horizon_samples(tau_c: float, tau_r: float, n_seg: int):
    m = tau_r / tau_c
    if tau_c <= 0 or tau_r < 0 or abs(m - round(m)) > 1e-9:
        raise ValueError("tau_r must be a non-negative integer multiple of tau_c")
    return n_seg, n_seg * (int(round(m)) + 1)


def _transitions_for_input(sys, grid, cells, u, tau_c, tau_r, n_seg, h, guard):
    """Successor ranges, blocked flags, tube flags and overshoot for a batch of cells."""
    i_c, n_samples = _horizon_samples(tau_c, tau_r, n_seg)
    lo = grid.cell_lower(cells)
    hi = grid.cell_upper(cells)
    sw = sweep(sys, lo, hi, u, tau_c + tau_r, n_samples, h)
    ranges = []
    inside = ~sw.overflow
    for i in (i_c, n_samples):
        j_lo, j_hi, ok = grid.index_range(sw.lower[i], sw.upper[i])
        ranges.append((j_lo, j_hi))
        inside &= ok
    seg_lo = sw.seg_lower.min(axis=0)
    seg_hi = sw.seg_upper.max(axis=0)
    inside &= np.all((seg_lo >= grid.lower - EPS_GEOM) & (seg_hi <= grid.upper + EPS_GEOM), axis=-1)
    if guard is None:
        tube_ok = np.ones(len(cells), dtype=bool)
    else:
        a, b = guard.a_mat, guard.b_vec
        c = 0.5 * (sw.seg_lower + sw.seg_upper)
        r = 0.5 * (sw.seg_upper - sw.seg_lower)
        slack = b - (c @ a.T + r @ np.abs(a).T)
        tube_ok = np.all(slack >= -EPS_GEOM, axis=(0, 2))
    hull_lo = np.minimum.reduce([lo, sw.lower[i_c], sw.lower[n_samples]])
    hull_hi = np.maximum.reduce([hi, sw.upper[i_c], sw.upper[n_samples]])
    over = np.maximum(np.maximum(hull_lo - seg_lo, seg_hi - hull_hi), 0.0)
    return ranges, inside, tube_ok, over


def compute_post(sys: ControlSystem, grid: SymbolicGrid, cell: int, u, tau_c: float, tau_r: float,
                 n_seg: int = DEFAULT_SEGMENTS, h: float = DEFAULT_STEP):
    """Sorted successor ids of one (cell, input) pair, or BLOCKED."""
    if not 0 <= cell < grid.n_cells:
        raise GridError(f"cell {cell} is not an interior cell")
    cells = np.array([cell])
    ranges, inside, _, _ = _transitions_for_input(sys, grid, cells, np.asarray(u, dtype=float),
                                                  tau_c, tau_r, n_seg, h, None)
    if not inside[0]:
        return BLOCKED
    ids = [grid.cells_in_range(j_lo[0], j_hi[0]) for j_lo, j_hi in ranges]
    return np.union1d(*ids)


def build_abstraction(sys: ControlSystem, grid: SymbolicGrid, inputs, tau_c: float, tau_r: float, *,
                      guard: HPolytope | None = None, n_seg: int = DEFAULT_SEGMENTS,
                      h: float = DEFAULT_STEP, batch: int = BATCH) -> AbstractSystem:
    """Transitions of every (interior cell, input) pair.

    With ``guard`` set, ``tube_ok`` marks pairs whose whole reach tube over
    [0, tau_c + tau_r] lies inside it.
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    if inputs.shape[1] != sys.input_dim:
        raise ValueError(f"inputs must have {sys.input_dim} columns")
    for u in inputs:
        sys.check_input(u)
    _horizon_samples(tau_c, tau_r, n_seg)
    if guard is not None:
        guard = guard.canonical()
    n, k = grid.n_cells, len(inputs)
    blocked = np.zeros((n, k), dtype=bool)
    tube_ok = np.zeros((n, k), dtype=bool)
    overshoot = np.zeros((n, k, grid.dim))
    lo_idx = np.zeros((2, n, k, grid.dim), dtype=np.int64)
    hi_idx = np.zeros((2, n, k, grid.dim), dtype=np.int64)
    for start in range(0, n, batch):
        cells = np.arange(start, min(n, start + batch))
        for ui, u in enumerate(inputs):
            try:
                ranges, inside, ok, over = _transitions_for_input(sys, grid, cells, u, tau_c, tau_r, n_seg, h, guard)
            except (FloatingPointError, IntegrationDiverged) as exc:
                bad = _first_bad_cell(sys, grid, cells, u, tau_c, tau_r, n_seg, h)
                raise AbstractionError(bad, ui, exc) from exc
            blocked[cells, ui] = ~inside
            tube_ok[cells, ui] = ok & inside
            overshoot[cells, ui] = over
            for hz, (j_lo, j_hi) in enumerate(ranges):
                lo_idx[hz, cells, ui] = j_lo
                hi_idx[hz, cells, ui] = j_hi
    counts = np.zeros(n * k, dtype=np.int64)
    rows = []
    for p in range(n * k):
        c, ui = divmod(p, k)
        if blocked[c, ui]:
            rows.append(np.empty(0, dtype=np.int64))
            continue
        a = grid.cells_in_range(lo_idx[0, c, ui], hi_idx[0, c, ui])
        b = grid.cells_in_range(lo_idx[1, c, ui], hi_idx[1, c, ui])
        row = np.union1d(a, b)
        rows.append(row)
        counts[p] = len(row)
    indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    indices = np.concatenate(rows).astype(np.int64) if rows else np.empty(0, dtype=np.int64)
    overshoot[blocked] = 0.0
    return AbstractSystem(grid, inputs, indptr, indices, blocked, tube_ok, overshoot,
                          float(tau_c), float(tau_r))


def _first_bad_cell(sys, grid, cells, u, tau_c, tau_r, n_seg, h) -> int:
    for c in cells:
        try:
            _transitions_for_input(sys, grid, np.array([c]), u, tau_c, tau_r, n_seg, h, None)
        except (FloatingPointError, IntegrationDiverged):
            return int(c)
    return int(cells[0])


# --- feedback-refinement audit ----------------------------------------------------

@dataclass
class RefinementReport:
    n_checked: int = 0
    n_skipped: int = 0
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def check_refinement(sys: ControlSystem, samples, abs_sys: AbstractSystem, q: Quantizer,
                     input_indices=None, h: float = DEFAULT_STEP) -> RefinementReport:
    """Check that quantized simulated successors lie in the abstract Post.

    Each sample x is paired with ``input_indices[i]`` (or with every input
    when None). Pairs whose abstract transition is BLOCKED, or whose sample
    quantizes to overflow, are skipped. Violations are tuples
    (sample index, input index, horizon, observed cell).
    """
    xs = np.atleast_2d(np.asarray(samples, dtype=float))
    k = abs_sys.n_inputs
    if input_indices is None:
        pair_x = np.repeat(np.arange(len(xs)), k)
        pair_u = np.tile(np.arange(k), len(xs))
    else:
        pair_x = np.arange(len(xs))
        pair_u = np.asarray(input_indices, dtype=np.int64).reshape(-1)
    cells = q(xs)
    report = RefinementReport()
    for ui in range(k):
        sel = pair_x[pair_u == ui]
        c = cells[sel]
        keep = c != q.grid.overflow
        keep[keep] = ~abs_sys.blocked[c[keep], ui]
        report.n_skipped += int(np.sum(~keep))
        sel, c = sel[keep], c[keep]
        if len(sel) == 0:
            continue
        u = np.broadcast_to(abs_sys.inputs[ui], (len(sel), sys.input_dim))
        x1 = integrate(sys, xs[sel], u, abs_sys.tau_c, h)
        x2 = integrate(sys, x1, u, abs_sys.tau_r, h) if abs_sys.tau_r > 0 else x1
        for hz, xe in (("tau_c", x1), ("tau_c+tau_r", x2)):
            got = q(xe)
            for i, cell, g in zip(sel, c, np.atleast_1d(got)):
                succ = abs_sys.post(int(cell), ui)
                if g == q.grid.overflow or not _member(succ, int(g)):
                    report.violations.append((int(i), ui, hz, int(g)))
        report.n_checked += len(sel)
    return report


def _member(sorted_ids, x: int) -> bool:
    j = np.searchsorted(sorted_ids, x)
    return j < len(sorted_ids) and sorted_ids[j] == x


# --- serialization ------------------------------------------------------------------
#
# Binary layout (little endian):
#   magic "RSABS\0", u8 version, u32 n (state dim), u32 p (input dim), u32 k (inputs)
#   f64[n] lower, f64[n] eta, i64[n] counts, f64 tau_c, f64 tau_r, f64[k*p] inputs
#   u8[N*k] blocked, u8[N*k] tube_ok, f64[N*k*n] overshoot
#   i64[N*k+1] indptr, i64[E] indices

def dumps_abstraction(a: AbstractSystem) -> bytes:
    g = a.grid
    buf = io.BytesIO()
    buf.write(ABS_MAGIC)
    buf.write(struct.pack("<BIII", ABS_VERSION, g.dim, a.inputs.shape[1], a.n_inputs))
    for arr, dt in ((g.lower, "<f8"), (g.eta, "<f8"), (g.counts, "<i8")):
        buf.write(np.asarray(arr, dtype=dt).tobytes())
    buf.write(struct.pack("<dd", a.tau_c, a.tau_r))
    buf.write(np.asarray(a.inputs, dtype="<f8").tobytes())
    buf.write(a.blocked.astype(np.uint8).tobytes())
    buf.write(a.tube_ok.astype(np.uint8).tobytes())
    buf.write(np.asarray(a.overshoot, dtype="<f8").tobytes())
    buf.write(np.asarray(a.indptr, dtype="<i8").tobytes())
    buf.write(np.asarray(a.indices, dtype="<i8").tobytes())
    return buf.getvalue()


def loads_abstraction(data: bytes) -> AbstractSystem:
    if not data.startswith(ABS_MAGIC):
        raise ValueError("not an abstraction file")
    off = len(ABS_MAGIC)
    version, n, p, k = struct.unpack_from("<BIII", data, off)
    if version != ABS_VERSION:
        raise ValueError(f"unsupported abstraction version {version}")
    off += struct.calcsize("<BIII")

    def take(count, dt):
        nonlocal off
        arr = np.frombuffer(data, dtype=dt, count=count, offset=off)
        off += arr.nbytes
        return arr.copy()

    lower, eta, counts = take(n, "<f8"), take(n, "<f8"), take(n, "<i8")
    tau_c, tau_r = struct.unpack_from("<dd", data, off)
    off += 16
    grid = SymbolicGrid(lower, eta, counts)
    big_n = grid.n_cells
    inputs = take(k * p, "<f8").reshape(k, p)
    blocked = take(big_n * k, np.uint8).reshape(big_n, k).astype(bool)
    tube_ok = take(big_n * k, np.uint8).reshape(big_n, k).astype(bool)
    overshoot = take(big_n * k * n, "<f8").reshape(big_n, k, n)
    indptr = take(big_n * k + 1, "<i8")
    indices = take(int(indptr[-1]), "<i8")
    if off != len(data):
        raise ValueError("trailing bytes in abstraction file")
    return AbstractSystem(grid, inputs, indptr, indices, blocked, tube_ok, overshoot, tau_c, tau_r)


def export_text(a: AbstractSystem) -> str:
    """Readable listing for small instances: one line per (cell, input)."""
    lines = [f"# abstraction v{ABS_VERSION} cells={a.grid.n_cells} inputs={a.n_inputs} "
             f"tau_c={a.tau_c!r} tau_r={a.tau_r!r}"]
    for c in range(a.grid.n_cells):
        for ui in range(a.n_inputs):
            succ = a.post(c, ui)
            rhs = "BLOCKED" if succ is BLOCKED else " ".join(str(int(s)) for s in succ)
            lines.append(f"{c} {ui}: {rhs}")
    return "\n".join(lines) + "\n"
