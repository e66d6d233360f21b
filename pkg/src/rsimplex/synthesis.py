"""Safety controller synthesis over a grid abstraction and its runtime lookup."""
from __future__ import annotations

import io
import json
import struct
import time
import zlib
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import EPS_GEOM
from .abstraction import (AbstractSystem, Quantizer, SymbolicGrid, build_abstraction,
                          build_grid, input_grid)
from .dynamics import ControlSystem
from .geometry import HPolytope, HyperInterval, max_linear

CTL_MAGIC = b"RSCTL\0"
CTL_VERSION = 1


class NoSafeInput(LookupError):
    """The queried state lies outside the controller domain."""


class ControllerFileError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AbstractSafeSet:
    mask: np.ndarray

    @property
    def ids(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    def __contains__(self, cell) -> bool:
        return 0 <= cell < len(self.mask) and bool(self.mask[cell])

    def __len__(self) -> int:
        return int(self.mask.sum())


def abstract_safe_set(grid: SymbolicGrid, s: HPolytope) -> AbstractSafeSet:
    """Cells whose closed interval lies inside ``s`` (support-function vertex test)."""
    if s.dim != grid.dim:
        raise ValueError("grid and safe set dimensions differ")
    s = s.canonical()
    ids = np.arange(grid.n_cells)
    c = grid.centers(ids)
    r = 0.5 * grid.eta
    worst = c @ s.a_mat.T + np.abs(s.a_mat) @ r
    return AbstractSafeSet(np.all(worst <= s.b_vec + EPS_GEOM, axis=1))


@dataclass(frozen=True, eq=False)
class AbstractController:
    """``mask[c, u]`` is True when input u is admissible at cell c.

    ``death_order`` lists safe cells in the order the fixed point removed
    them, useful for diagnosing an empty domain.
    """

    mask: np.ndarray
    inputs: np.ndarray
    death_order: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    @property
    def domain(self) -> np.ndarray:
        return np.any(self.mask, axis=1)

    @property
    def domain_ids(self) -> np.ndarray:
        return np.flatnonzero(self.domain)

    @property
    def is_empty(self) -> bool:
        return not np.any(self.mask)


def usable_pairs(abs_sys: AbstractSystem) -> np.ndarray:
    return ~abs_sys.blocked & abs_sys.tube_ok


def solve_safety(abs_sys: AbstractSystem, safe: AbstractSafeSet) -> AbstractController:
    """Maximal safety fixed point by a worklist over the predecessor index.

    A pair (c, u) counts as usable when it is not blocked and its reach tube
    stayed inside the guard set. Cells are removed until each survivor has a
    usable input whose successors all survive.
    """
    n, k = abs_sys.grid.n_cells, abs_sys.n_inputs
    alive = np.asarray(safe.mask, dtype=bool).copy()
    usable = usable_pairs(abs_sys).reshape(-1)
    indptr, indices = abs_sys.indptr, abs_sys.indices
    edge_pair = np.repeat(np.arange(n * k), np.diff(indptr))
    bad = np.bincount(edge_pair, weights=~alive[indices], minlength=n * k).astype(np.int64)
    good = ((bad == 0) & usable).reshape(n, k).sum(axis=1)

    # Transposed index: predecessors of each cell, as pair ids.
    order = np.argsort(indices, kind="stable")
    pred_pairs = edge_pair[order]
    pred_ptr = np.searchsorted(indices[order], np.arange(n + 1))

    queue = deque(int(c) for c in np.flatnonzero(alive & (good == 0)))
    dead = []
    queued = np.zeros(n, dtype=bool)
    queued[list(queue)] = True
    while queue:
        c = queue.popleft()
        alive[c] = False
        dead.append(c)
        for p in pred_pairs[pred_ptr[c]:pred_ptr[c + 1]]:
            if bad[p] == 0 and usable[p]:
                src = p // k
                good[src] -= 1
                if good[src] == 0 and alive[src] and not queued[src]:
                    queued[src] = True
                    queue.append(int(src))
            bad[p] += 1
    mask = (alive[:, None] & (bad.reshape(n, k) == 0) & usable.reshape(n, k))
    return AbstractController(mask, abs_sys.inputs.copy(), np.asarray(dead, dtype=np.int64))


@dataclass(frozen=True, eq=False)
class RefinedController:
    quantizer: Quantizer
    controller: AbstractController
    meta: dict = field(default_factory=dict)

    @property
    def grid(self) -> SymbolicGrid:
        return self.quantizer.grid

    @property
    def inputs(self) -> np.ndarray:
        return self.controller.inputs

    def cell_inputs(self, cell: int) -> np.ndarray:
        if cell == self.grid.overflow:
            return np.empty(0, dtype=np.int64)
        return np.flatnonzero(self.controller.mask[cell])

    def input_indices(self, x) -> np.ndarray:
        return self.cell_inputs(int(self.quantizer(np.asarray(x, dtype=float))))

    def __call__(self, x) -> np.ndarray:
        """Admissible input values at x (empty outside the domain)."""
        return self.inputs[self.input_indices(x)]

    def in_domain(self, x) -> np.ndarray:
        ids = np.asarray(self.quantizer(np.asarray(x, dtype=float)))
        dom = np.append(self.controller.domain, False)
        return dom[ids]

    def box_in_domain(self, box: HyperInterval) -> bool:
        """Every cell overlapping ``box`` is a domain cell."""
        cells = self.grid.cells_overlapping(box)
        return cells is not None and bool(np.all(self.controller.domain[cells]))

    def choose_index_for_box(self, box: HyperInterval) -> int:
        """Smallest input admissible in every domain cell overlapping ``box``.

        Falls back to the cell of the box centre when those sets do not intersect.
        """
        cells = self.grid.cells_overlapping(box)
        if cells is not None:
            cells = cells[self.controller.domain[cells]]
            if len(cells):
                common = np.all(self.controller.mask[cells], axis=0)
                if np.any(common):
                    return int(np.argmax(common))
        idx = self.input_indices(box.center)
        if len(idx) == 0:
            raise NoSafeInput(f"no safe input for box {box}")
        return int(idx[0])


def refine(cq: AbstractController, grid: SymbolicGrid, meta: dict | None = None) -> RefinedController:
    if cq.mask.shape[0] != grid.n_cells:
        raise ValueError("controller and grid sizes differ")
    return RefinedController(Quantizer(grid), cq, dict(meta or {}))


def choose_input(rc: RefinedController, x) -> np.ndarray:
    """Smallest-index admissible input at x."""
    idx = rc.input_indices(x)
    if len(idx) == 0:
        raise NoSafeInput(f"state {np.asarray(x).tolist()} is outside the controller domain")
    return rc.inputs[idx[0]].copy()


# --- end-to-end grid synthesis ------------------------------------------------------

def bounding_box(p: HPolytope) -> HyperInterval:
    n = p.dim
    lo = np.array([-max_linear(p, -e) for e in np.eye(n)])
    hi = np.array([max_linear(p, e) for e in np.eye(n)])
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("safe set must be bounded to derive grid bounds")
    return HyperInterval(lo, hi)


@dataclass
class GridSynthesis:
    abstraction: AbstractSystem
    safe: AbstractSafeSet
    controller: RefinedController
    stats: dict


def synthesize_grid(sys: ControlSystem, s: HPolytope, eta, tau_c: float, tau_r: float, *,
                    n_inputs=17, bounds: HyperInterval | None = None, **build_kw) -> GridSynthesis:
    """Grid, abstraction, safe cells and maximal safety controller for ``s``."""
    t0 = time.perf_counter()
    bounds = bounds if bounds is not None else bounding_box(s)
    grid = build_grid(bounds, eta)
    inputs = input_grid(sys.input_bounds, n_inputs)
    abs_sys = build_abstraction(sys, grid, inputs, tau_c, tau_r, guard=s, **build_kw)
    safe = abstract_safe_set(grid, s)
    cq = solve_safety(abs_sys, safe)
    meta = {"plant": sys.name, "tau_c": float(tau_c), "tau_r": float(tau_r),
            "max_overshoot": abs_sys.overshoot.max(axis=(0, 1)).tolist() if grid.n_cells else []}
    rc = refine(cq, grid, meta)
    stats = {
        "cells": grid.n_cells,
        "inputs": len(inputs),
        "edges": abs_sys.n_edges,
        "blocked_pairs": int(abs_sys.blocked.sum()),
        "safe_cells": len(safe),
        "domain_cells": int(cq.domain.sum()),
        "wall_time_s": time.perf_counter() - t0,
    }
    return GridSynthesis(abs_sys, safe, rc, stats)


# --- controller file ------------------------------------------------------------------
#
# Layout (little endian): magic "RSCTL\0", u8 version, u32 header length L,
# L bytes of UTF-8 JSON (grid lower/eta/counts, inputs, metadata), then one
# row of ceil(k/8) bytes per cell (np.packbits of the input mask), then a
# u32 CRC32 of everything before it.

def dumps_controller(rc: RefinedController) -> bytes:
    g = rc.grid
    header = {
        "lower": g.lower.tolist(), "eta": g.eta.tolist(), "counts": g.counts.tolist(),
        "inputs": rc.inputs.tolist(), "meta": rc.meta,
    }
    head = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CTL_MAGIC)
    buf.write(struct.pack("<BI", CTL_VERSION, len(head)))
    buf.write(head)
    buf.write(np.packbits(rc.controller.mask, axis=1).tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def loads_controller(data: bytes) -> RefinedController:
    if len(data) < len(CTL_MAGIC) + 9 or not data.startswith(CTL_MAGIC):
        raise ControllerFileError("not a controller file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ControllerFileError("controller file checksum mismatch")
    off = len(CTL_MAGIC)
    version, n_head = struct.unpack_from("<BI", body, off)
    if version != CTL_VERSION:
        raise ControllerFileError(f"unsupported controller version {version}")
    off += 5
    try:
        header = json.loads(body[off:off + n_head].decode())
        grid = SymbolicGrid(header["lower"], header["eta"], header["counts"])
        inputs = np.asarray(header["inputs"], dtype=float).reshape(len(header["inputs"]), -1)
    except (ValueError, KeyError) as exc:
        raise ControllerFileError(f"bad controller header: {exc}") from exc
    off += n_head
    k = len(inputs)
    row = (k + 7) // 8
    packed = np.frombuffer(body, dtype=np.uint8, offset=off)
    if packed.size != grid.n_cells * row:
        raise ControllerFileError("controller body has the wrong size")
    mask = np.unpackbits(packed.reshape(grid.n_cells, row), axis=1, count=k).astype(bool)
    return refine(AbstractController(mask, inputs), grid, header.get("meta", {}))


def save_controller(rc: RefinedController, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_controller(rc))


def load_controller(path) -> RefinedController:
    with open(path, "rb") as fh:
        return loads_controller(fh.read())


def region_csv(rc: RefinedController) -> str:
    """Cell centres with a domain membership flag (columns x1..xn,in_domain)."""
    g = rc.grid
    cols = [f"x{i + 1}" for i in range(g.dim)]
    lines = [",".join(cols + ["in_domain"])]
    centers = g.centers()
    dom = rc.controller.domain
    for c, flag in zip(centers, dom):
        lines.append(",".join(repr(float(v)) for v in c) + f",{int(flag)}")
    return "\n".join(lines) + "\n"
