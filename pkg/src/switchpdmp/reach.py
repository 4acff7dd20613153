"""Grid approximations of positive orbits, the accessible set and
omega-limit sets under bang-bang switching.

Each occupied cell is represented by its centre, snapped when the cell is
first occupied. Expansion flows every representative under every regime in
micro-steps of length ``tau`` and occupies each cell the trace enters, for up
to ``DEFAULT_TRACE_CELLS`` cell changes. A trace gives up after ``max_sub``
micro-steps without leaving a cell (near equilibria). Tracing through several
cells before snapping keeps the transverse drift of curved orbits, which
one-cell hops round away.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _vm
from .expr import DomainError
from .flow import DEFAULT_STEP
from .simulate import default_threads
from .system import Box, SwitchingSystem

__all__ = [
    "DEFAULT_RESOLUTION",
    "ReachGrid",
    "ResolutionTooCoarse",
    "accessible_set",
    "default_tau",
    "invariance_fraction",
    "omega_limit",
    "reachable",
    "sobol_starts",
]

DEFAULT_RESOLUTION = 128
DEFAULT_STARTS = 32
DEFAULT_MAX_SUB = 1024
DEFAULT_TRACE_CELLS = 4


class ResolutionTooCoarse(ValueError):
    """The micro-step moves a point across two or more cells."""


@dataclass
class ReachGrid:
    """Occupancy of a regular grid over the box.

    ``occupied`` is stored flat in row-major order (last axis fastest);
    ``reps`` holds the representative point of each occupied cell and NaN
    elsewhere.
    """

    box: Box
    resolution: int
    occupied: np.ndarray
    reps: np.ndarray
    tau: float
    h: float
    starts: np.ndarray
    iterations: int = 0
    converged: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.box.d

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.resolution,) * self.d

    @property
    def cell(self) -> np.ndarray:
        return self.box.widths / self.resolution

    @property
    def n_occupied(self) -> int:
        return int(self.occupied.sum())

    @property
    def fraction(self) -> float:
        return self.n_occupied / self.occupied.size

    def mask(self) -> np.ndarray:
        return self.occupied.reshape(self.shape)

    def centers(self) -> np.ndarray:
        """Cell centres in flat order, shape ``(R**d, d)``."""
        axes = [lo + (np.arange(self.resolution) + 0.5) * w for lo, w in zip(self.box.lo, self.cell)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.column_stack([m.ravel() for m in mesh])

    def occupied_centers(self) -> np.ndarray:
        return self.centers()[self.occupied]

    def cell_index(self, x) -> int:
        lo = np.asarray(self.box.lo)
        return int(_vm.cell_of(np.asarray(x, dtype=float), lo, self.cell, np.full(self.d, self.resolution)))

    def contains(self, x) -> bool:
        k = self.cell_index(x)
        return k >= 0 and bool(self.occupied[k])

    def dilate(self, k: int = 1) -> "ReachGrid":
        """Occupy every cell within ``k`` cells (sup norm) of an occupied one."""
        m = self.mask()
        out = m.copy()
        for _ in range(k):
            cur = out.copy()
            for ax in range(self.d):
                if self.box.wrap[ax]:
                    cur |= np.roll(out, 1, axis=ax) | np.roll(out, -1, axis=ax)
                else:
                    sl_lo = [slice(None)] * self.d
                    sl_hi = [slice(None)] * self.d
                    sl_lo[ax] = slice(1, None)
                    sl_hi[ax] = slice(None, -1)
                    cur[tuple(sl_lo)] |= out[tuple(sl_hi)]
                    cur[tuple(sl_hi)] |= out[tuple(sl_lo)]
                out = cur.copy()
        return self._with(out.ravel())

    def coarsen(self, factor: int = 2) -> "ReachGrid":
        """A cell of the coarse grid is occupied if any sub-cell is."""
        if self.resolution % factor:
            raise ValueError("resolution must be divisible by the factor")
        r = self.resolution // factor
        m = self.mask().reshape(sum(((r, factor) for _ in range(self.d)), ()))
        coarse = m.any(axis=tuple(range(1, 2 * self.d, 2)))
        return ReachGrid(
            self.box, r, coarse.ravel(), np.full((r**self.d, self.d), np.nan), self.tau, self.h, self.starts,
            self.iterations, self.converged, dict(self.meta),
        )

    def symmetric_difference(self, other: "ReachGrid") -> int:
        if other.resolution != self.resolution or other.box != self.box:
            raise ValueError("grids differ")
        return int(np.sum(self.occupied ^ other.occupied))

    def _with(self, occupied: np.ndarray) -> "ReachGrid":
        reps = np.where(occupied[:, None], self.reps, np.nan)
        return ReachGrid(
            self.box, self.resolution, occupied, reps, self.tau, self.h, self.starts,
            self.iterations, self.converged, dict(self.meta),
        )

    def to_csv(self) -> str:
        """Columns ``x1..xd, occupied`` for every cell."""
        buf = io.StringIO(newline="")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"x{c + 1}" for c in range(self.d)] + ["occupied"])
        for x, o in zip(self.centers(), self.occupied):
            w.writerow([repr(float(v)) for v in x] + [int(o)])
        return buf.getvalue()

    def to_pgm(self) -> bytes:
        """Binary greymap: occupied cells black, first axis to the right,
        second axis upward."""
        if self.d > 2:
            raise ValueError("PGM export needs d <= 2")
        m = self.mask()
        img = m[:, None] if self.d == 1 else m
        rows = np.where(img.T[::-1], 0, 255).astype(np.uint8)
        header = f"P5\n{rows.shape[1]} {rows.shape[0]}\n255\n".encode("ascii")
        return header + rows.tobytes()


def default_tau(sys: SwitchingSystem, resolution: int) -> float:
    """Half a cell at the speed bound."""
    cell = float(np.min(sys.box.widths / resolution))
    c_sp = sys.speed_bound
    return 0.5 * cell / c_sp if c_sp > 0 else cell


def _setup(sys: SwitchingSystem, resolution: int, tau: Optional[float], h: float):
    if sys.d >= 4:
        raise ValueError("reachability grids are limited to d <= 3")
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    if sys.program is None:
        raise ValueError("reachability needs expression fields")
    tau = default_tau(sys, resolution) if tau is None else float(tau)
    if not tau > 0:
        raise ValueError("tau must be positive")
    cell = sys.box.widths / resolution
    move = tau * sys.speed_bound
    if move >= 2.0 * cell.min():
        raise ResolutionTooCoarse(f"tau * C_sp = {move:.3g} spans >= 2 cells of width {cell.min():.3g}")
    if move >= float(np.sqrt(np.sum(cell**2))):
        warnings.warn("tau * C_sp exceeds the cell diagonal; cells may be skipped", stacklevel=3)
    return tau, min(h, tau), cell


def _bfs(
    sys: SwitchingSystem,
    starts: np.ndarray,
    resolution: int,
    tau: float,
    h: float,
    cell: np.ndarray,
    max_iters: int,
    max_sub: int,
    trace_cells: int = None,
) -> ReachGrid:
    trace_cells = DEFAULT_TRACE_CELLS if trace_cells is None else trace_cells
    prog = sys.program
    d = sys.d
    lo, hi, wrap, margin = sys.box.arrays()
    n_cells = np.full(d, resolution, dtype=np.int64)
    total = resolution**d
    occupied = np.zeros(total, dtype=bool)
    reps = np.full((total, d), np.nan)
    shape = (resolution,) * d

    def center(k):
        return lo + (np.asarray(np.unravel_index(k, shape)) + 0.5) * cell

    # Each new cell is expanded from its centre, but every trace runs
    # through several cells before snapping so that transverse drift on
    # curved orbits survives the rounding. Starts are traced from the
    # exact point as well as the centre.
    src_cells: list = []
    src_points: list = []
    for x in starts:
        k = int(_vm.cell_of(x, lo, cell, n_cells))
        if k < 0:
            raise ValueError(f"start {x.tolist()} is outside the box")
        if not occupied[k]:
            occupied[k] = True
            reps[k] = center(k)
            src_cells.append(k)
            src_points.append(reps[k])
        src_cells.append(k)
        src_points.append(np.asarray(x, dtype=float))
    it = 0
    while src_cells and it < max_iters:
        src = np.asarray(src_cells, dtype=np.int64)
        pts = np.asarray(src_points, dtype=float)
        visited = _vm.reach_trace(
            *prog.arrays(), d, sys.n_regimes, pts, src, tau, h,
            lo, hi, wrap, margin, cell, n_cells, max_sub, trace_cells, prog.max_stack,
        )
        src_cells, src_points = [], []
        for k in np.unique(visited[visited >= 0]):
            k = int(k)
            if not occupied[k]:
                occupied[k] = True
                reps[k] = center(k)
                src_cells.append(k)
                src_points.append(reps[k])
        it += 1
    frontier = src_cells
    return ReachGrid(sys.box, resolution, occupied, reps, tau, h, np.array(starts), it, not frontier)


def reachable(
    sys: SwitchingSystem,
    x0,
    resolution: int = DEFAULT_RESOLUTION,
    tau: Optional[float] = None,
    max_iters: Optional[int] = None,
    h: float = DEFAULT_STEP,
    max_sub: int = DEFAULT_MAX_SUB,
) -> ReachGrid:
    """Grid estimate of the closure of the positive orbit of ``x0``.

    Expands breadth-first until no new cell appears or ``max_iters``
    sweeps (default ``10 * resolution``).
    """
    tau, h, cell = _setup(sys, resolution, tau, h)
    max_iters = 10 * resolution if max_iters is None else int(max_iters)
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    return _bfs(sys, x0, resolution, tau, h, cell, max_iters, max_sub)


def sobol_starts(box: Box, n: int = DEFAULT_STARTS) -> np.ndarray:
    """First ``n`` points of the unscrambled Sobol sequence mapped to the box."""
    from scipy.stats import qmc

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # balance warning for non powers of two
        u = qmc.Sobol(box.d, scramble=False).random(n)
    return np.asarray(box.lo) + u * box.widths


def accessible_set(
    sys: SwitchingSystem,
    starts=None,
    resolution: int = DEFAULT_RESOLUTION,
    tau: Optional[float] = None,
    max_iters: Optional[int] = None,
    h: float = DEFAULT_STEP,
    closure: int = 1,
    n_starts: int = DEFAULT_STARTS,
    threads: Optional[int] = None,
    max_sub: int = DEFAULT_MAX_SUB,
) -> ReachGrid:
    """Intersection of the reachable grids from several starts.

    Each per-start grid is dilated by ``closure`` cells before intersecting,
    the grid-scale analogue of taking closures: an invariant manifold lying
    on a cell boundary is otherwise approached from different sides by
    different starts and the intersection comes out empty.
    """
    starts = sobol_starts(sys.box, n_starts) if starts is None else np.atleast_2d(np.asarray(starts, dtype=float))
    if len(starts) < 1:
        raise ValueError("need at least one start point")
    tau, h, cell = _setup(sys, resolution, tau, h)
    max_iters = 10 * resolution if max_iters is None else int(max_iters)
    threads = default_threads() if threads is None else max(1, int(threads))

    def one(x):
        return _bfs(sys, x[None, :], resolution, tau, h, cell, max_iters, max_sub)

    if threads == 1:
        grids = [one(x) for x in starts]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            grids = list(pool.map(one, starts))
    occ = np.ones(resolution**sys.d, dtype=bool)
    for g in grids:
        occ &= g.dilate(closure).occupied if closure > 0 else g.occupied
    reps = np.full((occ.size, sys.d), np.nan)
    for g in grids:
        take = occ & np.isnan(reps[:, 0]) & g.occupied
        reps[take] = g.reps[take]
    return ReachGrid(
        sys.box, resolution, occ, reps, tau, h, starts,
        max(g.iterations for g in grids), all(g.converged for g in grids),
        {"closure": closure, "per_start_occupied": [g.n_occupied for g in grids]},
    )


def omega_limit(
    sys: SwitchingSystem,
    x0,
    resolution: int = DEFAULT_RESOLUTION,
    tau: Optional[float] = None,
    burn_in_time: float = 10.0,
    max_iters: Optional[int] = None,
    h: float = DEFAULT_STEP,
    max_sub: int = DEFAULT_MAX_SUB,
) -> ReachGrid:
    """Grid estimate of the omega-limit set of ``x0``.

    First the set of states reachable at time exactly ``burn_in_time`` is
    approximated by switching on a uniform time lattice (at most one cell
    of travel per lattice step, one representative per cell). The
    reachable grid from all those representatives is returned; cells only
    visited before the burn-in are dropped.
    """
    tau, h, cell = _setup(sys, resolution, tau, h)
    max_iters = 10 * resolution if max_iters is None else int(max_iters)
    if burn_in_time < 0:
        raise ValueError("burn_in_time must be >= 0")
    prog = sys.program
    d = sys.d
    lo, hi, wrap, margin = sys.box.arrays()
    n_cells = np.full(d, resolution, dtype=np.int64)
    pts = np.atleast_2d(np.asarray(x0, dtype=float))
    c_sp = sys.speed_bound
    n_lat = max(1, math.ceil(burn_in_time * c_sp / cell.min())) if burn_in_time > 0 else 0
    delta = burn_in_time / n_lat if n_lat else 0.0
    for _ in range(n_lat):
        moved = []
        for i in range(sys.n_regimes):
            out, status = _vm.flow_batch(*prog.arrays(), i, d, pts, delta, h, lo, hi, wrap, margin, prog.max_stack)
            if np.any(status != _vm.OK):
                raise DomainError("flow not finite during burn-in")
            moved.append(out)
        cand = np.vstack(moved)
        cells = np.array([_vm.cell_of(p, lo, cell, n_cells) for p in cand])
        cand, cells = cand[cells >= 0], cells[cells >= 0]
        _, first = np.unique(cells, return_index=True)
        pts = cand[np.sort(first)]
    grid = _bfs(sys, pts, resolution, tau, h, cell, max_iters, max_sub)
    grid.meta.update({"burn_in_time": burn_in_time, "burn_in_cells": len(pts), "origin": np.asarray(x0).tolist()})
    return grid


def invariance_fraction(sys: SwitchingSystem, grid: ReachGrid, tau: Optional[float] = None, h: float = DEFAULT_STEP) -> float:
    """Share of occupied cells whose centre, flowed for ``tau`` by each
    regime, lands in an occupied cell or next to one."""
    tau = grid.tau if tau is None else tau
    prog = sys.program
    lo, hi, wrap, margin = sys.box.arrays()
    near = grid.dilate(1)
    centers = grid.occupied_centers()
    if len(centers) == 0:
        return 1.0
    ok = np.ones(len(centers), dtype=bool)
    for i in range(sys.n_regimes):
        out, _ = _vm.flow_batch(*prog.arrays(), i, sys.d, centers, tau, min(h, tau), lo, hi, wrap, margin, prog.max_stack)
        ok &= np.array([near.contains(p) for p in out])
    return float(ok.mean())
