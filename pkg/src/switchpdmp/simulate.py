"""Thinning (uniformization) sampler for the embedded chain and the
continuous-time switching process, plus seeded ensembles.

Random streams
--------------
Every path consumes a stream of uniforms in pairs: the first of a pair gives
the waiting time ``-log(1 - u) / lambda_bar``, the second picks the next
regime from the row of ``Q`` at the landing point. A stream is a numpy
``PCG64`` generator; replica ``k`` of an ensemble with master seed ``s`` uses
``SeedSequence(entropy=s, spawn_key=(k,))`` (see :func:`replica_rng`).
Stream layout is versioned by :data:`STREAM_VERSION`.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence, Union

import numpy as np

from . import _vm
from .expr import DomainError
from .flow import DEFAULT_STEP
from .system import SwitchingSystem, q_matrix

__all__ = [
    "EnsembleError",
    "HybridPath",
    "STREAM_VERSION",
    "embedded_step",
    "ensemble",
    "make_rng",
    "replica_rng",
    "sample_embedded",
    "sample_path",
    "sojourn_times",
]

STREAM_VERSION = "pcg64-seedseq-v1"
CHUNK = 8192

SeedLike = Union[int, np.random.Generator, None]


def make_rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        raise ValueError("a seed is required for reproducible sampling")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def replica_rng(master_seed: int, k: int) -> np.random.Generator:
    """Independent stream ``k`` derived from ``master_seed``."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(k),))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass
class HybridPath:
    """A sampled path: the jump skeleton and optional dense samples.

    ``jump_times[0] = 0`` and ``(positions[0], regimes[0])`` is the initial
    state; entry ``k > 0`` is the ``k``-th proposal time with the post-jump
    state. Phantom proposals are kept; ``true_switch`` flags real changes.
    Dense rows carry the right-continuous state: a row at a jump time holds
    the new regime.
    """

    d: int
    jump_times: np.ndarray
    positions: np.ndarray
    regimes: np.ndarray
    true_switch: np.ndarray
    horizon: float = math.inf
    dense_t: Optional[np.ndarray] = None
    dense_x: Optional[np.ndarray] = None
    dense_regime: Optional[np.ndarray] = None
    dense_jump: Optional[np.ndarray] = None
    dense_true: Optional[np.ndarray] = None
    output_dt: Optional[float] = None
    seed: Any = None
    clamps: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_jumps(self) -> int:
        return len(self.jump_times) - 1

    @property
    def interarrivals(self) -> np.ndarray:
        return np.diff(self.jump_times)

    def count(self, t: float) -> int:
        """Number of proposal times in ``(0, t]`` (the Poisson count)."""
        return int(np.searchsorted(self.jump_times, t, side="right") - 1)

    @property
    def has_dense(self) -> bool:
        return self.dense_t is not None

    def skeleton_records(self) -> list[dict]:
        return [
            {
                "k": k,
                "t": float(self.jump_times[k]),
                "x": [float(v) for v in self.positions[k]],
                "regime": int(self.regimes[k]),
                "true_switch": bool(self.true_switch[k]),
            }
            for k in range(len(self.jump_times))
        ]

    def skeleton_json(self) -> str:
        payload = {
            "d": self.d,
            "seed": self.seed,
            "stream": STREAM_VERSION,
            "horizon": None if math.isinf(self.horizon) else self.horizon,
            "clamps": self.clamps,
            "jumps": self.skeleton_records(),
        }
        return json.dumps(payload, indent=1, sort_keys=True) + "\n"

    def dense_csv(self) -> str:
        if not self.has_dense:
            raise ValueError("path has no dense samples")
        buf = io.StringIO(newline="")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"x{c + 1}" for c in range(self.d)] + ["regime", "is_jump", "is_true_switch"])
        for k in range(len(self.dense_t)):
            w.writerow(
                [repr(float(self.dense_t[k]))]
                + [repr(float(v)) for v in self.dense_x[k]]
                + [int(self.dense_regime[k]), int(self.dense_jump[k]), int(self.dense_true[k])]
            )
        return buf.getvalue()

    def state_at(self, t: float) -> tuple[np.ndarray, int]:
        """Dense sample at time ``t`` (must be one of the recorded times)."""
        if not self.has_dense:
            raise ValueError("path has no dense samples")
        k = int(np.searchsorted(self.dense_t, t, side="right") - 1)
        if k < 0 or abs(self.dense_t[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise KeyError(f"no dense sample at t={t}")
        return self.dense_x[k].copy(), int(self.dense_regime[k])


class _Buffers:
    """Growable storage for skeleton and dense rows."""

    def __init__(self, d: int, dense: bool):
        self.d = d
        self.dense = dense
        self.jt: list[np.ndarray] = []
        self.jx: list[np.ndarray] = []
        self.jr: list[np.ndarray] = []
        self.jtrue: list[np.ndarray] = []
        self.rt: list[np.ndarray] = []
        self.rx: list[np.ndarray] = []
        self.rr: list[np.ndarray] = []
        self.rj: list[np.ndarray] = []
        self.rtrue: list[np.ndarray] = []

    def add_jumps(self, t, x, r, tr):
        self.jt.append(t.copy())
        self.jx.append(x.copy())
        self.jr.append(r.copy())
        self.jtrue.append(tr.copy())

    def add_rows(self, t, x, r, j, tr):
        self.rt.append(t.copy())
        self.rx.append(x.copy())
        self.rr.append(r.copy())
        self.rj.append(j.copy())
        self.rtrue.append(tr.copy())

    def cat(self, parts, shape_tail=(), dtype=float):
        if not parts:
            return np.zeros((0,) + shape_tail, dtype=dtype)
        return np.concatenate(parts)


def _check_start(sys: SwitchingSystem, z0) -> tuple[np.ndarray, int]:
    x0, i0 = z0
    x0 = np.array(x0, dtype=float).reshape(sys.d)
    i0 = int(i0)
    if not 0 <= i0 < sys.n_regimes:
        raise ValueError(f"initial regime {i0} out of range")
    if not sys.box.contains(x0):
        raise ValueError(f"initial point {x0.tolist()} is outside the box")
    return x0, i0


def _run(
    sys: SwitchingSystem,
    z0,
    rng: np.random.Generator,
    max_jumps: Optional[int],
    horizon: float,
    dense_dt: float,
    h: float,
) -> HybridPath:
    sys.ensure_valid()
    x0, i0 = _check_start(sys, z0)
    dense = dense_dt > 0
    if sys.program is None:
        return _run_python(sys, x0, i0, rng, max_jumps, horizon, dense_dt, h)
    prog = sys.program
    d = sys.d
    lo, hi, wrap, margin = sys.box.arrays()
    buf = _Buffers(d, dense)
    x = x0.copy()
    regime = i0
    t = 0.0
    next_grid = 1
    clamps = 0
    jumps_left = math.inf if max_jumps is None else max_jumps
    if dense:
        buf.add_rows(np.zeros(1), x0[None, :], np.array([i0]), np.zeros(1, np.int8), np.zeros(1, np.int8))
    row_cap = 1 << 14
    pending = np.empty(0)
    done = jumps_left == 0
    while not done:
        want = int(min(CHUNK, jumps_left))
        if pending.size < 2:
            pending = np.concatenate([pending, rng.random(2 * CHUNK)])
        u = pending
        jt = np.empty(want)
        jx = np.empty((want, d))
        jr = np.empty(want, dtype=np.int64)
        jtr = np.empty(want, dtype=np.int8)
        if dense:
            rt = np.empty(row_cap)
            rx = np.empty((row_cap, d))
            rr = np.empty(row_cap, dtype=np.int64)
            rj = np.empty(row_cap, dtype=np.int8)
            rtr = np.empty(row_cap, dtype=np.int8)
        else:
            rt = np.empty(1)
            rx = np.empty((1, d))
            rr = np.empty(1, dtype=np.int64)
            rj = np.empty(1, dtype=np.int8)
            rtr = np.empty(1, dtype=np.int8)
        status, nj, nr, used, t, regime, next_grid, cl, fin = _vm.simulate_chunk(
            *prog.arrays(), d, sys.n_regimes, sys.lambda_bar, x, regime, t, u,
            h, lo, hi, wrap, margin, prog.max_stack, horizon, want,
            dense_dt if dense else 0.0, next_grid,
            jt, jx, jr, jtr, rt, rx, rr, rj, rtr,
        )
        if status != _vm.OK:
            raise DomainError(f"non-finite field or rate near t={t}, x={x.tolist()}")
        clamps += int(cl)
        buf.add_jumps(jt[:nj], jx[:nj], jr[:nj], jtr[:nj])
        if dense:
            buf.add_rows(rt[:nr], rx[:nr], rr[:nr], rj[:nr], rtr[:nr])
        pending = u[2 * used :]
        jumps_left -= nj
        done = bool(fin) or jumps_left <= 0
        if not done and used == 0 and nj == 0:
            # dense buffer too small for the next segment
            row_cap *= 4
    return _assemble(sys, x0, i0, buf, horizon, dense_dt if dense else None, clamps)


def _assemble(sys, x0, i0, buf: _Buffers, horizon, dense_dt, clamps) -> HybridPath:
    d = sys.d
    jt = np.concatenate([[0.0], buf.cat(buf.jt)])
    jx = np.vstack([x0[None, :], buf.cat(buf.jx, (d,))])
    jr = np.concatenate([[i0], buf.cat(buf.jr, dtype=np.int64)]).astype(np.int64)
    jtr = np.concatenate([[0], buf.cat(buf.jtrue, dtype=np.int8)]).astype(bool)
    path = HybridPath(d, jt, jx, jr, jtr, horizon=horizon, clamps=clamps)
    if dense_dt is not None:
        path.dense_t = buf.cat(buf.rt)
        path.dense_x = buf.cat(buf.rx, (d,))
        path.dense_regime = buf.cat(buf.rr, dtype=np.int64).astype(np.int64)
        path.dense_jump = buf.cat(buf.rj, dtype=np.int8).astype(bool)
        path.dense_true = buf.cat(buf.rtrue, dtype=np.int8).astype(bool)
        path.output_dt = dense_dt
    return path


def _rk4_py_step(f, x, step):
    k1 = f(x)
    k2 = f(x + 0.5 * step * k1)
    k3 = f(x + 0.5 * step * k2)
    k4 = f(x + step * k3)
    return x + step / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _run_python(sys, x0, i0, rng, max_jumps, horizon, dense_dt, h) -> HybridPath:
    """Reference loop for programmatic fields; mirrors the compiled kernel."""
    lo, hi, wrap, margin = sys.box.arrays()
    d = sys.d
    dense = dense_dt > 0
    buf = _Buffers(d, dense)
    rows = [(0.0, x0.copy(), i0, 0, 0)] if dense else []
    jumps = []
    x = x0.copy()
    regime = i0
    t = 0.0
    next_grid = 1
    clamps = 0
    n_left = math.inf if max_jumps is None else max_jumps
    while n_left > 0:
        u1, u2 = rng.random(2)
        t_next = t + (-math.log(1.0 - u1) / sys.lambda_bar)
        seg_end = min(t_next, horizon)
        seg_len = seg_end - t
        n = _vm.n_steps_for(seg_len, h)
        f = sys.fields[regime]
        s_time = t
        for s in range(n):
            step = h if s < n - 1 else seg_len - (n - 1) * h
            end_time = t + (s + 1) * h if s < n - 1 else seg_end
            if dense:
                g = next_grid * dense_dt
                while g < end_time and g < seg_end:
                    if g > s_time:
                        part = _rk4_py_step(f, x, g - s_time)
                        _vm.confine(part, lo, hi, wrap, margin)
                        rows.append((g, part, regime, 0, 0))
                    elif g == s_time and s > 0:
                        rows.append((g, x.copy(), regime, 0, 0))
                    next_grid += 1
                    g = next_grid * dense_dt
            x = _rk4_py_step(f, x, step)
            clamps += int(_vm.confine(x, lo, hi, wrap, margin))
            s_time = end_time
        if t_next > horizon:
            t = horizon
            if dense:
                rows.append((horizon, x.copy(), regime, 0, 0))
            break
        t = t_next
        q = q_matrix(sys, x)
        new = regime
        acc = 0.0
        for j in range(sys.n_regimes):
            if j == regime:
                continue
            acc += q[regime, j]
            if u2 < acc:
                new = j
                break
        is_true = int(new != regime)
        regime = new
        jumps.append((t, x.copy(), regime, is_true))
        n_left -= 1
        if dense:
            while next_grid * dense_dt <= t:
                next_grid += 1
            rows.append((t, x.copy(), regime, 1, is_true))
    if jumps:
        buf.add_jumps(
            np.array([j[0] for j in jumps]),
            np.array([j[1] for j in jumps]),
            np.array([j[2] for j in jumps], dtype=np.int64),
            np.array([j[3] for j in jumps], dtype=np.int8),
        )
    if dense:
        buf.add_rows(
            np.array([r[0] for r in rows]),
            np.array([r[1] for r in rows]),
            np.array([r[2] for r in rows], dtype=np.int64),
            np.array([r[3] for r in rows], dtype=np.int8),
            np.array([r[4] for r in rows], dtype=np.int8),
        )
    return _assemble(sys, x0, i0, buf, horizon, dense_dt if dense else None, clamps)


# --------------------------------------------------------------------------
# public samplers


def embedded_step(sys: SwitchingSystem, state, rng: SeedLike, h: float = DEFAULT_STEP):
    """One step of the embedded chain: returns ``((x', i'), U)``.

    Draws exactly two uniforms from ``rng``.
    """
    rng = make_rng(rng)
    path = _run(sys, state, _Exactly2(rng), 1, math.inf, 0.0, h)
    return (path.positions[1].copy(), int(path.regimes[1])), float(path.jump_times[1])


class _Exactly2:
    """Generator proxy that hands out uniforms two at a time."""

    def __init__(self, rng):
        self.rng = rng

    def random(self, n):
        return self.rng.random(2)


def sample_embedded(sys: SwitchingSystem, z0, n_steps: int, rng: SeedLike, h: float = DEFAULT_STEP) -> HybridPath:
    """Skeleton of ``n_steps`` proposals (true and phantom jumps)."""
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    gen = make_rng(rng)
    path = _run(sys, z0, gen, n_steps, math.inf, 0.0, h)
    path.seed = rng if isinstance(rng, int) else None
    return path


def sample_path(
    sys: SwitchingSystem,
    z0,
    horizon: float,
    output_dt: float,
    rng: SeedLike,
    h: float = DEFAULT_STEP,
) -> HybridPath:
    """Continuous-time path on ``[0, horizon]`` with samples every ``output_dt``
    and at every proposal time."""
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    if not output_dt > 0:
        raise ValueError("output_dt must be positive")
    gen = make_rng(rng)
    path = _run(sys, z0, gen, None, float(horizon), float(output_dt), h)
    path.seed = rng if isinstance(rng, int) else None
    return path


def sojourn_times(path: HybridPath, regime: int) -> np.ndarray:
    """Completed holding times in ``regime`` between true switches.

    Phantom proposals do not end a sojourn. The last, censored sojourn is
    dropped; the first one (started at time 0) is kept.
    """
    switch_idx = np.nonzero(path.true_switch)[0]
    starts = np.concatenate([[0], switch_idx])
    times = path.jump_times[starts]
    regs = path.regimes[starts]
    out = [times[k + 1] - times[k] for k in range(len(starts) - 1) if regs[k] == regime]
    return np.asarray(out)


# --------------------------------------------------------------------------
# ensembles


class EnsembleError(RuntimeError):
    def __init__(self, errors: list[tuple[int, BaseException]], results: list):
        msg = "; ".join(f"replica {k}: {e!r}" for k, e in errors[:5])
        super().__init__(f"{len(errors)} replica(s) failed: {msg}")
        self.errors = errors
        self.results = results


def default_threads() -> int:
    env = os.environ.get("PDMP_THREADS")
    if env:
        return max(1, int(env))
    return 1


def ensemble(
    sys: SwitchingSystem,
    start,
    n_replicas: int,
    op: Callable[[SwitchingSystem, Any, np.random.Generator], Any],
    master_seed: int,
    threads: Optional[int] = None,
) -> list:
    """Run ``op(sys, z0, rng)`` on ``n_replicas`` independent streams.

    ``start`` is either an initial state ``(x, i)`` or a callable
    ``rng -> (x, i)`` drawing from the replica's own stream. Results are
    returned in replica order whatever the thread count.
    """
    if n_replicas < 1:
        raise ValueError("n_replicas must be >= 1")
    threads = default_threads() if threads is None else max(1, int(threads))

    def one(k: int):
        rng = replica_rng(master_seed, k)
        z0 = start(rng) if callable(start) else start
        return op(sys, z0, rng)

    results: list = [None] * n_replicas
    errors: list[tuple[int, BaseException]] = []
    if threads == 1:
        for k in range(n_replicas):
            try:
                results[k] = one(k)
            except Exception as exc:  # collected and re-raised below
                errors.append((k, exc))
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(one, k) for k in range(n_replicas)]
            for k, fut in enumerate(futures):
                try:
                    results[k] = fut.result()
                except Exception as exc:
                    errors.append((k, exc))
    if errors:
        raise EnsembleError(errors, results)
    return results
