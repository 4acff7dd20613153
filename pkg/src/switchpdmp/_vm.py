"""Stack-machine bytecode for expressions and the jitted kernels that run it.

A :class:`Program` stores many expressions ("slots") back to back. Each
instruction is a pair ``(opcode, argument)``; constants live in a side table.
Every kernel in this module takes the three arrays ``code, consts, offsets``
so that a single compiled kernel serves every model; nothing is recompiled
when a new system is loaded.

Kernels return status codes instead of raising: ``OK``, ``DOMAIN`` (an
evaluation produced a non-finite value) or ``SINGULAR``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .expr import Binary, Const, Expression, Unary, Var

try:  # pragma: no cover - exercised implicitly
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


def jit(f):
    return njit(cache=True, error_model="numpy", nogil=True)(f)


OP_CONST, OP_VAR = 0, 1
OP_NEG, OP_SIN, OP_COS, OP_EXP, OP_LOG, OP_SQRT, OP_ABS = 2, 3, 4, 5, 6, 7, 8
OP_ADD, OP_SUB, OP_MUL, OP_DIV, OP_POW = 9, 10, 11, 12, 13

_UNARY_CODES = {
    "neg": OP_NEG,
    "sin": OP_SIN,
    "cos": OP_COS,
    "exp": OP_EXP,
    "log": OP_LOG,
    "sqrt": OP_SQRT,
    "abs": OP_ABS,
}
_BINARY_CODES = {"add": OP_ADD, "sub": OP_SUB, "mul": OP_MUL, "div": OP_DIV}

OK, DOMAIN, SINGULAR = 0, 1, 2


@dataclass(frozen=True)
class Program:
    code: np.ndarray  # (n, 2) int64
    consts: np.ndarray  # float64
    offsets: np.ndarray  # (n_slots + 1,) int64
    max_stack: int

    @property
    def n_slots(self) -> int:
        return len(self.offsets) - 1

    def arrays(self):
        return self.code, self.consts, self.offsets


def compile_expressions(exprs: Sequence[Expression]) -> Program:
    """Compile ``exprs`` into one program; slot ``k`` evaluates ``exprs[k]``."""
    code: list[tuple[int, int]] = []
    consts: list[float] = []
    const_index: dict[float, int] = {}
    offsets = [0]
    max_stack = 1

    def const(v: float) -> int:
        key = float(v)
        if key not in const_index:
            const_index[key] = len(consts)
            consts.append(key)
        return const_index[key]

    def emit(e: Expression) -> int:
        # returns the stack depth needed
        if isinstance(e, Const):
            code.append((OP_CONST, const(e.value)))
            return 1
        if isinstance(e, Var):
            code.append((OP_VAR, e.index - 1))
            return 1
        if isinstance(e, Unary):
            depth = emit(e.arg)
            code.append((_UNARY_CODES[e.op], 0))
            return depth
        assert isinstance(e, Binary)
        if e.op == "pow":
            depth = emit(e.left)
            code.append((OP_POW, int(e.right.value)))
            return depth
        left = emit(e.left)
        right = emit(e.right)
        code.append((_BINARY_CODES[e.op], 0))
        return max(left, right + 1)

    for e in exprs:
        max_stack = max(max_stack, emit(e))
        offsets.append(len(code))
    return Program(
        code=np.asarray(code, dtype=np.int64).reshape(-1, 2),
        consts=np.asarray(consts if consts else [0.0], dtype=np.float64),
        offsets=np.asarray(offsets, dtype=np.int64),
        max_stack=max_stack,
    )


# --------------------------------------------------------------------------
# evaluation


@jit
def eval_slot(code, consts, offsets, slot, x, stack):
    """Evaluate one slot at ``x``; NaN if any intermediate is not finite."""
    sp = 0
    bad = False
    for pc in range(offsets[slot], offsets[slot + 1]):
        op = code[pc, 0]
        arg = code[pc, 1]
        r = 0.0
        if op == OP_CONST:
            r = consts[arg]
            sp += 1
        elif op == OP_VAR:
            r = x[arg]
            sp += 1
        elif op >= OP_ADD:
            if op == OP_POW:
                r = stack[sp - 1] ** float(arg)
            else:
                b = stack[sp - 1]
                sp -= 1
                a = stack[sp - 1]
                if op == OP_ADD:
                    r = a + b
                elif op == OP_SUB:
                    r = a - b
                elif op == OP_MUL:
                    r = a * b
                elif b != 0.0:
                    r = a / b
                else:
                    r = np.nan
        else:
            a = stack[sp - 1]
            if op == OP_NEG:
                r = -a
            elif op == OP_SIN:
                r = math.sin(a)
            elif op == OP_COS:
                r = math.cos(a)
            elif op == OP_EXP:
                r = math.exp(a)
            elif op == OP_LOG:
                r = math.log(a) if a > 0.0 else np.nan
            elif op == OP_SQRT:
                r = math.sqrt(a) if a >= 0.0 else np.nan
            else:
                r = abs(a)
        stack[sp - 1] = r
        if not (r - r == 0.0):
            bad = True
    if bad:
        return np.nan
    return stack[0]


@jit
def eval_points(code, consts, offsets, slot, points, max_stack):
    n = points.shape[0]
    out = np.empty(n)
    stack = np.empty(max_stack)
    for k in range(n):
        out[k] = eval_slot(code, consts, offsets, slot, points[k], stack)
    return out


@jit
def eval_field(code, consts, offsets, regime, d, x, out, stack):
    ok = True
    base = regime * d
    for c in range(d):
        v = eval_slot(code, consts, offsets, base + c, x, stack)
        out[c] = v
        if not math.isfinite(v):
            ok = False
    return ok


@jit
def eval_rates(code, consts, offsets, regime, d, n_reg, x, out, stack):
    ok = True
    base = n_reg * d + regime * n_reg
    for j in range(n_reg):
        v = eval_slot(code, consts, offsets, base + j, x, stack)
        out[j] = v
        if not math.isfinite(v):
            ok = False
    return ok


@jit
def eval_jacobian(code, consts, offsets, regime, d, n_reg, x, out, stack):
    ok = True
    base = n_reg * d + n_reg * n_reg + regime * d * d
    for r in range(d):
        for c in range(d):
            v = eval_slot(code, consts, offsets, base + r * d + c, x, stack)
            out[r, c] = v
            if not math.isfinite(v):
                ok = False
    return ok


# --------------------------------------------------------------------------
# RK4 flows


@jit
def confine(x, lo, hi, wrap, margin):
    """Wrap periodic axes, clamp the others when they leave the box by > margin.

    Returns the number of clamped coordinates.
    """
    clamps = 0
    for c in range(x.shape[0]):
        width = hi[c] - lo[c]
        if wrap[c]:
            x[c] = lo[c] + (x[c] - lo[c]) % width
        elif x[c] < lo[c] - margin[c]:
            x[c] = lo[c]
            clamps += 1
        elif x[c] > hi[c] + margin[c]:
            x[c] = hi[c]
            clamps += 1
    return clamps


@jit
def rk4_step(code, consts, offsets, regime, d, x, h, out, k1, k2, k3, k4, tmp, stack):
    ok = eval_field(code, consts, offsets, regime, d, x, k1, stack)
    for c in range(d):
        tmp[c] = x[c] + 0.5 * h * k1[c]
    ok = eval_field(code, consts, offsets, regime, d, tmp, k2, stack) and ok
    for c in range(d):
        tmp[c] = x[c] + 0.5 * h * k2[c]
    ok = eval_field(code, consts, offsets, regime, d, tmp, k3, stack) and ok
    for c in range(d):
        tmp[c] = x[c] + h * k3[c]
    ok = eval_field(code, consts, offsets, regime, d, tmp, k4, stack) and ok
    for c in range(d):
        out[c] = x[c] + h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c])
    return ok


@jit
def n_steps_for(t, h):
    """Number of fixed steps of size ``h`` covering ``[0, t]`` (last one partial)."""
    if t <= 0.0:
        return 0
    n = int(math.floor(t / h))
    if t - n * h > 1e-12 * max(1.0, t):
        n += 1
    return max(n, 1)


@jit
def flow(code, consts, offsets, regime, d, x, t, h, lo, hi, wrap, margin, max_stack):
    """Integrate in place for time ``t``; returns (status, steps, clamps)."""
    k1 = np.empty(d)
    k2 = np.empty(d)
    k3 = np.empty(d)
    k4 = np.empty(d)
    tmp = np.empty(d)
    nxt = np.empty(d)
    stack = np.empty(max_stack)
    n = n_steps_for(t, h)
    clamps = 0
    for s in range(n):
        step = h if s < n - 1 else t - (n - 1) * h
        if not rk4_step(code, consts, offsets, regime, d, x, step, nxt, k1, k2, k3, k4, tmp, stack):
            return DOMAIN, s, clamps
        for c in range(d):
            x[c] = nxt[c]
        clamps += confine(x, lo, hi, wrap, margin)
    return OK, n, clamps


@jit
def flow_batch(code, consts, offsets, regime, d, points, t, h, lo, hi, wrap, margin, max_stack):
    out = points.copy()
    status = np.zeros(points.shape[0], dtype=np.int64)
    for k in range(points.shape[0]):
        st, _, _ = flow(code, consts, offsets, regime, d, out[k], t, h, lo, hi, wrap, margin, max_stack)
        status[k] = st
    return out, status


@jit
def variational_flow(code, consts, offsets, regime, d, n_reg, x, t, h, max_stack):
    """RK4 on the state and the variational equation dJ/dt = DF(x) J, J(0) = I.

    Also integrates the divergence of the field along the trajectory with the
    same stages, so that ``log det J`` can be checked against it.
    Returns (status, J, integral of div F, steps).
    """
    m = d + d * d + 1
    y = np.zeros(m)
    for c in range(d):
        y[c] = x[c]
        y[d + c * d + c] = 1.0
    k = np.empty((4, m))
    tmp = np.empty(m)
    f = np.empty(d)
    jac = np.empty((d, d))
    stack = np.empty(max_stack)
    n = n_steps_for(t, h)
    for s in range(n):
        step = h if s < n - 1 else t - (n - 1) * h
        for stage in range(4):
            if stage == 0:
                for q in range(m):
                    tmp[q] = y[q]
            else:
                coef = 0.5 * step if stage < 3 else step
                for q in range(m):
                    tmp[q] = y[q] + coef * k[stage - 1, q]
            ok = eval_field(code, consts, offsets, regime, d, tmp[:d], f, stack)
            ok = eval_jacobian(code, consts, offsets, regime, d, n_reg, tmp[:d], jac, stack) and ok
            if not ok:
                return DOMAIN, jac, 0.0, s
            div = 0.0
            for r in range(d):
                k[stage, r] = f[r]
                div += jac[r, r]
                for c in range(d):
                    acc = 0.0
                    for q in range(d):
                        acc += jac[r, q] * tmp[d + q * d + c]
                    k[stage, d + r * d + c] = acc
            k[stage, m - 1] = div
        for q in range(m):
            y[q] = y[q] + step / 6.0 * (k[0, q] + 2.0 * k[1, q] + 2.0 * k[2, q] + k[3, q])
    for c in range(d):
        x[c] = y[c]
    out = np.empty((d, d))
    for r in range(d):
        for c in range(d):
            out[r, c] = y[d + r * d + c]
    return OK, out, y[m - 1], n


# --------------------------------------------------------------------------
# thinning simulation


@jit
def _dense_row(row_t, row_x, row_r, row_jump, row_true, n_rows, t, x, regime, is_jump, is_true):
    row_t[n_rows] = t
    for c in range(x.shape[0]):
        row_x[n_rows, c] = x[c]
    row_r[n_rows] = regime
    row_jump[n_rows] = is_jump
    row_true[n_rows] = is_true
    return n_rows + 1


@jit
def advance(code, consts, offsets, regime, d, x, t, h, lo, hi, wrap, margin, nxt, k1, k2, k3, k4, tmp, stack):
    """In-place RK4 flow for time ``t`` with caller-provided work arrays."""
    n = n_steps_for(t, h)
    clamps = 0
    for s in range(n):
        step = h if s < n - 1 else t - (n - 1) * h
        if not rk4_step(code, consts, offsets, regime, d, x, step, nxt, k1, k2, k3, k4, tmp, stack):
            return DOMAIN, clamps
        for c in range(d):
            x[c] = nxt[c]
        clamps += confine(x, lo, hi, wrap, margin)
    return OK, clamps


@jit
def advance_dense(
    code, consts, offsets, regime, d, x, t0, t1, h, lo, hi, wrap, margin,
    dense_dt, next_grid, row_t, row_x, row_r, row_jump, row_true, n_rows,
    nxt, part, k1, k2, k3, k4, tmp, stack,
):
    """As :func:`advance` over ``[t0, t1]``, also writing a row at each grid
    time ``k * dense_dt`` strictly inside the interval. A grid row is a
    partial RK4 step from the last full step, so the main trajectory is the
    same as without dense output."""
    n = n_steps_for(t1 - t0, h)
    clamps = 0
    s_time = t0
    for s in range(n):
        step = h if s < n - 1 else (t1 - t0) - (n - 1) * h
        end_time = t0 + (s + 1) * h if s < n - 1 else t1
        g = next_grid * dense_dt
        while g < end_time and g < t1:
            if g > s_time:
                if not rk4_step(code, consts, offsets, regime, d, x, g - s_time, part, k1, k2, k3, k4, tmp, stack):
                    return DOMAIN, n_rows, next_grid, clamps
                confine(part, lo, hi, wrap, margin)
                n_rows = _dense_row(row_t, row_x, row_r, row_jump, row_true, n_rows, g, part, regime, 0, 0)
            elif g == s_time and s > 0:
                n_rows = _dense_row(row_t, row_x, row_r, row_jump, row_true, n_rows, g, x, regime, 0, 0)
            next_grid += 1
            g = next_grid * dense_dt
        if not rk4_step(code, consts, offsets, regime, d, x, step, nxt, k1, k2, k3, k4, tmp, stack):
            return DOMAIN, n_rows, next_grid, clamps
        for c in range(d):
            x[c] = nxt[c]
        clamps += confine(x, lo, hi, wrap, margin)
        s_time = end_time
    return OK, n_rows, next_grid, clamps


@jit
def simulate_chunk(
    code, consts, offsets, d, n_reg, lam_bar, x, regime, t0, uniforms,
    h, lo, hi, wrap, margin, max_stack, horizon, max_jumps,
    dense_dt, next_grid,
    jump_t, jump_x, jump_r, jump_true,
    row_t, row_x, row_r, row_jump, row_true,
):
    """Advance a thinning path using pre-drawn uniforms (two per proposal).

    ``x`` is updated in place. Stops when the uniforms run out, ``max_jumps``
    proposals are recorded, the horizon is reached, or the dense buffers
    cannot hold the next segment. Dense rows (only when ``dense_dt > 0``)
    are the grid times ``k * dense_dt`` strictly inside a segment, a row at
    every proposal time and a final row at the horizon.

    Returns ``(status, n_jumps, n_rows, used_pairs, t, regime, next_grid,
    clamps, done)``.
    """
    k1 = np.empty(d)
    k2 = np.empty(d)
    k3 = np.empty(d)
    k4 = np.empty(d)
    tmp = np.empty(d)
    nxt = np.empty(d)
    part = np.empty(d)
    rates = np.empty(n_reg)
    stack = np.empty(max_stack)
    max_rows = row_t.shape[0]
    n_jumps = 0
    n_rows = 0
    used = 0
    clamps = 0
    t = t0
    n_pairs = uniforms.shape[0] // 2
    while used < n_pairs and n_jumps < max_jumps:
        u1 = uniforms[2 * used]
        u2 = uniforms[2 * used + 1]
        t_next = t + (-math.log(1.0 - u1) / lam_bar)
        seg_end = t_next if t_next <= horizon else horizon
        seg_len = seg_end - t
        if dense_dt > 0.0 and n_rows + int(seg_len / dense_dt) + 3 > max_rows:
            break
        used += 1
        if dense_dt > 0.0:
            st, n_rows, next_grid, cl = advance_dense(
                code, consts, offsets, regime, d, x, t, seg_end, h, lo, hi, wrap, margin,
                dense_dt, next_grid, row_t, row_x, row_r, row_jump, row_true, n_rows,
                nxt, part, k1, k2, k3, k4, tmp, stack,
            )
        else:
            st, cl = advance(code, consts, offsets, regime, d, x, seg_len, h, lo, hi, wrap, margin,
                             nxt, k1, k2, k3, k4, tmp, stack)
        clamps += cl
        if st != OK:
            return DOMAIN, n_jumps, n_rows, used, t, regime, next_grid, clamps, 0
        if t_next > horizon:
            t = horizon
            if dense_dt > 0.0:
                while next_grid * dense_dt <= horizon * (1.0 + 1e-12):
                    next_grid += 1
                n_rows = _dense_row(row_t, row_x, row_r, row_jump, row_true, n_rows, horizon, x, regime, 0, 0)
            return OK, n_jumps, n_rows, used, t, regime, next_grid, clamps, 1
        t = t_next
        # proposal j != regime with probability rate / lam_bar, else phantom
        if not eval_rates(code, consts, offsets, regime, d, n_reg, x, rates, stack):
            return DOMAIN, n_jumps, n_rows, used, t, regime, next_grid, clamps, 0
        new_regime = regime
        acc = 0.0
        for j in range(n_reg):
            if j == regime:
                continue
            acc += rates[j] / lam_bar
            if u2 < acc:
                new_regime = j
                break
        is_true = 1 if new_regime != regime else 0
        regime = new_regime
        jump_t[n_jumps] = t
        for c in range(d):
            jump_x[n_jumps, c] = x[c]
        jump_r[n_jumps] = regime
        jump_true[n_jumps] = is_true
        n_jumps += 1
        if dense_dt > 0.0:
            while next_grid * dense_dt <= t:
                next_grid += 1
            n_rows = _dense_row(row_t, row_x, row_r, row_jump, row_true, n_rows, t, x, regime, 1, is_true)
    return OK, n_jumps, n_rows, used, t, regime, next_grid, clamps, 0


# --------------------------------------------------------------------------
# exponential smoothing operator


@jit
def ktilde_batch(
    code, consts, offsets, d, f_code, f_consts, f_offsets, f_stack,
    points, regimes, node_times, node_weights, h, lo, hi, wrap, margin, max_stack,
):
    """Gauss-Laguerre quadrature of sum_k w_k f(flow_{t_k}(x), i) per point.

    ``node_times`` must be increasing; the flow is advanced node to node.
    Slot ``i`` of the ``f`` program is the test function on regime ``i``.
    """
    n = points.shape[0]
    out = np.empty(n)
    status = np.zeros(n, dtype=np.int64)
    y = np.empty(d)
    fstack = np.empty(f_stack)
    for p in range(n):
        for c in range(d):
            y[c] = points[p, c]
        i = regimes[p]
        prev = 0.0
        acc = 0.0
        for q in range(node_times.shape[0]):
            st, _, _ = flow(code, consts, offsets, i, d, y, node_times[q] - prev, h, lo, hi, wrap, margin, max_stack)
            if st != OK:
                status[p] = st
                break
            prev = node_times[q]
            v = eval_slot(f_code, f_consts, f_offsets, i, y, fstack)
            if not math.isfinite(v):
                status[p] = DOMAIN
                break
            acc += node_weights[q] * v
        out[p] = acc
    return out, status


# --------------------------------------------------------------------------
# reachability


@jit
def cell_of(x, lo, cell, n_cells):
    """Flat cell index of ``x`` (row-major, last axis fastest); -1 if outside."""
    idx = 0
    for c in range(x.shape[0]):
        k = int(math.floor((x[c] - lo[c]) / cell[c]))
        if k == n_cells[c] and x[c] - lo[c] <= cell[c] * n_cells[c] * (1.0 + 1e-12):
            k = n_cells[c] - 1
        if k < 0 or k >= n_cells[c]:
            return -1
        idx = idx * n_cells[c] + k
    return idx


@jit
def reach_expand(
    code, consts, offsets, d, n_reg, reps, src_cells, tau, h,
    lo, hi, wrap, margin, cell, n_cells, max_sub, max_stack,
):
    """From each representative point flow every regime in micro-steps ``tau``
    until the point leaves its source cell (at most ``max_sub`` micro-steps).

    Returns landing points and cells, shape ``(n, n_reg)``; cell -1 marks a
    point that stayed in place or left the grid.
    """
    n = reps.shape[0]
    land = np.empty((n, n_reg, d))
    land_cell = np.full((n, n_reg), -1, dtype=np.int64)
    y = np.empty(d)
    for p in range(n):
        for i in range(n_reg):
            for c in range(d):
                y[c] = reps[p, c]
            cur = src_cells[p]
            for _ in range(max_sub):
                st, _, _ = flow(code, consts, offsets, i, d, y, tau, h, lo, hi, wrap, margin, max_stack)
                if st != OK:
                    break
                cur = cell_of(y, lo, cell, n_cells)
                if cur != src_cells[p]:
                    break
            for c in range(d):
                land[p, i, c] = y[c]
            if cur != src_cells[p]:
                land_cell[p, i] = cur
    return land, land_cell


@jit
def reach_trace(
    code, consts, offsets, d, n_reg, reps, src_cells, tau, h,
    lo, hi, wrap, margin, cell, n_cells, max_sub, max_cells, max_stack,
):
    """Follow each representative under every regime through up to
    ``max_cells`` cell changes, recording each cell entered.

    A trace stops early when the point leaves the grid or stays in one cell
    for ``max_sub`` consecutive micro-steps of length ``tau``. Returns cell
    ids of shape ``(n, n_reg, max_cells)`` padded with -1.
    """
    n = reps.shape[0]
    visited = np.full((n, n_reg, max_cells), -1, dtype=np.int64)
    y = np.empty(d)
    for p in range(n):
        for i in range(n_reg):
            for c in range(d):
                y[c] = reps[p, c]
            prev = src_cells[p]
            m = 0
            still = 0
            while m < max_cells and still < max_sub:
                st, _, _ = flow(code, consts, offsets, i, d, y, tau, h, lo, hi, wrap, margin, max_stack)
                if st != OK:
                    break
                cur = cell_of(y, lo, cell, n_cells)
                if cur < 0:
                    break
                if cur != prev:
                    visited[p, i, m] = cur
                    m += 1
                    prev = cur
                    still = 0
                else:
                    still += 1
    return visited
