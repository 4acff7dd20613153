"""Occupation measures, the exponential smoothing operator ``K~`` and
distances between empirical laws.

Test functions ``f(x, i)`` may be given as

* a number (constant function),
* an expression or expression string (same formula in every regime),
* a list of expressions, one per regime,
* a Python callable ``f(x, i) -> float``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import _vm
from .expr import Binary, Const, DomainError, Expression, Unary, Var, evaluate_many, parse
from .flow import DEFAULT_STEP, integrate
from .simulate import HybridPath
from .system import Box, SwitchingSystem

__all__ = [
    "DEFAULT_ORDER",
    "EmpiricalMeasure",
    "GridMismatch",
    "Histogram",
    "InsufficientData",
    "apply_Ktilde",
    "continuous_occupation",
    "correspondence_gap",
    "default_bins",
    "discrete_occupation",
    "histogram",
    "ks_distance_1d",
    "ktilde_pushforward",
    "ktilde_values",
    "laguerre_nodes",
    "tv_distance",
]

DEFAULT_ORDER = 32

TestFunction = Union[float, int, str, Expression, Sequence[Union[str, Expression]], Callable]


class InsufficientData(ValueError):
    """The path is too short for the requested measure."""


class GridMismatch(ValueError):
    """Histograms live on different grids."""


# --------------------------------------------------------------------------
# test functions


def _per_regime_exprs(f, d: int, n_reg: int) -> Optional[list[Expression]]:
    """Expressions for each regime, or None for a Python callable."""
    if isinstance(f, (int, float)) and not isinstance(f, bool):
        return [Const(float(f))] * n_reg
    if isinstance(f, str):
        return [parse(f, d)] * n_reg
    if isinstance(f, (Const, Var, Unary, Binary)):
        return [f] * n_reg
    if isinstance(f, (list, tuple)):
        if len(f) != n_reg:
            raise ValueError(f"need one expression per regime ({n_reg}), got {len(f)}")
        return [parse(g, d) if isinstance(g, str) else g for g in f]
    if callable(f):
        return None
    raise TypeError(f"unsupported test function {f!r}")


def _test_values(f, points: np.ndarray, regimes: np.ndarray, n_reg: int) -> np.ndarray:
    d = points.shape[1]
    exprs = _per_regime_exprs(f, d, n_reg)
    out = np.empty(len(points))
    if exprs is None:
        for k in range(len(points)):
            out[k] = float(f(points[k], int(regimes[k])))
        if not np.all(np.isfinite(out)):
            raise DomainError("test function returned a non-finite value")
        return out
    for i in np.unique(regimes):
        sel = regimes == i
        out[sel] = evaluate_many(exprs[int(i)], points[sel])
    return out


# --------------------------------------------------------------------------
# empirical measures


@dataclass
class EmpiricalMeasure:
    """Weighted atoms ``(x, i, w)``.

    ``provenance`` is ``"discrete"`` (step average of the embedded chain),
    ``"continuous"`` (time average of the interpolated process) or
    ``"pushforward"`` (image of a measure under ``K~``).
    """

    points: np.ndarray
    regimes: np.ndarray
    weights: np.ndarray
    provenance: str
    n_regimes: int = 0
    box: Optional[Box] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.regimes = np.asarray(self.regimes, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=float)
        n = self.points.shape[0]
        if self.regimes.shape != (n,) or self.weights.shape != (n,):
            raise ValueError("points, regimes and weights must have matching lengths")
        if n == 0:
            raise InsufficientData("empty measure")
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite and non-negative")
        if not self.n_regimes:
            self.n_regimes = int(self.regimes.max()) + 1
        if self.box is not None:
            lo, hi, _, margin = self.box.arrays()
            if np.any(self.points < lo - margin) or np.any(self.points > hi + margin):
                raise ValueError("measure has atoms outside the box")

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def total(self) -> float:
        return float(self.weights.sum())

    def __len__(self) -> int:
        return self.points.shape[0]

    def normalized(self) -> "EmpiricalMeasure":
        tot = self.total
        if tot <= 0:
            raise InsufficientData("measure has zero mass")
        return EmpiricalMeasure(
            self.points, self.regimes, self.weights / tot, self.provenance, self.n_regimes, self.box, dict(self.meta)
        )

    def integrate(self, f: TestFunction) -> float:
        """``sum_k w_k f(x_k, i_k)``."""
        vals = _test_values(f, self.points, self.regimes, self.n_regimes)
        return float(np.dot(self.weights, vals))

    def regime_mass(self, i: int) -> float:
        return float(self.weights[self.regimes == i].sum())

    def marginal(self, axis: int = 0, regime: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
        """Coordinate ``axis`` of the atoms and their normalized weights,
        conditioned on ``regime`` when given."""
        sel = np.ones(len(self), dtype=bool) if regime is None else self.regimes == regime
        w = self.weights[sel]
        tot = w.sum()
        if tot <= 0:
            raise InsufficientData(f"no mass in regime {regime}")
        return self.points[sel, axis].copy(), w / tot

    def to_csv(self) -> str:
        buf = io.StringIO(newline="")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"x{c + 1}" for c in range(self.d)] + ["regime", "weight"])
        for k in range(len(self)):
            w.writerow([repr(float(v)) for v in self.points[k]] + [int(self.regimes[k]), repr(float(self.weights[k]))])
        return buf.getvalue()


def discrete_occupation(path: HybridPath, n: int, box: Optional[Box] = None, n_regimes: int = 0) -> EmpiricalMeasure:
    """Equal weights ``1/n`` on the skeleton states ``Z~_1 .. Z~_n``."""
    if n < 1:
        raise InsufficientData("n must be >= 1")
    if path.n_jumps < n:
        raise InsufficientData(f"skeleton has {path.n_jumps} jumps, need {n}")
    return EmpiricalMeasure(
        path.positions[1 : n + 1],
        path.regimes[1 : n + 1],
        np.full(n, 1.0 / n),
        "discrete",
        n_regimes,
        box,
        {"n": n},
    )


def continuous_occupation(path: HybridPath, T: float, box: Optional[Box] = None, n_regimes: int = 0) -> EmpiricalMeasure:
    """Time average of the interpolated process over ``[0, T]``.

    Each dense segment ``[t_k, t_{k+1}]`` contributes half its length to both
    end points, both charged to the regime in force on the segment. A jump
    row therefore yields two atoms at the same position: the left limit in
    the old regime and the row itself in the new one. If ``T`` falls
    between rows the position at ``T`` is interpolated linearly.
    """
    if not path.has_dense:
        raise InsufficientData("path has no dense samples")
    if not T > 0:
        raise InsufficientData("T must be positive")
    if T > path.horizon * (1 + 1e-12):
        raise InsufficientData(f"T={T} exceeds the horizon {path.horizon}")
    ts, xs, rs = path.dense_t, path.dense_x, path.dense_regime
    m = int(np.searchsorted(ts, T, side="right"))  # rows with t <= T
    ts, xs, rs = ts[:m], xs[:m], rs[:m]
    if T - ts[-1] > 1e-12 * max(1.0, T):
        # interpolate a closing row
        nxt = m if m < len(path.dense_t) else m - 1
        t0, t1 = ts[-1], path.dense_t[nxt]
        frac = (T - t0) / (t1 - t0) if t1 > t0 else 0.0
        xT = xs[-1] + frac * (path.dense_x[nxt] - xs[-1])
        ts = np.append(ts, T)
        xs = np.vstack([xs, xT])
        rs = np.append(rs, rs[-1])
    if len(ts) < 2:
        raise InsufficientData("need at least two dense rows before T")
    dt = np.diff(ts)
    seg_reg = rs[:-1]
    left = np.zeros(len(ts))
    left[:-1] = 0.5 * dt
    right_same = np.zeros(len(ts))
    same = rs[1:] == seg_reg
    right_same[1:][same] = 0.5 * dt[same]
    w_main = left + right_same
    # left limits at jumps, charged to the previous regime
    jump_idx = np.nonzero(~same)[0] + 1
    pts = np.vstack([xs, xs[jump_idx]])
    regs = np.concatenate([rs, seg_reg[jump_idx - 1]])
    wts = np.concatenate([w_main, 0.5 * dt[jump_idx - 1]])
    keep = wts > 0
    wts = wts[keep] / wts[keep].sum()
    return EmpiricalMeasure(pts[keep], regs[keep], wts, "continuous", n_regimes, box, {"T": float(T)})


# --------------------------------------------------------------------------
# the smoothing operator


@lru_cache(maxsize=32)
def laguerre_nodes(order: int, lambda_bar: float, cutoff: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Laguerre nodes rescaled to the density ``lambda_bar e^{-lambda_bar t}``.

    Nodes whose weight is below ``cutoff`` are dropped; their total weight is
    below ``order * cutoff`` so the truncation error is bounded by that times
    ``sup |f|``.
    """
    if order < 1:
        raise ValueError("quadrature order must be >= 1")
    s, w = np.polynomial.laguerre.laggauss(order)
    keep = w >= cutoff
    times = s[keep] / lambda_bar
    weights = w[keep]
    times.setflags(write=False)
    weights.setflags(write=False)
    return times, weights


def apply_Ktilde(
    sys: SwitchingSystem,
    f: TestFunction,
    x,
    i: int,
    order: int = DEFAULT_ORDER,
    h: float = DEFAULT_STEP,
    cutoff: float = 0.0,
) -> float:
    """``int_0^inf lambda_bar e^{-lambda_bar t} f(Phi^i_t(x), i) dt``.

    The flow is advanced once through the increasing node times.
    """
    times, weights = laguerre_nodes(order, float(sys.lambda_bar), cutoff)
    y = np.array(x, dtype=float)
    prev = 0.0
    acc = 0.0
    reg = np.array([i])
    for t, w in zip(times, weights):
        y = integrate(sys, i, y, t - prev, h).x
        prev = t
        acc += w * _test_values(f, y[None, :], reg, sys.n_regimes)[0]
    return float(acc)


def _f_program(f, d: int, n_reg: int) -> Optional[_vm.Program]:
    exprs = _per_regime_exprs(f, d, n_reg)
    return None if exprs is None else _vm.compile_expressions(exprs)


def ktilde_values(
    sys: SwitchingSystem,
    f: TestFunction,
    points,
    regimes,
    order: int = DEFAULT_ORDER,
    h: float = DEFAULT_STEP,
    cutoff: float = 0.0,
) -> np.ndarray:
    """``K~f`` at many states; compiled when both system and ``f`` allow it."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    regimes = np.asarray(regimes, dtype=np.int64)
    prog = sys.program
    fprog = _f_program(f, sys.d, sys.n_regimes)
    if prog is None or fprog is None:
        return np.array([apply_Ktilde(sys, f, p, int(r), order, h, cutoff) for p, r in zip(points, regimes)])
    times, weights = laguerre_nodes(order, float(sys.lambda_bar), cutoff)
    lo, hi, wrap, margin = sys.box.arrays()
    out, status = _vm.ktilde_batch(
        *prog.arrays(), sys.d, *fprog.arrays(), fprog.max_stack,
        points, regimes, np.ascontiguousarray(times), np.ascontiguousarray(weights),
        h, lo, hi, wrap, margin, prog.max_stack,
    )
    if np.any(status != _vm.OK):
        k = int(np.nonzero(status)[0][0])
        raise DomainError(f"K~f not finite from state {points[k].tolist()}, regime {int(regimes[k])}")
    return out


def ktilde_pushforward(
    sys: SwitchingSystem,
    measure: EmpiricalMeasure,
    order: int = DEFAULT_ORDER,
    h: float = DEFAULT_STEP,
    cutoff: float = 0.0,
) -> EmpiricalMeasure:
    """The measure ``mu K~`` as atoms at the quadrature nodes.

    Integrating ``f`` against it equals integrating ``K~f`` against ``mu``.
    """
    times, weights = laguerre_nodes(order, float(sys.lambda_bar), cutoff)
    n, q = len(measure), len(times)
    pts = np.empty((n, q, sys.d))
    prog = sys.program
    lo, hi, wrap, margin = sys.box.arrays()
    for i in np.unique(measure.regimes):
        sel = np.nonzero(measure.regimes == i)[0]
        cur = measure.points[sel].copy()
        prev = 0.0
        for k, t in enumerate(times):
            if prog is not None:
                cur, status = _vm.flow_batch(*prog.arrays(), int(i), sys.d, cur, t - prev, h, lo, hi, wrap, margin, prog.max_stack)
                if np.any(status != _vm.OK):
                    raise DomainError("flow not finite in pushforward")
            else:
                cur = np.array([integrate(sys, int(i), p, t - prev, h).x for p in cur])
            prev = t
            pts[sel, k] = cur
    return EmpiricalMeasure(
        pts.reshape(n * q, sys.d),
        np.repeat(measure.regimes, q),
        (measure.weights[:, None] * weights[None, :]).ravel(),
        "pushforward",
        measure.n_regimes or sys.n_regimes,
        None,
        {"order": order, "cutoff": cutoff},
    )


def correspondence_gap(
    sys: SwitchingSystem,
    path: HybridPath,
    f: TestFunction,
    t: float,
    order: int = DEFAULT_ORDER,
    h: float = DEFAULT_STEP,
    cutoff: float = 0.0,
) -> float:
    """``|Pi_t f - Pi~_{N_t} K~f|`` with ``N_t`` the proposals up to ``t``."""
    cont = continuous_occupation(path, t, n_regimes=sys.n_regimes)
    n_t = path.count(t)
    disc = discrete_occupation(path, n_t, n_regimes=sys.n_regimes)
    kf = ktilde_values(sys, f, disc.points, disc.regimes, order, h, cutoff)
    return abs(cont.integrate(f) - float(np.dot(disc.weights, kf)))


# --------------------------------------------------------------------------
# histograms and distances


def default_bins(d: int) -> int:
    if d <= 2:
        return 64
    if d == 3:
        return 16
    raise ValueError("histograms are limited to d <= 3; use marginals")


@dataclass
class Histogram:
    """Bin masses per regime on a regular grid over ``[lo, hi]``.

    ``masses`` has shape ``(n_regimes, bins, ..., bins)``.
    """

    lo: np.ndarray
    hi: np.ndarray
    bins: int
    masses: np.ndarray

    @property
    def d(self) -> int:
        return len(self.lo)

    @property
    def n_regimes(self) -> int:
        return self.masses.shape[0]

    def centers(self, axis: int) -> np.ndarray:
        w = (self.hi[axis] - self.lo[axis]) / self.bins
        return self.lo[axis] + (np.arange(self.bins) + 0.5) * w

    def same_grid(self, other: "Histogram") -> bool:
        return (
            self.bins == other.bins
            and self.masses.shape == other.masses.shape
            and np.array_equal(self.lo, other.lo)
            and np.array_equal(self.hi, other.hi)
        )

    def to_csv(self) -> str:
        buf = io.StringIO(newline="")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"x{c + 1}" for c in range(self.d)] + [f"mass{i}" for i in range(self.n_regimes)])
        axes = [self.centers(c) for c in range(self.d)]
        for idx in np.ndindex(*([self.bins] * self.d)):
            w.writerow(
                [repr(float(axes[c][idx[c]])) for c in range(self.d)]
                + [repr(float(self.masses[(i,) + idx])) for i in range(self.n_regimes)]
            )
        return buf.getvalue()


def histogram(measure: EmpiricalMeasure, bins: Optional[int] = None, box: Optional[Box] = None) -> Histogram:
    """Bin a measure on the grid of ``box`` (defaults to the measure's box).

    Atoms on the upper faces go to the last bin; atoms within the clamp
    margin outside the box go to the nearest bin.
    """
    box = box or measure.box
    if box is None:
        raise ValueError("histogram needs a box")
    d = measure.d
    bins = default_bins(d) if bins is None else int(bins)
    default_bins(d)  # rejects d >= 4
    if bins < 1:
        raise ValueError("bins must be >= 1")
    lo, hi = np.asarray(box.lo, dtype=float), np.asarray(box.hi, dtype=float)
    rel = (measure.points - lo) / (hi - lo)
    idx = np.clip(np.floor(rel * bins).astype(np.int64), 0, bins - 1)
    masses = np.zeros((measure.n_regimes,) + (bins,) * d)
    np.add.at(masses, (measure.regimes,) + tuple(idx[:, c] for c in range(d)), measure.weights)
    tot = masses.sum()
    if tot <= 0:
        raise InsufficientData("measure has zero mass")
    return Histogram(lo, hi, bins, masses / tot)


def tv_distance(h1: Histogram, h2: Histogram) -> float:
    """Half the L1 distance between bin masses."""
    if not h1.same_grid(h2):
        raise GridMismatch("histograms have different grids")
    return 0.5 * float(np.abs(h1.masses - h2.masses).sum())


def ks_distance_1d(values, cdf: Callable[[np.ndarray], np.ndarray], weights=None) -> float:
    """Kolmogorov-Smirnov distance between a weighted sample and a CDF.

    The supremum is taken over the sample points using both one-sided
    limits of the empirical CDF, so ties are handled exactly.
    """
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        raise InsufficientData("empty sample")
    w = np.full(values.size, 1.0) if weights is None else np.asarray(weights, dtype=float).ravel()
    order = np.argsort(values, kind="stable")
    v, w = values[order], w[order]
    uniq, start = np.unique(v, return_index=True)
    cum = np.cumsum(w)
    total = cum[-1]
    end = np.append(start[1:], v.size) - 1
    upper = cum[end] / total
    lower = np.concatenate([[0.0], upper[:-1]])
    ref = np.asarray(cdf(uniq), dtype=float)
    return float(max(np.max(np.abs(upper - ref)), np.max(np.abs(lower - ref))))
