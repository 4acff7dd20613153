"""Switching systems: vector fields, jump rates, uniformization and probes."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import _vm
from .expr import (
    Const,
    DomainError,
    Expression,
    differentiate,
    evaluate,
    evaluate_many,
    parse,
    to_string,
)

__all__ = [
    "Box",
    "CallableField",
    "ExprField",
    "InvariantViolation",
    "JumpSequence",
    "SwitchingSystem",
    "ValidationReport",
    "Violation",
    "adapted_weight",
    "probe_grid",
    "q_matrix",
    "suggest_lambda_bar",
    "validate",
]

PROBE_PER_AXIS = 16
PROBE_CAP = 65536


class InvariantViolation(ValueError):
    """A model invariant (rate bounds, irreducibility) fails."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, optionally periodic along some axes."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]
    wrap: tuple[bool, ...] = ()
    margin: float = 1e-6  # relative to the axis width

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != len(hi) or not lo:
            raise ValueError("box bounds must be non-empty and of equal length")
        if any(b <= a for a, b in zip(lo, hi)):
            raise ValueError("box must have hi > lo on every axis")
        wrap = tuple(bool(w) for w in self.wrap) or (False,) * len(lo)
        if len(wrap) != len(lo):
            raise ValueError("wrap flags must match the box dimension")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "wrap", wrap)

    @property
    def d(self) -> int:
        return len(self.lo)

    @property
    def widths(self) -> np.ndarray:
        return np.asarray(self.hi) - np.asarray(self.lo)

    def arrays(self):
        """(lo, hi, wrap, margin) as arrays for the kernels."""
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        return lo, hi, np.asarray(self.wrap, dtype=np.bool_), self.margin * (hi - lo)

    def contains(self, x, slack: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        lo, hi, wrap, margin = self.arrays()
        ok = (x >= lo - margin - slack) & (x <= hi + margin + slack)
        return bool(np.all(ok | wrap))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(n, self.d))


class ExprField:
    """Vector field whose components are expressions."""

    def __init__(self, components: Sequence[Union[Expression, str]], d: Optional[int] = None):
        if d is None:
            d = len(components)
        comps = tuple(parse(c, d) if isinstance(c, str) else c for c in components)
        if len(comps) != d:
            raise ValueError(f"expected {d} components, got {len(comps)}")
        self.components = comps
        self.d = d

    symbolic = True

    @cached_property
    def jacobian_exprs(self) -> tuple[tuple[Expression, ...], ...]:
        """``J[r][c] = d F_r / d x_c`` as expressions."""
        return tuple(
            tuple(differentiate(comp, c + 1) for c in range(self.d)) for comp in self.components
        )

    def __call__(self, x) -> np.ndarray:
        return np.array([evaluate(c, x) for c in self.components])

    def jacobian(self, x) -> np.ndarray:
        return np.array([[evaluate(e, x) for e in row] for row in self.jacobian_exprs])

    def __eq__(self, other):
        return isinstance(other, ExprField) and self.components == other.components

    def __hash__(self):
        return hash(self.components)

    def __repr__(self):
        return "ExprField([" + ", ".join(to_string(c) for c in self.components) + "])"


def fd_jacobian(f: Callable[[np.ndarray], np.ndarray], x, rel: float = 1e-5) -> np.ndarray:
    """Central differences with step ``rel * (1 + |x_c|)`` per coordinate."""
    x = np.asarray(x, dtype=float)
    d = x.size
    cols = []
    for c in range(d):
        step = rel * (1.0 + abs(x[c]))
        e = np.zeros(d)
        e[c] = step
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2.0 * step))
    return np.column_stack(cols)


class CallableField:
    """Programmatic field: ``func(x) -> array`` with an optional Jacobian.

    Without ``jac`` the Jacobian falls back to central finite differences.
    """

    symbolic = False

    def __init__(self, func, d: int, jac=None, name: str = "callable"):
        self.func = func
        self.jac = jac
        self.d = d
        self.name = name

    def __call__(self, x) -> np.ndarray:
        out = np.asarray(self.func(np.asarray(x, dtype=float)), dtype=float)
        if out.shape != (self.d,):
            raise ValueError(f"field returned shape {out.shape}, expected ({self.d},)")
        if not np.all(np.isfinite(out)):
            raise DomainError(f"non-finite field value at {np.asarray(x).tolist()}")
        return out

    def jacobian(self, x) -> np.ndarray:
        if self.jac is not None:
            return np.asarray(self.jac(np.asarray(x, dtype=float)), dtype=float)
        return fd_jacobian(self, x)

    def __repr__(self):
        return f"CallableField({self.name})"


Rate = Union[Expression, Callable[[np.ndarray], float]]


@dataclass(frozen=True)
class JumpSequence:
    """Regimes ``i_0..i_n`` and durations ``u_1..u_n``."""

    indices: tuple[int, ...]
    durations: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        object.__setattr__(self, "durations", tuple(float(u) for u in self.durations))
        if len(self.indices) != len(self.durations) + 1:
            raise ValueError("a jump sequence has exactly one more index than durations")
        if any(u < 0 for u in self.durations):
            raise ValueError("durations must be non-negative")

    @property
    def n(self) -> int:
        return len(self.durations)

    def __add__(self, other: "JumpSequence") -> "JumpSequence":
        """Concatenation through the shared regime: the last index of ``self``
        must equal the first index of ``other``."""
        if self.indices[-1] != other.indices[0]:
            raise ValueError("sequences do not share the junction regime")
        return JumpSequence(self.indices + other.indices[1:], self.durations + other.durations)


class SwitchingSystem:
    """Finite family of vector fields with Markov switching between them.

    Args:
        fields: one field per regime (``ExprField``, ``CallableField`` or a
            list of expression strings).
        rates: ``rates[i][j]`` is the jump rate from ``i`` to ``j``; entries on
            the diagonal are ignored. Strings, expressions, numbers or
            callables ``x -> float``.
        lambda_bar: uniformization constant, strictly above every row sum.
        box: the state box, assumed positively invariant.

    Expressions and their first derivatives are probed on a grid of the box
    at construction; a non-finite value raises :class:`DomainError`.
    """

    def __init__(self, fields, rates, lambda_bar: float, box: Box, name: str = "system", probe: bool = True):
        d = box.d
        self.d = d
        self.box = box
        self.name = name
        self.lambda_bar = float(lambda_bar)
        if not self.lambda_bar > 0:
            raise ValueError("lambda_bar must be positive")
        self.fields = tuple(_as_field(f, d) for f in fields)
        n = len(self.fields)
        if n < 2:
            raise ValueError("a switching system needs at least two regimes")
        if len(rates) != n or any(len(row) != n for row in rates):
            raise ValueError(f"rates must be a {n}x{n} table")
        self.rate_table = tuple(
            tuple(Const(0.0) if i == j else _as_rate(rates[i][j], d) for j in range(n))
            for i in range(n)
        )
        if probe:
            self._domain_probe()

    # -- structure -------------------------------------------------------

    @property
    def n_regimes(self) -> int:
        return len(self.fields)

    @property
    def regimes(self) -> range:
        return range(self.n_regimes)

    @property
    def symbolic(self) -> bool:
        return all(f.symbolic for f in self.fields) and all(
            not callable(r) for row in self.rate_table for r in row
        )

    @cached_property
    def program(self) -> Optional[_vm.Program]:
        """Compiled fields, rates and Jacobians; ``None`` for programmatic models."""
        if not self.symbolic:
            return None
        exprs: list[Expression] = []
        for f in self.fields:
            exprs.extend(f.components)
        for row in self.rate_table:
            exprs.extend(row)
        for f in self.fields:
            for jrow in f.jacobian_exprs:
                exprs.extend(jrow)
        return _vm.compile_expressions(exprs)

    # -- evaluation ------------------------------------------------------

    def field(self, i: int, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        prog = self.program
        if prog is None:
            return self.fields[i](x)
        out = np.empty(self.d)
        stack = np.empty(prog.max_stack)
        if not _vm.eval_field(*prog.arrays(), i, self.d, x, out, stack):
            raise DomainError(f"non-finite value of field {i} at {x.tolist()}")
        return out

    def jacobian(self, i: int, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        prog = self.program
        if prog is None:
            return self.fields[i].jacobian(x)
        out = np.empty((self.d, self.d))
        stack = np.empty(prog.max_stack)
        if not _vm.eval_jacobian(*prog.arrays(), i, self.d, self.n_regimes, x, out, stack):
            raise DomainError(f"non-finite Jacobian of field {i} at {x.tolist()}")
        return out

    def rates(self, i: int, x) -> np.ndarray:
        """Row ``i`` of the rate matrix at ``x`` (zero on the diagonal)."""
        x = np.asarray(x, dtype=float)
        row = np.empty(self.n_regimes)
        for j, r in enumerate(self.rate_table[i]):
            row[j] = float(r(x)) if callable(r) else evaluate(r, x)
        if not np.all(np.isfinite(row)):
            raise DomainError(f"non-finite rate from regime {i} at {x.tolist()}")
        return row

    def rate_matrix(self, x) -> np.ndarray:
        return np.vstack([self.rates(i, x) for i in self.regimes])

    # -- probing ---------------------------------------------------------

    @cached_property
    def probe_points(self) -> np.ndarray:
        return probe_grid(self.box)

    def _domain_probe(self) -> None:
        pts = self.probe_points
        for i, f in enumerate(self.fields):
            if f.symbolic:
                for comp in f.components:
                    evaluate_many(comp, pts)
                for row in f.jacobian_exprs:
                    for e in row:
                        evaluate_many(e, pts)
            else:
                for p in pts:
                    f(p)
        for row in self.rate_table:
            for r in row:
                if not callable(r):
                    evaluate_many(r, pts)
                    for k in range(self.d):
                        evaluate_many(differentiate(r, k + 1), pts)
                else:
                    for p in pts:
                        if not math.isfinite(float(r(p))):
                            raise DomainError(f"non-finite rate at {p.tolist()}")

    def probe_speeds(self, points: Optional[np.ndarray] = None) -> np.ndarray:
        """``|F^i(x)|`` for every probe point (rows) and regime (columns)."""
        pts = self.probe_points if points is None else np.atleast_2d(points)
        return np.column_stack([self._field_many(i, pts) for i in self.regimes])

    def _field_many(self, i: int, pts: np.ndarray) -> np.ndarray:
        f = self.fields[i]
        if f.symbolic:
            vals = np.column_stack([evaluate_many(c, pts) for c in f.components])
        else:
            vals = np.vstack([f(p) for p in pts])
        return np.linalg.norm(vals, axis=1)

    def probe_rates(self) -> np.ndarray:
        """Rate tensor on the probe grid, shape ``(n_points, n_reg, n_reg)``."""
        pts = self.probe_points
        n = self.n_regimes
        out = np.zeros((len(pts), n, n))
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                r = self.rate_table[i][j]
                if callable(r):
                    out[:, i, j] = [float(r(p)) for p in pts]
                else:
                    out[:, i, j] = evaluate_many(r, pts)
        return out

    @cached_property
    def speed_bound(self) -> float:
        """Largest ``|F^i(x)|`` over the probe grid and all regimes."""
        return float(self.probe_speeds().max())

    # -- misc ------------------------------------------------------------

    def relabel(self, perm: Sequence[int]) -> "SwitchingSystem":
        """Same model with regime ``k`` renamed ``perm[k]``."""
        n = self.n_regimes
        inv = [0] * n
        for k, p in enumerate(perm):
            inv[p] = k
        fields = [self.fields[inv[p]] for p in range(n)]
        rates = [[self.rate_table[inv[p]][inv[q]] for q in range(n)] for p in range(n)]
        return SwitchingSystem(fields, rates, self.lambda_bar, self.box, self.name, probe=False)

    def describe(self) -> dict:
        def show(v):
            return "<callable>" if callable(v) else to_string(v)

        return {
            "name": self.name,
            "d": self.d,
            "regimes": self.n_regimes,
            "fields": [
                [to_string(c) for c in f.components] if f.symbolic else repr(f) for f in self.fields
            ],
            "rates": [[show(r) for r in row] for row in self.rate_table],
            "lambda_bar": self.lambda_bar,
            "box": {"lo": list(self.box.lo), "hi": list(self.box.hi), "wrap": list(self.box.wrap)},
        }

    def __repr__(self):
        return f"SwitchingSystem({self.name!r}, d={self.d}, regimes={self.n_regimes})"

    # validation is cached on the instance
    @cached_property
    def report(self) -> "ValidationReport":
        return validate(self)

    def ensure_valid(self, require_irreducible: bool = False) -> None:
        """Raise on violations that make sampling ill-defined.

        A reducible jump graph still gives a well-defined process, so it only
        raises when ``require_irreducible`` is set.
        """
        kinds = self.report.kinds()
        if not require_irreducible:
            kinds = kinds - {"not irreducible"}
        if kinds:
            raise InvariantViolation(self.report.summary())


def _as_field(f, d: int):
    if isinstance(f, (ExprField, CallableField)):
        if f.d != d:
            raise ValueError("field dimension does not match the box")
        return f
    if callable(f):
        return CallableField(f, d)
    return ExprField(list(f), d)


def _as_rate(r, d: int) -> Rate:
    if isinstance(r, str):
        return parse(r, d)
    if isinstance(r, (int, float)):
        return Const(float(r))
    return r


def probe_grid(box: Box, per_axis: int = PROBE_PER_AXIS, cap: int = PROBE_CAP) -> np.ndarray:
    """Tensor grid with ``per_axis`` points per axis (capped in total) plus corners.

    Periodic axes omit the right end point, which coincides with the left.
    """
    d = box.d
    k = per_axis
    while k ** d > cap and k > 2:
        k -= 1
    axes = []
    for lo, hi, wrap in zip(box.lo, box.hi, box.wrap):
        if wrap:
            axes.append(np.linspace(lo, hi, k, endpoint=False))
        else:
            axes.append(np.linspace(lo, hi, k))
    grid = np.array(list(itertools.product(*axes)), dtype=float)
    corners = np.array(list(itertools.product(*zip(box.lo, box.hi))), dtype=float)
    return np.unique(np.vstack([grid, corners]), axis=0)


# --------------------------------------------------------------------------
# uniformization


def q_matrix(sys: SwitchingSystem, x) -> np.ndarray:
    """Transition matrix of the thinning construction at ``x``.

    ``Q[i, j] = rate(x, i, j) / lambda_bar`` off the diagonal and
    ``Q[i, i] = 1 - sum_j Q[i, j]``.
    """
    rates = sys.rate_matrix(x)
    sums = rates.sum(axis=1)
    bad = np.nonzero(sums >= sys.lambda_bar)[0]
    if bad.size:
        raise InvariantViolation(
            f"rate row sum {sums[bad[0]]:.6g} of regime {bad[0]} reaches lambda_bar "
            f"{sys.lambda_bar:.6g} at {np.asarray(x).tolist()}"
        )
    q = rates / sys.lambda_bar
    np.fill_diagonal(q, 0.0)
    np.fill_diagonal(q, 1.0 - q.sum(axis=1))
    return q


def adapted_weight(sys: SwitchingSystem, x, seq: JumpSequence, h: float = 1e-3) -> float:
    """Probability weight ``prod_k Q(x_k, i_{k-1}, i_k)`` along the composite flow.

    The sequence is adapted to ``x`` iff the weight is positive.
    """
    from .flow import composite_flow

    if seq.n == 0:
        return 1.0
    _, points = composite_flow(sys, x, seq, h)
    w = 1.0
    for k in range(1, seq.n + 1):
        q = q_matrix(sys, points[k])
        w *= q[seq.indices[k - 1], seq.indices[k]]
    return float(w)


def suggest_lambda_bar(sys: SwitchingSystem, factor: float = 1.2) -> float:
    """``factor`` times the largest rate row sum seen on the probe grid."""
    top = float(sys.probe_rates().sum(axis=2).max())
    return factor * top if top > 0 else 1.0


# --------------------------------------------------------------------------
# validation


@dataclass
class Violation:
    kind: str
    point: tuple[float, ...]
    detail: str = ""

    def as_dict(self) -> dict:
        return {"kind": self.kind, "point": list(self.point), "detail": self.detail}


@dataclass
class ValidationReport:
    system: str
    n_probe_points: int
    speed_bound: float
    max_row_sum: float
    lambda_bar: float
    violations: list[Violation] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.violations

    def kinds(self) -> set[str]:
        return {v.kind for v in self.violations}

    def summary(self) -> str:
        if self.valid:
            return f"{self.system}: valid"
        kinds = ", ".join(sorted(self.kinds()))
        first = self.violations[0]
        return f"{self.system}: {len(self.violations)} violation(s) [{kinds}]; first at {list(first.point)}: {first.detail}"

    def as_dict(self) -> dict:
        return {
            "system": self.system,
            "valid": self.valid,
            "n_probe_points": self.n_probe_points,
            "speed_bound": self.speed_bound,
            "max_row_sum": self.max_row_sum,
            "lambda_bar": self.lambda_bar,
            "violations": [v.as_dict() for v in self.violations],
        }


def strongly_connected(adj: np.ndarray) -> bool:
    n = adj.shape[0]

    def reach(mat):
        seen = {0}
        todo = [0]
        while todo:
            i = todo.pop()
            for j in np.nonzero(mat[i])[0]:
                if j not in seen:
                    seen.add(int(j))
                    todo.append(int(j))
        return len(seen) == n

    return reach(adj) and reach(adj.T)


def validate(sys: SwitchingSystem, max_reports: int = 20) -> ValidationReport:
    """Check rates, uniformization and irreducibility on the probe grid."""
    pts = sys.probe_points
    rates = sys.probe_rates()
    speeds = sys.probe_speeds()
    sums = rates.sum(axis=2)
    speed_bound = float(speeds.max())
    report = ValidationReport(
        system=sys.name,
        n_probe_points=len(pts),
        speed_bound=speed_bound,
        max_row_sum=float(sums.max()),
        lambda_bar=sys.lambda_bar,
    )
    found: dict[str, int] = {}

    def add(kind, p, detail):
        found[kind] = found.get(kind, 0) + 1
        if found[kind] <= max_reports:
            report.violations.append(Violation(kind, tuple(float(v) for v in p), detail))

    if not math.isfinite(speed_bound):
        add("non-finite speed bound", pts[0], "field norm is not finite")
    for k, p in enumerate(pts):
        neg = np.argwhere(rates[k] < 0)
        for i, j in neg:
            add("negative rate", p, f"rate({i}->{j}) = {rates[k, i, j]:.6g}")
        for i in np.nonzero(sums[k] >= sys.lambda_bar)[0]:
            add("rate row sum >= lambda_bar", p, f"regime {i}: {sums[k, i]:.6g} >= {sys.lambda_bar:.6g}")
        if not strongly_connected(rates[k] > 0):
            add("not irreducible", p, "jump graph is not strongly connected")
    return report
