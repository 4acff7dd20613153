"""Lie brackets of vector fields and the weak/strong bracket conditions.

Brackets of expression fields are computed symbolically, so iterated
brackets carry no discretization error. Programmatic fields fall back to
nested central differences; such brackets beyond order 2 are flagged as
low confidence in reports.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterator, Literal, Optional, Sequence, Union

import numpy as np

from . import _vm
from .expr import add, is_zero, mul, sub
from .flow import DEFAULT_RANK_TOL
from .system import CallableField, ExprField, SwitchingSystem

__all__ = [
    "BracketFamily",
    "BracketReport",
    "FamilyExplosion",
    "NUMERIC_STEP",
    "check_condition",
    "field_difference",
    "grid_points",
    "lie_bracket",
    "numeric_bracket",
    "scan_region",
    "strong_family",
    "verdict_csv",
    "weak_family",
]

DEFAULT_K_MAX = 4
DEFAULT_CAP = 512
NUMERIC_STEP = 1e-4

Field = Union[ExprField, CallableField]
Kind = Literal["weak", "strong"]


class FamilyExplosion(RuntimeError):
    """The bracket family outgrew its size cap before ``k_max``."""


def _level(f) -> int:
    return getattr(f, "level", 0)


def _central_jacobian(f, x, step: float = NUMERIC_STEP) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    cols = []
    for c in range(x.size):
        e = np.zeros(x.size)
        e[c] = step * (1.0 + abs(x[c]))
        cols.append((f(x + e) - f(x - e)) / (2.0 * e[c]))
    return np.column_stack(cols)


def numeric_bracket(F: Field, G: Field, step: float = NUMERIC_STEP) -> CallableField:
    """``[F, G] = DG F - DF G`` with both Jacobians by central differences.

    The result's own Jacobian is again a central difference, so iterating
    nests the differences one level per order.
    """
    if F.d != G.d:
        raise ValueError("fields have different dimensions")

    def value(x):
        return _central_jacobian(G, x, step) @ F(x) - _central_jacobian(F, x, step) @ G(x)

    out = CallableField(value, F.d, jac=lambda x: _central_jacobian(out, x, step), name=f"[{F!r}, {G!r}]")
    out.level = max(_level(F), _level(G)) + 1
    return out


def lie_bracket(F: Field, G: Field) -> Field:
    """``[F, G](x) = DG(x) F(x) - DF(x) G(x)``.

    Symbolic in, symbolic out: two expression fields give an expression
    field. Otherwise the analytic Jacobians of the inputs are used when
    available and the result is a programmatic field.
    """
    if F.d != G.d:
        raise ValueError("fields have different dimensions")
    d = F.d
    if isinstance(F, ExprField) and isinstance(G, ExprField):
        jf, jg = F.jacobian_exprs, G.jacobian_exprs
        comps = []
        for r in range(d):
            acc = sub(mul(jg[r][0], F.components[0]), mul(jf[r][0], G.components[0]))
            for c in range(1, d):
                acc = add(acc, sub(mul(jg[r][c], F.components[c]), mul(jf[r][c], G.components[c])))
            comps.append(acc)
        return ExprField(comps, d)

    def value(x):
        return G.jacobian(x) @ F(x) - F.jacobian(x) @ G(x)

    out = CallableField(value, d, jac=lambda x: _central_jacobian(out, x), name=f"[{F!r}, {G!r}]")
    out.level = max(_level(F), _level(G)) + 1
    return out


def field_difference(F: Field, G: Field) -> Field:
    """``F - G``, symbolic when both are expression fields."""
    if isinstance(F, ExprField) and isinstance(G, ExprField):
        return ExprField([sub(a, b) for a, b in zip(F.components, G.components)], F.d)

    def value(x):
        return F(x) - G(x)

    def jac(x):
        return F.jacobian(x) - G.jacobian(x)

    out = CallableField(value, F.d, jac=jac, name=f"({F!r} - {G!r})")
    out.level = max(_level(F), _level(G))
    return out


def _is_zero_field(f: Field) -> bool:
    return isinstance(f, ExprField) and all(is_zero(c) for c in f.components)


@dataclass
class BracketFamily:
    """Fields grouped by the order at which they first appear."""

    kind: str
    orders: list[list[Field]] = field(default_factory=list)

    @property
    def sizes(self) -> list[int]:
        """Cumulative family size per order."""
        return [int(v) for v in np.cumsum([len(o) for o in self.orders])]

    def upto(self, k: int) -> list[Field]:
        return [f for o in self.orders[: k + 1] for f in o]


def _seed(sys: SwitchingSystem, kind: str) -> list[Field]:
    if kind == "weak":
        return list(sys.fields)
    if kind == "strong":
        n = sys.n_regimes
        return [field_difference(sys.fields[i], sys.fields[j]) for i in range(n) for j in range(n) if i != j]
    raise ValueError("kind must be 'weak' or 'strong'")


def _iter_orders(sys: SwitchingSystem, kind: str, k_max: int, cap: int) -> Iterator[list[Field]]:
    """Yield the new fields of orders 0..k_max, deduplicated syntactically."""
    if k_max < 0:
        raise ValueError("k_max must be >= 0")
    seen: set = set()
    total = 0

    def admit(cands):
        nonlocal total
        out = []
        for f in cands:
            if _is_zero_field(f):
                continue
            key = f.components if isinstance(f, ExprField) else id(f)
            if key in seen:
                continue
            seen.add(key)
            out.append(f)
        total += len(out)
        return out

    new = admit(_seed(sys, kind))
    yield new
    for k in range(1, k_max + 1):
        if total > cap:
            raise FamilyExplosion(f"{kind} family has {total} fields at order {k - 1}, cap {cap}")
        new = admit([lie_bracket(F, V) for V in new for F in sys.fields])
        yield new
    if total > cap:
        raise FamilyExplosion(f"{kind} family has {total} fields at order {k_max}, cap {cap}")


def weak_family(sys: SwitchingSystem, k_max: int = DEFAULT_K_MAX, cap: int = DEFAULT_CAP) -> BracketFamily:
    """``F_0 = {F^i}``, ``F_k = F_{k-1} + {[F^i, V] : V in F_{k-1}}``."""
    return BracketFamily("weak", list(_iter_orders(sys, "weak", k_max, cap)))


def strong_family(sys: SwitchingSystem, k_max: int = DEFAULT_K_MAX, cap: int = DEFAULT_CAP) -> BracketFamily:
    """``G_0 = {F^i - F^j : i != j}``, then brackets with the ``F^i``."""
    return BracketFamily("strong", list(_iter_orders(sys, "strong", k_max, cap)))


@dataclass
class BracketReport:
    point: np.ndarray
    kind: str
    k_max: int
    ranks: list[int]
    singular_values: np.ndarray
    family_sizes: list[int]
    low_confidence: bool = False

    @property
    def satisfied(self) -> bool:
        return bool(self.ranks) and self.ranks[-1] == len(self.point)

    @property
    def order_achieved(self) -> Optional[int]:
        """First order at which the family spans the whole space."""
        d = len(self.point)
        for k, r in enumerate(self.ranks):
            if r == d:
                return k
        return None

    @property
    def rank(self) -> int:
        return self.ranks[-1] if self.ranks else 0

    @property
    def verdict(self) -> str:
        return "satisfied" if self.satisfied else "not-at-this-order"

    def as_dict(self) -> dict:
        return {
            "point": [float(v) for v in self.point],
            "kind": self.kind,
            "k_max": self.k_max,
            "ranks": list(self.ranks),
            "singular_values": [float(s) for s in self.singular_values],
            "family_sizes": list(self.family_sizes),
            "verdict": self.verdict,
            "order_achieved": self.order_achieved,
            "low_confidence": self.low_confidence,
        }


class _Evaluator:
    """Evaluates a list of fields at points; expression fields are compiled."""

    def __init__(self, fields: Sequence[Field], d: int):
        self.fields = list(fields)
        self.d = d
        self.symbolic = all(isinstance(f, ExprField) for f in self.fields)
        if self.symbolic and self.fields:
            self.prog = _vm.compile_expressions([c for f in self.fields for c in f.components])

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Matrix with one column per field."""
        if not self.fields:
            return np.zeros((self.d, 0))
        if self.symbolic:
            pts = np.asarray(x, dtype=float)[None, :]
            p = self.prog
            vals = np.array(
                [_vm.eval_points(*p.arrays(), s, pts, p.max_stack)[0] for s in range(p.n_slots)]
            )
            return vals.reshape(len(self.fields), self.d).T
        return np.column_stack([f(x) for f in self.fields])


def _rank(mat: np.ndarray, tol: float) -> tuple[int, np.ndarray]:
    if mat.shape[1] == 0:
        return 0, np.zeros(0)
    if not np.all(np.isfinite(mat)):
        raise ArithmeticError("non-finite bracket value")
    sv = np.linalg.svd(mat, compute_uv=False)
    if sv[0] == 0.0:
        return 0, sv
    return int(np.sum(sv > tol * sv[0])), sv


def _report(orders, evals, x, kind, k_max, tol) -> BracketReport:
    d = len(x)
    ranks: list[int] = []
    sizes: list[int] = []
    cols = []
    sv = np.zeros(0)
    low = False
    for k, ev in enumerate(evals):
        cols.append(ev(x))
        sizes.append((sizes[-1] if sizes else 0) + len(orders[k]))
        low = low or any(_level(f) > 2 for f in orders[k])
        r, sv = _rank(np.hstack(cols), tol)
        if ranks and r < ranks[-1]:
            r = ranks[-1]  # a larger family never spans less
        ranks.append(r)
        if r == d:
            break
    return BracketReport(np.asarray(x, dtype=float), kind, k_max, ranks, sv, sizes, low)


def check_condition(
    sys: SwitchingSystem,
    x,
    kind: Kind = "weak",
    k_max: int = DEFAULT_K_MAX,
    tol: float = DEFAULT_RANK_TOL,
    cap: int = DEFAULT_CAP,
) -> BracketReport:
    """Rank of the weak or strong family at ``x`` order by order.

    Orders are built lazily and the scan stops as soon as the rank is ``d``.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (sys.d,):
        raise ValueError(f"point must have {sys.d} coordinates")
    if not sys.box.contains(x, slack=1e-9):
        raise ValueError(f"point {x.tolist()} is outside the box")
    orders: list[list[Field]] = []
    evals = []
    d = sys.d
    ranks_done = None
    for new in _iter_orders(sys, kind, k_max, cap):
        orders.append(new)
        evals.append(_Evaluator(new, d))
        rep = _report(orders, evals, x, kind, k_max, tol)
        ranks_done = rep
        if rep.satisfied:
            break
    return ranks_done


def scan_region(
    sys: SwitchingSystem,
    points,
    kinds: Sequence[str] = ("weak", "strong"),
    k_max: int = DEFAULT_K_MAX,
    tol: float = DEFAULT_RANK_TOL,
    cap: int = DEFAULT_CAP,
) -> list[BracketReport]:
    """Check each kind at each point; families are built once per kind."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    out = []
    for kind in kinds:
        orders = list(_iter_orders(sys, kind, k_max, cap))
        evals = [_Evaluator(o, sys.d) for o in orders]
        for x in points:
            if not sys.box.contains(x, slack=1e-9):
                raise ValueError(f"point {x.tolist()} is outside the box")
            out.append(_report(orders, evals, x, kind, k_max, tol))
    return out


def grid_points(sys: SwitchingSystem, per_axis: int) -> np.ndarray:
    """Cell-centred grid with ``per_axis`` points per axis."""
    axes = [lo + (np.arange(per_axis) + 0.5) * (hi - lo) / per_axis for lo, hi in zip(sys.box.lo, sys.box.hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def verdict_csv(reports: Sequence[BracketReport]) -> str:
    """Columns ``x1..xd, kind, order_achieved, rank, satisfied``."""
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    d = len(reports[0].point) if reports else 0
    w.writerow([f"x{c + 1}" for c in range(d)] + ["kind", "order_achieved", "rank", "satisfied"])
    for r in reports:
        k = r.order_achieved
        w.writerow(
            [repr(float(v)) for v in r.point]
            + [r.kind, "" if k is None else k, r.rank, "true" if r.satisfied else "false"]
        )
    return buf.getvalue()
