"""Catalog of reference systems with closed-form reference quantities.

Every reference value is stored as a :class:`Reference`: a closed-form
formula, an independent numerical oracle and a tolerance. ``check()``
recomputes both, so a typo in either shows up as a failed check instead of
a silently wrong constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np

from .system import Box, SwitchingSystem, fd_jacobian

__all__ = [
    "CATALOG",
    "ExampleSpec",
    "RefCheck",
    "Reference",
    "TRANSIENCE_C",
    "b_closed_form",
    "b_newton",
    "get_example",
    "interval_beta",
    "planar_linear",
    "radulescu",
    "torus",
]

TRANSIENCE_C = 3.0 * math.sqrt(3.0) / 8.0


@dataclass(frozen=True)
class RefCheck:
    name: str
    value: Any
    oracle: Any
    error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return bool(self.error <= self.tolerance)


@dataclass(frozen=True)
class Reference:
    """A reference quantity: ``formula`` text, its evaluation ``value()``,
    an independent ``oracle()`` and the tolerance between them."""

    name: str
    formula: str
    value: Callable[[], Any]
    oracle: Callable[[], Any]
    tolerance: float

    def check(self) -> RefCheck:
        v = np.asarray(self.value(), dtype=float)
        o = np.asarray(self.oracle(), dtype=float)
        err = float(np.max(np.abs(v - o))) if v.size else 0.0
        return RefCheck(self.name, v.tolist(), o.tolist(), err, self.tolerance)


@dataclass
class ExampleSpec:
    name: str
    params: dict
    system: SwitchingSystem
    references: dict[str, Reference] = field(default_factory=dict)
    gamma: str = ""
    invariant_law: str = ""
    start: tuple = ()
    extras: dict = field(default_factory=dict)

    def check_references(self) -> dict[str, RefCheck]:
        return {k: r.check() for k, r in self.references.items()}

    def value(self, key: str):
        return self.references[key].value()


def _num(v: float) -> str:
    v = float(v)
    if not math.isfinite(v):
        raise ValueError("parameters must be finite")
    return f"({v!r})" if v < 0 or repr(v).startswith("-") else repr(v)


def _add(a: str, coef: float, var: str) -> str:
    if coef == 0:
        return a
    term = f"{_num(coef)}*{var}"
    return term if a == "" else f"{a} + {term}"


# --------------------------------------------------------------------------
# torus


def torus(d: int = 2, rate: float = 1.0, lambda_bar: Optional[float] = None) -> ExampleSpec:
    """Constant unit fields ``F^i = e_i`` on the flat torus ``[0,1)^d``.

    One regime per axis, constant rates between all regimes.
    """
    if d < 2:
        raise ValueError("the torus example needs d >= 2")
    fields = [["1.0" if c == i else "0.0" for c in range(d)] for i in range(d)]
    rates = [[0.0 if i == j else rate for j in range(d)] for i in range(d)]
    lam = float(d + 1) * max(rate, 1.0) if lambda_bar is None else float(lambda_bar)
    sys = SwitchingSystem(fields, rates, lam, Box((0.0,) * d, (1.0,) * d, wrap=(True,) * d), name=f"torus{d}")
    e = np.eye(d)

    refs = {
        "weak_rank": Reference("weak_rank", "rank{e_i} = d", lambda: d, lambda: np.linalg.matrix_rank(e), 0),
        "strong_rank": Reference(
            "strong_rank",
            "rank{e_i - e_j} = d - 1",
            lambda: d - 1,
            lambda: np.linalg.matrix_rank(np.array([e[i] - e[j] for i in range(d) for j in range(d) if i != j])),
            0,
        ),
    }
    return ExampleSpec(
        f"torus{d}", {"d": d, "rate": rate}, sys, refs,
        gamma="whole torus", invariant_law="uniform on the torus in each regime",
        start=((0.5,) * d, 0),
    )


# --------------------------------------------------------------------------
# planar linear flows


def quadratic_form_bound(A) -> float:
    """Largest ``alpha`` with ``<Ax, x> <= -alpha |x|^2`` in the Euclidean norm."""
    A = np.asarray(A, dtype=float)
    return float(-np.linalg.eigvalsh(0.5 * (A + A.T)).max())


def planar_linear(
    A=((-1.0, -1.0), (1.0, -1.0)),
    a=(1.0, 0.0),
    lambda0: float = 1.0,
    lambda1: float = 1.0,
    radius: Optional[float] = None,
    lambda_bar: Optional[float] = None,
) -> ExampleSpec:
    """``F^0(x) = Ax`` and ``F^1(x) = A(x - a)``.

    The box is the square circumscribing the disc of radius ``radius``
    (default ``3(|a| + 1)``). Any radius above ``|Aa| / alpha_A`` makes the
    disc positively invariant; the square itself is clamp-monitored.
    """
    A = np.asarray(A, dtype=float)
    a = np.asarray(a, dtype=float)
    if A.shape != (2, 2) or a.shape != (2,):
        raise ValueError("A must be 2x2 and a a 2-vector")
    eig = np.linalg.eigvals(A)
    if np.any(eig.real >= 0):
        raise ValueError("A must have eigenvalues with negative real parts")
    alpha_A = quadratic_form_bound(A)
    min_radius = float(np.linalg.norm(A @ a) / alpha_A) if alpha_A > 0 else math.inf
    R = 3.0 * (np.linalg.norm(a) + 1.0) if radius is None else float(radius)
    Aa = A @ a
    f0, f1 = [], []
    for r in range(2):
        e0 = _add(_add("", A[r, 0], "x1"), A[r, 1], "x2") or "0.0"
        f0.append(e0)
        f1.append(f"{e0} - {_num(Aa[r])}" if Aa[r] != 0 else e0)
    lam = 1.2 * max(lambda0, lambda1) + 1.0 if lambda_bar is None else float(lambda_bar)
    sys = SwitchingSystem(
        [f0, f1], [[0.0, lambda0], [lambda1, 0.0]], lam, Box((-R, -R), (R, R)), name="planar_linear"
    )
    is_eigvec = abs(float(np.linalg.det(np.column_stack([a, Aa])))) < 1e-12
    complex_eig = bool(np.any(np.abs(eig.imag) > 0))

    def det_identity_gap():
        pts = np.random.default_rng(0).uniform(-R, R, size=(20, 2))
        gaps = [
            np.linalg.det(np.column_stack([sys.field(0, x), sys.field(1, x)]))
            - np.linalg.det(A) * np.linalg.det(np.column_stack([a, x]))
            for x in pts
        ]
        return np.max(np.abs(gaps))

    tr, det = float(np.trace(A)), float(np.linalg.det(A))
    disc = complex(tr * tr - 4 * det) ** 0.5

    refs = {
        "det_identity": Reference(
            "det_identity", "det(F0, F1)(x) - det(A) det(a, x) = 0", lambda: 0.0, det_identity_gap, 1e-10
        ),
        "eigenvalues": Reference(
            "eigenvalues",
            "(tr A -+ sqrt(tr^2 - 4 det)) / 2",
            lambda: np.sort_complex(np.array([(tr - disc) / 2, (tr + disc) / 2])).view(float),
            lambda: np.sort_complex(np.linalg.eigvals(A).astype(complex)).view(float),
            1e-12,
        ),
        "det_Aa_A2a": Reference(
            "det_Aa_A2a",
            "det(Aa | A^2 a) = det(A) det(a | Aa)",
            lambda: det * float(np.linalg.det(np.column_stack([a, Aa]))),
            lambda: float(np.linalg.det(np.column_stack([Aa, A @ Aa]))),
            1e-12,
        ),
        "equilibria": Reference(
            "equilibria",
            "F0(0) = 0 and F1(a) = 0",
            lambda: [0.0, 0.0, 0.0, 0.0],
            lambda: np.concatenate([sys.field(0, np.zeros(2)), sys.field(1, a)]),
            1e-12,
        ),
    }
    if is_eigvec:
        gamma = "segment [0, a]"
    elif complex_eig:
        gamma = "bounded region enclosed by the spiralling arcs through 0 and a"
    else:
        gamma = "closure of the bounded component cut out by the arcs from a to 0 and from 0 to a"
    return ExampleSpec(
        "planar_linear",
        {"A": A.tolist(), "a": a.tolist(), "lambda0": lambda0, "lambda1": lambda1, "radius": R},
        sys,
        refs,
        gamma=gamma,
        invariant_law="unique; absolutely continuous off the line R a when a is not an eigenvector",
        start=((0.5 * a).tolist(), 0),
        extras={
            "A": A,
            "a": a,
            "min_invariant_radius": min_radius,
            "a_is_eigenvector": is_eigvec,
            "complex_eigenvalues": complex_eig,
        },
    )


# --------------------------------------------------------------------------
# one-dimensional Beta example


def interval_beta(lam: float = 2.0) -> ExampleSpec:
    """``F^0(x) = -x``, ``F^1(x) = -(x - 1)`` on ``[0, 1]`` with rates ``lam``.

    The invariant law has regime marginals ``Beta(lam, lam + 1)`` and
    ``Beta(lam + 1, lam)``, each with mass 1/2.
    """
    from scipy import integrate, stats

    if not lam > 0:
        raise ValueError("the rate must be positive")
    sys = SwitchingSystem(
        [["-x1"], ["-(x1 - 1.0)"]], [[0.0, lam], [lam, 0.0]], 2.0 * lam + 1.0, Box((0.0,), (1.0,)), name="interval_beta"
    )
    mu = [stats.beta(lam, lam + 1.0), stats.beta(lam + 1.0, lam)]

    def density_mean(i):
        # mean of the unnormalised density x^(lam-1)(1-x)^lam (or mirrored)
        p, q = (lam - 1.0, lam) if i == 0 else (lam, lam - 1.0)
        opts = {"limit": 200}
        mass = integrate.quad(lambda x: x**p * (1 - x) ** q, 0, 1, **opts)[0]
        first = integrate.quad(lambda x: x ** (p + 1) * (1 - x) ** q, 0, 1, **opts)[0]
        return first / mass

    refs = {
        "mean0": Reference("mean0", "lam / (2 lam + 1)", lambda: lam / (2 * lam + 1), lambda: density_mean(0), 1e-8),
        "mean1": Reference(
            "mean1", "(lam + 1) / (2 lam + 1)", lambda: (lam + 1) / (2 * lam + 1), lambda: density_mean(1), 1e-8
        ),
        "beta_mean0": Reference("beta_mean0", "Beta(lam, lam+1) mean", lambda: lam / (2 * lam + 1), lambda: mu[0].mean(), 1e-12),
    }
    return ExampleSpec(
        "interval_beta",
        {"lambda": lam},
        sys,
        refs,
        gamma="[0, 1]",
        invariant_law=f"mu0 = Beta({lam}, {lam + 1}), mu1 = Beta({lam + 1}, {lam}), regime masses 1/2",
        start=((0.5,), 0),
        extras={"cdf": [m.cdf for m in mu], "laws": mu, "unbounded_density": lam < 1},
    )


# --------------------------------------------------------------------------
# the two-gene toggle example


def b_closed_form(alpha: float) -> float:
    """Real root of ``b^3 + b = alpha`` by Cardano's formula."""
    s = math.sqrt(4.0 / 27.0 + alpha * alpha)
    return ((s + alpha) / 2.0) ** (1.0 / 3.0) - ((s - alpha) / 2.0) ** (1.0 / 3.0)


def b_newton(alpha: float, tol: float = 1e-15, max_iter: int = 100) -> float:
    """Same root by Newton's method from ``x = alpha^(1/3)``."""
    x = max(abs(alpha), 1e-300) ** (1.0 / 3.0) * (1.0 if alpha >= 0 else -1.0)
    for _ in range(max_iter):
        step = (x**3 + x - alpha) / (3 * x * x + 1)
        x -= step
        if abs(step) <= tol * max(1.0, abs(x)):
            break
    return x


def _h_max() -> float:
    """Numerical maximum of ``(x + y) / ((1 + x^2)(1 + y^2))`` on the quadrant."""
    from scipy.optimize import minimize

    res = minimize(
        lambda p: -(p[0] + p[1]) / ((1 + p[0] ** 2) * (1 + p[1] ** 2)),
        x0=[0.3, 0.8],
        bounds=[(0, 10), (0, 10)],
        method="L-BFGS-B",
        options={"ftol": 1e-15, "gtol": 1e-12},
    )
    return float(-res.fun)


def radulescu(
    alpha: float = 3.0,
    lambda0: float = 1.0,
    lambda1: float = 1.0,
    lambda_bar: Optional[float] = None,
    coordinates: str = "xy",
) -> ExampleSpec:
    """``F^0 = (-x + alpha, -y + alpha)``,
    ``F^1 = (-x + alpha / (1 + y^2), -y + alpha / (1 + x^2))``.

    ``lambda0`` is the rate of leaving regime 0 and ``lambda1`` of leaving
    regime 1. With ``coordinates="sum-difference"`` the same system is
    written in ``u = (x + y) / 2``, ``v = (x - y) / 2``. The difference
    equation is then proportional to ``v``, so ``x - y`` keeps full relative
    precision when it decays far below the spacing of doubles near ``x``.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    A = _num(alpha)
    lam = (max(lambda0, lambda1) + 1.0) * 1.2 if lambda_bar is None else float(lambda_bar)
    rates = [[0.0, lambda0], [lambda1, 0.0]]
    if coordinates == "xy":
        fields = [
            [f"-x1 + {A}", f"-x2 + {A}"],
            [f"-x1 + {A}/(1 + x2^2)", f"-x2 + {A}/(1 + x1^2)"],
        ]
        box = Box((0.0, 0.0), (alpha + 1.0, alpha + 1.0))
        start = ((2.5, 0.5), 0)
    elif coordinates == "sum-difference":
        p = "(1 + (x1 - x2)^2)"
        q = "(1 + (x1 + x2)^2)"
        fields = [
            [f"-x1 + {A}", "-x2"],
            [f"-x1 + 0.5*{A}*(1/{p} + 1/{q})", f"-x2 + 2*{A}*x1*x2/({p}*{q})"],
        ]
        half = (alpha + 1.0) / 2.0
        box = Box((0.0, -half), (alpha + 1.0, half))
        start = ((1.5, 1.0), 0)
    else:
        raise ValueError("coordinates must be 'xy' or 'sum-difference'")
    sys = SwitchingSystem(fields, rates, lam, box, name=f"radulescu[{coordinates}]")

    def f1(x):
        x = np.asarray(x, dtype=float)
        return np.array([-x[0] + alpha / (1 + x[1] ** 2), -x[1] + alpha / (1 + x[0] ** 2)])

    def eig_fd(p):
        return np.sort(np.linalg.eigvals(fd_jacobian(f1, p)).real)

    refs: dict[str, Reference] = {
        "b": Reference(
            "b", "((sqrt(4/27 + alpha^2) + alpha)/2)^(1/3) - ((sqrt(4/27 + alpha^2) - alpha)/2)^(1/3)",
            lambda: b_closed_form(alpha), lambda: b_newton(alpha), 1e-10,
        ),
        "F1_at_bb": Reference(
            "F1_at_bb", "|F1(b, b)| = 0", lambda: 0.0, lambda: np.linalg.norm(f1([b_newton(alpha)] * 2)), 1e-10
        ),
        "eta_bb": Reference(
            "eta_bb", "(-3 + 2b/alpha, 1 - 2b/alpha)",
            lambda: np.sort([-3 + 2 * b_newton(alpha) / alpha, 1 - 2 * b_newton(alpha) / alpha]),
            lambda: eig_fd([b_newton(alpha)] * 2), 1e-6,
        ),
        "c": Reference("c", "3 sqrt(3) / 8", lambda: TRANSIENCE_C, _h_max, 1e-8),
        "threshold": Reference(
            "threshold", "c alpha - 1", lambda: TRANSIENCE_C * alpha - 1, lambda: _h_max() * alpha - 1, 1e-7
        ),
    }
    if alpha > 2:
        a = (alpha + math.sqrt(abs(alpha * alpha - 4))) / 2
        refs["a"] = Reference(
            "a", "(alpha + sqrt(|alpha^2 - 4|)) / 2", lambda: a, lambda: float(np.max(np.roots([1, -alpha, 1]).real)), 1e-12
        )
        refs["F1_at_sink"] = Reference(
            "F1_at_sink", "|F1(a, 1/a)| = 0", lambda: 0.0, lambda: np.linalg.norm(f1([a, 1 / a])), 1e-10
        )
        refs["eig_sink"] = Reference(
            "eig_sink", "-1 -+ 2/alpha", lambda: np.array([-1 - 2 / alpha, -1 + 2 / alpha]), lambda: eig_fd([a, 1 / a]), 1e-6
        )
    rate = -(lambda1 - (TRANSIENCE_C * alpha - 1) * lambda0) / (lambda0 + lambda1)
    b = b_newton(alpha)
    return ExampleSpec(
        "radulescu",
        {"alpha": alpha, "lambda0": lambda0, "lambda1": lambda1, "coordinates": coordinates},
        sys,
        refs,
        gamma=f"diagonal segment {{(x, x): x in [{b:.6g}, {alpha:.6g}]}}",
        invariant_law="unique when lambda1 > lambda0 (c alpha - 1); three ergodic measures for small lambda1/lambda0",
        start=start,
        extras={
            "b": b,
            "a": (alpha + math.sqrt(abs(alpha * alpha - 4))) / 2,
            "transience_rate_bound": rate,
            "transient": lambda1 > lambda0 * (TRANSIENCE_C * alpha - 1),
        },
    )


CATALOG: dict[str, Callable[..., ExampleSpec]] = {
    "torus": torus,
    "planar_linear": planar_linear,
    "interval_beta": interval_beta,
    "radulescu": radulescu,
}


def get_example(name: str, **overrides) -> ExampleSpec:
    """Build a catalog example by name with keyword parameter overrides."""
    try:
        factory = CATALOG[name]
    except KeyError:
        raise KeyError(f"unknown example {name!r}; known: {', '.join(sorted(CATALOG))}") from None
    return factory(**overrides)
