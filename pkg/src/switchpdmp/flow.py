"""Deterministic dynamics: regime flows, composite flows, variational flows,
pullback families and the submersion rank test."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np

from . import _vm
from .expr import DomainError
from .system import JumpSequence, SwitchingSystem

__all__ = [
    "DEFAULT_STEP",
    "FlowResult",
    "PullbackFamily",
    "SingularJacobian",
    "composite_flow",
    "integrate",
    "pullback_family",
    "submersion_rank",
    "variational_integrate",
]

DEFAULT_STEP = 1e-3
DEFAULT_RANK_TOL = 1e-8


class SingularJacobian(ArithmeticError):
    """|det J| fell below 1e-12: the variational integration blew up."""


@dataclass
class FlowResult:
    x: np.ndarray
    jacobian: Optional[np.ndarray] = None
    steps: int = 0
    clamps: int = 0
    div_integral: Optional[float] = None


def _check(sys: SwitchingSystem, i: int, t: float, h: float) -> None:
    if not 0 <= i < sys.n_regimes:
        raise ValueError(f"regime {i} out of range")
    if t < 0:
        raise ValueError("flow time must be non-negative")
    if h <= 0:
        raise ValueError("step must be positive")


def _confine_py(sys: SwitchingSystem, x: np.ndarray) -> int:
    lo, hi, wrap, margin = sys.box.arrays()
    return int(_vm.confine(x, lo, hi, wrap, margin))


def _rk4_py(sys: SwitchingSystem, i: int, x: np.ndarray, t: float, h: float) -> tuple[np.ndarray, int, int]:
    f = sys.fields[i]
    n = _vm.n_steps_for(t, h)
    clamps = 0
    for s in range(n):
        step = h if s < n - 1 else t - (n - 1) * h
        k1 = f(x)
        k2 = f(x + 0.5 * step * k1)
        k3 = f(x + 0.5 * step * k2)
        k4 = f(x + step * k3)
        x = x + step / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        clamps += _confine_py(sys, x)
    return x, n, clamps


def integrate(sys: SwitchingSystem, i: int, x0, t: float, h: float = DEFAULT_STEP) -> FlowResult:
    """Flow of regime ``i`` for time ``t`` by fixed-step RK4.

    The last step is shortened to land exactly on ``t``.
    """
    _check(sys, i, t, h)
    x = np.array(x0, dtype=float)
    prog = sys.program
    if prog is None:
        x, steps, clamps = _rk4_py(sys, i, x, t, h)
        return FlowResult(x, steps=steps, clamps=clamps)
    lo, hi, wrap, margin = sys.box.arrays()
    status, steps, clamps = _vm.flow(*prog.arrays(), i, sys.d, x, t, h, lo, hi, wrap, margin, prog.max_stack)
    if status != _vm.OK:
        raise DomainError(f"field {i} not finite along the flow from {np.asarray(x0).tolist()}")
    return FlowResult(x, steps=int(steps), clamps=int(clamps))


def composite_flow(sys: SwitchingSystem, x0, seq: JumpSequence, h: float = DEFAULT_STEP):
    """Follow ``F^{i_0}`` for ``u_1``, then ``F^{i_1}`` for ``u_2``, ...

    Returns the end point and the array of points ``x_0..x_n``.
    """
    x = np.array(x0, dtype=float)
    points = [x.copy()]
    for k, u in enumerate(seq.durations):
        x = integrate(sys, seq.indices[k], x, u, h).x
        points.append(x.copy())
    return x, np.array(points)


def _variational_py(sys, i, x, t, h):
    f = sys.fields[i]
    d = sys.d

    def rhs(y):
        xs = y[:d]
        jac = f.jacobian(xs)
        J = y[d : d + d * d].reshape(d, d)
        return np.concatenate([f(xs), (jac @ J).ravel(), [np.trace(jac)]])

    y = np.concatenate([x, np.eye(d).ravel(), [0.0]])
    n = _vm.n_steps_for(t, h)
    for s in range(n):
        step = h if s < n - 1 else t - (n - 1) * h
        k1 = rhs(y)
        k2 = rhs(y + 0.5 * step * k1)
        k3 = rhs(y + 0.5 * step * k2)
        k4 = rhs(y + step * k3)
        y = y + step / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return y[:d], y[d : d + d * d].reshape(d, d), float(y[-1]), n


def variational_integrate(sys: SwitchingSystem, i: int, x0, t: float, h: float = DEFAULT_STEP) -> FlowResult:
    """Flow together with its Jacobian ``D Phi^i_t(x0)``.

    Solves ``dJ/dt = DF^i(x(t)) J`` with ``J(0) = I`` on the same RK4 grid as
    the state, and accumulates the divergence integral for Liouville checks.
    The box is not enforced here: Jacobians of clamped paths are meaningless.

    Raises:
        SingularJacobian: if ``|det J| < 1e-12``.
    """
    _check(sys, i, t, h)
    x = np.array(x0, dtype=float)
    prog = sys.program
    if prog is None:
        x, jac, div, steps = _variational_py(sys, i, x, t, h)
    else:
        status, jac, div, steps = _vm.variational_flow(*prog.arrays(), i, sys.d, sys.n_regimes, x, t, h, prog.max_stack)
        if status != _vm.OK:
            raise DomainError(f"field {i} or its Jacobian not finite along the flow")
    if abs(np.linalg.det(jac)) < 1e-12:
        raise SingularJacobian(f"|det J| < 1e-12 after t={t} in regime {i}")
    return FlowResult(np.asarray(x), jacobian=np.asarray(jac), steps=int(steps), div_integral=float(div))


@dataclass
class PullbackFamily:
    base: np.ndarray
    seq: JumpSequence
    variant: str
    vectors: list[np.ndarray] = field(default_factory=list)

    def matrix(self) -> np.ndarray:
        """Family vectors as the columns of a ``d x m`` matrix."""
        return np.column_stack(self.vectors) if self.vectors else np.zeros((len(self.base), 0))


def pullback_family(
    sys: SwitchingSystem,
    x0,
    seq: JumpSequence,
    variant: Literal["tilde", "difference"] = "tilde",
    h: float = DEFAULT_STEP,
) -> PullbackFamily:
    """Pull the fields met along ``seq`` back to ``x0``.

    The tilde family is ``F^{i_0}(x_0), P_1 F^{i_1}(x_0), ..., P_m F^{i_m}(x_0)``
    where ``P_k v = (J_1)^{-1} ... (J_k)^{-1} v`` and ``J_k`` is the Jacobian of
    the ``k``-th flow segment at its start point. The difference family holds
    ``P_k F^{i_k} - P_m F^{i_m}`` for ``k < m``.
    """
    if variant not in ("tilde", "difference"):
        raise ValueError("variant must be 'tilde' or 'difference'")
    if any(u <= 0 for u in seq.durations):
        raise ValueError("pullbacks need positive durations")
    x = np.array(x0, dtype=float)
    jacobians = []
    points = [x.copy()]
    for k, u in enumerate(seq.durations):
        res = variational_integrate(sys, seq.indices[k], x, u, h)
        jacobians.append(res.jacobian)
        x = res.x
        points.append(x.copy())
    pulled = []
    for k, i_k in enumerate(seq.indices):
        v = sys.field(i_k, points[k])
        for jac in reversed(jacobians[:k]):
            v = np.linalg.solve(jac, v)
        pulled.append(v)
    if variant == "tilde":
        vectors = pulled
    else:
        vectors = [pulled[k] - pulled[-1] for k in range(len(pulled) - 1)]
    for v in vectors:
        if not np.all(np.isfinite(v)):
            raise DomainError("non-finite pullback vector")
    return PullbackFamily(np.asarray(x0, dtype=float), seq, variant, vectors)


def submersion_rank(family, tol: float = DEFAULT_RANK_TOL) -> tuple[int, np.ndarray]:
    """Numerical rank of the family and its singular values.

    Counts singular values above ``tol * sigma_max``. Accepts a
    :class:`PullbackFamily` or an iterable of vectors.
    """
    mat = family.matrix() if isinstance(family, PullbackFamily) else np.column_stack(list(family))
    if mat.size == 0:
        raise ValueError("empty family")
    sv = np.linalg.svd(mat, compute_uv=False)
    if sv[0] == 0.0:
        return 0, sv
    return int(np.sum(sv > tol * sv[0])), sv
