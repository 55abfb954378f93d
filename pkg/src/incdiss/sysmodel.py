"""Discrete-time nonlinear systems, Jacobians, RK4 discretization and
feedback interconnection.

Every callable stored on a system is either a module-level function or a
``functools.partial`` of one, so systems pickle cleanly and can be shipped
to worker processes.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial
from typing import Callable, Optional

import numpy as np

__all__ = [
    "ContractViolation",
    "EvaluationError",
    "DifferentialMatrices",
    "DiscreteTimeSystem",
    "ContinuousTimeSystem",
    "LtiController",
    "evaluate",
    "jacobians",
    "finite_difference_jacobians",
    "rk4_discretize",
    "feedback_interconnect",
]


class ContractViolation(ValueError):
    """Raised when an argument breaks an operation's precondition."""


class EvaluationError(RuntimeError):
    """Raised when a system map produces non-finite values."""

    def __init__(self, message: str, x=None, w=None):
        super().__init__(message)
        self.x = None if x is None else np.array(x, dtype=float)
        self.w = None if w is None else np.array(w, dtype=float)


def _vec(v, n: int, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(v, dtype=float))
    if arr.ndim != 1 or arr.shape[0] != n:
        raise ContractViolation(
            f"{name} must be a vector of length {n}, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class DifferentialMatrices:
    """Jacobians of (f, h) with respect to state and input at one point."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        for name in "ABCD":
            object.__setattr__(self, name,
                               np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        n_x, n_w, n_z = self.A.shape[0], self.B.shape[1], self.C.shape[0]
        expected = {"A": (n_x, n_x), "B": (n_x, n_w), "C": (n_z, n_x), "D": (n_z, n_w)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ContractViolation(
                    f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def dims(self) -> tuple[int, int, int]:
        """(n_x, n_w, n_z)."""
        return self.A.shape[0], self.B.shape[1], self.C.shape[0]

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(m)) for m in (self.A, self.B, self.C, self.D))

    def as_tuple(self):
        return self.A, self.B, self.C, self.D


@dataclass(frozen=True)
class DiscreteTimeSystem:
    """x(k+1) = f(x, w), z(k) = h(x, w).

    ``jac``, when given, returns the analytic :class:`DifferentialMatrices`
    at ``(x, w)``; otherwise Jacobians come from central differences.
    """

    n_x: int
    n_w: int
    n_z: int
    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    h: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jac: Optional[Callable[[np.ndarray, np.ndarray], DifferentialMatrices]] = None
    name: str = ""


@dataclass(frozen=True)
class ContinuousTimeSystem:
    """dx/dt = f_c(x, u); ``jac_c`` optionally returns (df/dx, df/du)."""

    n_x: int
    n_u: int
    f_c: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jac_c: Optional[Callable[[np.ndarray, np.ndarray], tuple]] = None
    name: str = ""


def _const(value, _u_c):
    return value


@dataclass(frozen=True)
class LtiController:
    """Integrating controller x_c(k+1) = x_c + B_c u_c, y_c = C_c x_c + D_c u_c.

    ``C_c`` and ``D_c`` map the controller input ``u_c`` to gain matrices;
    for the LTI case they are constant. Scheduled gains may supply
    ``dC_c``/``dD_c`` returning derivatives stacked along the first axis
    (one slice per entry of ``u_c``) so that the closed loop gets analytic
    Jacobians.
    """

    n_xc: int
    B_c: np.ndarray
    C_c: Callable[[np.ndarray], np.ndarray]
    D_c: Callable[[np.ndarray], np.ndarray]
    dC_c: Optional[Callable[[np.ndarray], np.ndarray]] = None
    dD_c: Optional[Callable[[np.ndarray], np.ndarray]] = None
    is_lti: bool = False

    @classmethod
    def constant(cls, B_c, C_c, D_c) -> "LtiController":
        B_c = np.atleast_2d(np.asarray(B_c, dtype=float))
        C_c = np.atleast_2d(np.asarray(C_c, dtype=float))
        D_c = np.atleast_2d(np.asarray(D_c, dtype=float))
        n_xc, n_uc = B_c.shape
        if C_c.shape[1] != n_xc or D_c.shape[1] != n_uc or C_c.shape[0] != D_c.shape[0]:
            raise ContractViolation(
                f"inconsistent controller gains: B_c {B_c.shape}, C_c {C_c.shape}, D_c {D_c.shape}")
        n_y = C_c.shape[0]
        return cls(n_xc=n_xc, B_c=B_c, C_c=partial(_const, C_c), D_c=partial(_const, D_c),
                   dC_c=partial(_const, np.zeros((n_uc, n_y, n_xc))),
                   dD_c=partial(_const, np.zeros((n_uc, n_y, n_uc))), is_lti=True)

    @property
    def n_uc(self) -> int:
        return self.B_c.shape[1]

    @property
    def n_y(self) -> int:
        return np.atleast_2d(self.D_c(np.zeros(self.n_uc))).shape[0]

    def gains(self, u_c):
        return (np.atleast_2d(np.asarray(self.C_c(u_c), dtype=float)),
                np.atleast_2d(np.asarray(self.D_c(u_c), dtype=float)))

    def output(self, x_c, u_c) -> np.ndarray:
        C, D = self.gains(u_c)
        return C @ x_c + D @ u_c

    def step(self, x_c, u_c) -> np.ndarray:
        return x_c + self.B_c @ u_c


def evaluate(sys: DiscreteTimeSystem, x, w):
    """Return ``(f(x, w), h(x, w))`` after checking dimensions."""
    x = _vec(x, sys.n_x, "x")
    w = _vec(w, sys.n_w, "w")
    x_next = np.asarray(sys.f(x, w), dtype=float).reshape(-1)
    z = np.asarray(sys.h(x, w), dtype=float).reshape(-1)
    if x_next.shape[0] != sys.n_x:
        raise ContractViolation(f"f returned length {x_next.shape[0]}, expected {sys.n_x}")
    if z.shape[0] != sys.n_z:
        raise ContractViolation(f"h returned length {z.shape[0]}, expected {sys.n_z}")
    return x_next, z


def default_fd_step(x, w) -> float:
    return 1e-6 * max(1.0, float(np.max(np.abs(np.concatenate([x, w])), initial=0.0)))


def finite_difference_jacobians(sys: DiscreteTimeSystem, x, w,
                                fd_step: Optional[float] = None) -> DifferentialMatrices:
    """Central-difference Jacobians of ``f`` and ``h``."""
    x = _vec(x, sys.n_x, "x")
    w = _vec(w, sys.n_w, "w")
    h = default_fd_step(x, w) if fd_step is None else float(fd_step)
    if not h > 0:
        raise ContractViolation(f"fd_step must be positive, got {fd_step}")
    n_x, n_w = sys.n_x, sys.n_w
    v = np.concatenate([x, w])
    FH = np.empty((n_x + sys.n_z, n_x + n_w))
    for i in range(n_x + n_w):
        e = np.zeros_like(v)
        e[i] = h
        fp, zp = evaluate(sys, (v + e)[:n_x], (v + e)[n_x:])
        fm, zm = evaluate(sys, (v - e)[:n_x], (v - e)[n_x:])
        # non-finite differences are reported by jacobians(), not warned about here
        with np.errstate(invalid="ignore", over="ignore"):
            FH[:, i] = np.concatenate([fp - fm, zp - zm]) / (2.0 * h)
    return DifferentialMatrices(FH[:n_x, :n_x], FH[:n_x, n_x:], FH[n_x:, :n_x], FH[n_x:, n_x:])


def jacobians(sys: DiscreteTimeSystem, x, w,
              fd_step: Optional[float] = None) -> DifferentialMatrices:
    """Differential matrices at ``(x, w)``.

    Uses ``sys.jac`` when present, central differences otherwise.

    Raises
    ------
    EvaluationError
        If any entry is NaN or infinite.
    """
    x = _vec(x, sys.n_x, "x")
    w = _vec(w, sys.n_w, "w")
    if sys.jac is not None:
        mats = sys.jac(x, w)
        if mats.dims != (sys.n_x, sys.n_w, sys.n_z):
            raise ContractViolation(
                f"analytic Jacobian has dims {mats.dims}, system has "
                f"{(sys.n_x, sys.n_w, sys.n_z)}")
    else:
        mats = finite_difference_jacobians(sys, x, w, fd_step)
    if not mats.is_finite():
        raise EvaluationError(f"non-finite Jacobian at x={x.tolist()}, w={w.tolist()}", x, w)
    return mats


# -- RK4 ---------------------------------------------------------------------

def _rk4_step(ct: ContinuousTimeSystem, Ts: float, x, u):
    k1 = np.asarray(ct.f_c(x, u), dtype=float)
    k2 = np.asarray(ct.f_c(x + 0.5 * Ts * k1, u), dtype=float)
    k3 = np.asarray(ct.f_c(x + 0.5 * Ts * k2, u), dtype=float)
    k4 = np.asarray(ct.f_c(x + Ts * k3, u), dtype=float)
    return x + (Ts / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _rk4_jac(ct: ContinuousTimeSystem, Ts: float, C, x, u):
    # chain rule through the four stages; input held over the step
    n = ct.n_x
    I = np.eye(n)
    Fx, Fu = ct.jac_c(x, u)
    k1 = np.asarray(ct.f_c(x, u), dtype=float)
    dk1x, dk1u = Fx, Fu

    x2 = x + 0.5 * Ts * k1
    Fx, Fu = ct.jac_c(x2, u)
    k2 = np.asarray(ct.f_c(x2, u), dtype=float)
    dk2x = Fx @ (I + 0.5 * Ts * dk1x)
    dk2u = Fx @ (0.5 * Ts * dk1u) + Fu

    x3 = x + 0.5 * Ts * k2
    Fx, Fu = ct.jac_c(x3, u)
    k3 = np.asarray(ct.f_c(x3, u), dtype=float)
    dk3x = Fx @ (I + 0.5 * Ts * dk2x)
    dk3u = Fx @ (0.5 * Ts * dk2u) + Fu

    x4 = x + Ts * k3
    Fx, Fu = ct.jac_c(x4, u)
    dk4x = Fx @ (I + Ts * dk3x)
    dk4u = Fx @ (Ts * dk3u) + Fu

    A = I + (Ts / 6.0) * (dk1x + 2 * dk2x + 2 * dk3x + dk4x)
    B = (Ts / 6.0) * (dk1u + 2 * dk2u + 2 * dk3u + dk4u)
    return DifferentialMatrices(A, B, C, np.zeros((C.shape[0], ct.n_u)))


def _state_output(x, u):
    return np.array(x, dtype=float)


def _selected_output(C, x, u):
    return C @ x


def rk4_discretize(ct: ContinuousTimeSystem, Ts: float, output_matrix=None,
                   analytic_jacobian: bool = False, name: str = "") -> DiscreteTimeSystem:
    """Classical RK4 discretization with zero-order-held input.

    The output is ``z = output_matrix @ x`` (the full state by default).
    Jacobians of the discrete map come from finite differences unless
    ``analytic_jacobian`` is set, in which case ``ct.jac_c`` is chained
    through the four stages.
    """
    if not Ts > 0:
        raise ContractViolation(f"sample time must be positive, got {Ts}")
    if output_matrix is None:
        C = np.eye(ct.n_x)
        h = _state_output
    else:
        C = np.atleast_2d(np.asarray(output_matrix, dtype=float))
        if C.shape[1] != ct.n_x:
            raise ContractViolation(f"output matrix has {C.shape[1]} columns, expected {ct.n_x}")
        h = partial(_selected_output, C)
    if analytic_jacobian and ct.jac_c is None:
        raise ContractViolation("analytic_jacobian requires ct.jac_c")
    jac = partial(_rk4_jac, ct, float(Ts), C) if analytic_jacobian else None
    return DiscreteTimeSystem(n_x=ct.n_x, n_w=ct.n_u, n_z=C.shape[0],
                              f=partial(_rk4_step, ct, float(Ts)), h=h, jac=jac,
                              name=name or (f"rk4({ct.name})" if ct.name else "rk4"))


# -- feedback interconnection ------------------------------------------------

def _split(plant: DiscreteTimeSystem, s):
    return s[:plant.n_x], s[plant.n_x:]


def _plant_input(plant, ctrl, s, w):
    x, x_c = _split(plant, s)
    return ctrl.output(x_c, x) + w


def _cl_f(plant: DiscreteTimeSystem, ctrl: LtiController, s, w):
    x, x_c = _split(plant, s)
    u = _plant_input(plant, ctrl, s, w)
    x_next, _ = evaluate(plant, x, u)
    return np.concatenate([x_next, ctrl.step(x_c, x)])


def _cl_h(plant: DiscreteTimeSystem, ctrl: LtiController, s, w):
    x, _ = _split(plant, s)
    _, z = evaluate(plant, x, _plant_input(plant, ctrl, s, w))
    return z


def _cl_jac(plant: DiscreteTimeSystem, ctrl: LtiController, s, w):
    x, x_c = _split(plant, s)
    u = _plant_input(plant, ctrl, s, w)
    Ap, Bp, Cp, Dp = plant.jac(x, u).as_tuple()
    C_c, D_c = ctrl.gains(x)
    dC = np.asarray(ctrl.dC_c(x), dtype=float)
    dD = np.asarray(ctrl.dD_c(x), dtype=float)
    # du/dx: D_c plus the gain-scheduling terms, one column per plant state
    du_dx = D_c.copy()
    for j in range(plant.n_x):
        du_dx[:, j] += dC[j] @ x_c + dD[j] @ x
    du_dxc = C_c
    n_xc = ctrl.n_xc
    A = np.block([[Ap + Bp @ du_dx, Bp @ du_dxc],
                  [ctrl.B_c, np.eye(n_xc)]])
    B = np.vstack([Bp, np.zeros((n_xc, plant.n_w))])
    C = np.hstack([Cp + Dp @ du_dx, Dp @ du_dxc])
    return DifferentialMatrices(A, B, C, Dp)


def feedback_interconnect(plant: DiscreteTimeSystem, ctrl: LtiController,
                          name: str = "") -> DiscreteTimeSystem:
    """Close the loop u = y_c + w, u_c = x; state (x, x_c), output h(x, u).

    The generalized disturbance ``w`` enters additively at the plant
    input and the performance output is the plant's own output map.
    """
    if ctrl.n_uc != plant.n_x:
        raise ContractViolation(
            f"controller input dimension {ctrl.n_uc} must equal plant state dimension {plant.n_x}")
    if ctrl.n_y != plant.n_w:
        raise ContractViolation(
            f"controller output dimension {ctrl.n_y} must equal plant input dimension {plant.n_w}")
    analytic = plant.jac is not None and ctrl.dC_c is not None and ctrl.dD_c is not None
    return DiscreteTimeSystem(
        n_x=plant.n_x + ctrl.n_xc, n_w=plant.n_w, n_z=plant.n_z,
        f=partial(_cl_f, plant, ctrl), h=partial(_cl_h, plant, ctrl),
        jac=partial(_cl_jac, plant, ctrl) if analytic else None,
        name=name or f"feedback({plant.name})")

