"""Unbalanced disk under an integrating PID-like controller, plus small
LTI oracle systems, packaged as named builtins.

Disk model (angle ``x1`` [rad], velocity ``x2`` [rad/s], voltage ``u``)::

    dx1/dt = x2
    dx2/dt = (M g l / J) sin(x1) - x2 / tau + (Km / tau) u

sampled with RK4 at ``Ts`` and closed with
``x_c(k+1) = x_c + B_c x``, ``u = C_c x_c + D_c x + w``. The performance
output is the angle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import partial
from typing import Optional

import numpy as np

from .embedding import BoxRegion, SchedulingMap, identity_scheduling
from .sysmodel import (ContinuousTimeSystem, ContractViolation, DifferentialMatrices,
                       DiscreteTimeSystem, LtiController, feedback_interconnect, rk4_discretize)

__all__ = [
    "DiskParameters", "unbalanced_disk_ct", "discretized_disk", "lti_controller",
    "lpv_controller", "disk_closed_loop", "paper_region", "disk_scheduling",
    "LPV_CONTROLLER_STATE_RANGE", "Benchmark", "BUILTINS", "get_builtin",
    "ramp_saturating", "linear_system",
]


@dataclass(frozen=True)
class DiskParameters:
    M: float = 0.076      # kg
    g: float = 9.8        # m/s^2
    l: float = 0.041      # m
    J: float = 2.4e-4     # kg m^2
    Km: float = 11.0
    tau: float = 0.40     # s
    Ts: float = 1.0 / 20.0

    def __post_init__(self):
        for name in ("M", "g", "l", "J", "Km", "tau", "Ts"):
            if not getattr(self, name) > 0:
                raise ContractViolation(f"disk parameter {name} must be positive")

    @property
    def gravity_gain(self) -> float:
        return self.M * self.g * self.l / self.J


def _disk_rhs(p: DiskParameters, x, u):
    return np.array([x[1],
                     p.gravity_gain * math.sin(x[0]) - x[1] / p.tau + p.Km / p.tau * float(u[0])])


def _disk_jac(p: DiskParameters, x, u):
    Fx = np.array([[0.0, 1.0], [p.gravity_gain * math.cos(x[0]), -1.0 / p.tau]])
    Fu = np.array([[0.0], [p.Km / p.tau]])
    return Fx, Fu


def unbalanced_disk_ct(params: DiskParameters = DiskParameters()) -> ContinuousTimeSystem:
    return ContinuousTimeSystem(n_x=2, n_u=1, f_c=partial(_disk_rhs, params),
                                jac_c=partial(_disk_jac, params), name="unbalanced_disk")


def discretized_disk(params: DiskParameters = DiskParameters(),
                     analytic_jacobian: bool = False) -> DiscreteTimeSystem:
    """RK4-sampled disk with the angle as output."""
    return rk4_discretize(unbalanced_disk_ct(params), params.Ts, output_matrix=[[1.0, 0.0]],
                          analytic_jacobian=analytic_jacobian, name="disk_rk4")


def lti_controller() -> LtiController:
    return LtiController.constant(B_c=[[1.0, 0.0]], C_c=[[-0.5]], D_c=[[-10.0, -1.0]])


def _lpv_C(u_c):
    return np.array([[-0.5 - math.sin(u_c[0]) / 20.0]])


def _lpv_D(u_c):
    return np.array([[-10.0 - 2.0 * math.cos(u_c[0]), -1.0]])


def _lpv_dC(u_c):
    return np.array([[[-math.cos(u_c[0]) / 20.0]], [[0.0]]])


def _lpv_dD(u_c):
    return np.array([[[2.0 * math.sin(u_c[0]), 0.0]], [[0.0, 0.0]]])


def lpv_controller() -> LtiController:
    """Same integrator, gains scheduled on the angle ``rho1 = x1``."""
    return LtiController(n_xc=1, B_c=np.array([[1.0, 0.0]]), C_c=_lpv_C, D_c=_lpv_D,
                         dC_c=_lpv_dC, dD_c=_lpv_dD, is_lti=False)


def disk_closed_loop(controller: str = "lti", params: DiskParameters = DiskParameters(),
                     analytic_jacobian: bool = False) -> DiscreteTimeSystem:
    ctrl = _controller(controller)
    return feedback_interconnect(discretized_disk(params, analytic_jacobian), ctrl,
                                 name=f"disk_{controller}_closedloop")


def _controller(kind: str) -> LtiController:
    if kind == "lti":
        return lti_controller()
    if kind == "lpv":
        return lpv_controller()
    raise ContractViolation(f"unknown controller {kind!r}")


def paper_region() -> BoxRegion:
    return BoxRegion(((-math.pi, math.pi), (-10.0, 10.0), (-10.0, 10.0)), ("x1", "x2", "u"))


# The LPV loop's Jacobian also depends on the controller state through
# d(C_c(x1) x_c)/dx1, so its embedding adds x_c as a fourth coordinate.
# The range covers the controller-state excursion of the ramp-disturbance
# experiment (|x_c| <= ~147).
LPV_CONTROLLER_STATE_RANGE = (-150.0, 150.0)


def _disk_selector(ctrl: LtiController, with_xc: bool, s, w):
    x, x_c = s[:2], s[2:]
    u = ctrl.output(x_c, x) + w
    rho = [x[0], x[1], float(u[0])]
    if with_xc:
        rho.append(float(x_c[0]))
    return np.array(rho)


def _disk_lift(ctrl: LtiController, with_xc: bool, rho):
    x = np.array([rho[0], rho[1]])
    C, D = ctrl.gains(x)
    if with_xc:
        x_c = np.array([rho[3]])
        w = np.array([rho[2]]) - C @ x_c - D @ x
    else:
        # w = 0; any x_c reproducing u gives the same Jacobian for constant gains
        x_c = np.linalg.solve(C, np.array([rho[2]]) - D @ x)
        w = np.zeros(1)
    return np.concatenate([x, x_c]), w


def disk_scheduling(controller: str = "lti", with_controller_state: Optional[bool] = None
                    ) -> SchedulingMap:
    """rho = (x1, x2, u), plus x_c for the LPV controller by default."""
    ctrl = _controller(controller)
    with_xc = (controller == "lpv") if with_controller_state is None else with_controller_state
    names = ("x1", "x2", "u", "xc") if with_xc else ("x1", "x2", "u")
    return SchedulingMap(len(names), partial(_disk_selector, ctrl, with_xc),
                         partial(_disk_lift, ctrl, with_xc), names)


def disk_region(controller: str = "lti", with_controller_state: Optional[bool] = None
                ) -> BoxRegion:
    with_xc = (controller == "lpv") if with_controller_state is None else with_controller_state
    base = paper_region()
    if not with_xc:
        return base
    return BoxRegion(base.intervals + (LPV_CONTROLLER_STATE_RANGE,), base.names + ("xc",))


def ramp_saturating(slope: float = -1.0, k_sat: int = 70, horizon: int = 1000) -> np.ndarray:
    """w(k) = slope * min(k, k_sat), shape (horizon, 1)."""
    k = np.arange(horizon, dtype=float)
    return (slope * np.minimum(k, k_sat)).reshape(-1, 1)


# -- LTI oracles -------------------------------------------------------------------

def _lin_f(A, B, x, w):
    return A @ x + B @ w


def _lin_h(C, D, x, w):
    return C @ x + D @ w


def _lin_jac(mats, x, w):
    return mats


def linear_system(A, B, C, D, name: str = "lti") -> DiscreteTimeSystem:
    """Linear system with constant analytic Jacobians."""
    mats = DifferentialMatrices(A, B, C, D)
    A, B, C, D = mats.as_tuple()
    n_x, n_w, n_z = mats.dims
    return DiscreteTimeSystem(n_x, n_w, n_z, partial(_lin_f, A, B), partial(_lin_h, C, D),
                              jac=partial(_lin_jac, mats), name=name)


# -- builtins ------------------------------------------------------------------------

@dataclass(frozen=True)
class Benchmark:
    name: str
    system: DiscreteTimeSystem
    schedmap: SchedulingMap
    region: BoxRegion
    grid: tuple
    x0: tuple
    description: str = ""


def _disk_benchmark(controller: str) -> Benchmark:
    region = disk_region(controller)
    grid = (11, 11, 11) + ((3,) if region.ndim == 4 else ())
    return Benchmark(name=f"disk_{controller}_closedloop",
                     system=disk_closed_loop(controller),
                     schedmap=disk_scheduling(controller), region=region, grid=grid,
                     x0=(0.5, 0.0, 0.0),
                     description=f"RK4 unbalanced disk with the {controller.upper()} controller")


def _scalar_benchmark() -> Benchmark:
    sys = linear_system([[0.5]], [[1.0]], [[1.0]], [[0.0]], name="scalar_lti_oracle")
    return Benchmark(name="scalar_lti_oracle", system=sys, schedmap=identity_scheduling(1, 1),
                     region=BoxRegion(((-1.0, 1.0), (-1.0, 1.0)), ("x", "w")), grid=(3, 3),
                     x0=(1.0,), description="x(k+1) = 0.5 x + w, z = x (H-infinity norm 2)")


_FACTORIES = {
    "disk_lti_closedloop": partial(_disk_benchmark, "lti"),
    "disk_lpv_closedloop": partial(_disk_benchmark, "lpv"),
    "scalar_lti_oracle": _scalar_benchmark,
}
BUILTINS = tuple(_FACTORIES)


def get_builtin(name: str) -> Benchmark:
    try:
        return _FACTORIES[name]()
    except KeyError:
        raise ContractViolation(
            f"unknown builtin system {name!r}; choose from {', '.join(BUILTINS)}") from None
