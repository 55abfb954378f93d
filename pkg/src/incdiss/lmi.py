"""Incremental dissipativity LMIs over a gridded embedding.

Three block families are assembled per grid point:

* the (Q,S,R) block ``[I 0; A B]' diag(-P, P) [I 0; A B] - [0 I; C D]' Pi [0 I; C D]``,
  required to be negative semidefinite,
* its Schur-complemented l2-gain form in ``Pbar = gamma * inv(P)``,
  required to be positive semidefinite,
* the passivity form, required to be positive semidefinite.

Every assembler accepts either a numeric ``P`` (returns an ndarray) or a
cvxpy variable (returns an affine cvxpy expression), so the constraints the
solver sees and the margins checked afterwards come from the same code.

A single storage matrix is shared by all grid points. An infeasible
verdict means no certificate was found at the requested tolerance; the
conditions are sufficient only, so it does not show that the system lacks
the property.
"""

from __future__ import annotations

import logging
import time
import warnings
import weakref
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import jsonio
from .embedding import BoxRegion, GriddedEmbedding
from .sysmodel import ContractViolation, DifferentialMatrices

logger = logging.getLogger(__name__)

CERTIFICATE_FORMAT = "incdiss.certificate/1"
DEFAULT_FEAS_TOL = 1e-7
DEFAULT_BISECT_TOL = 1e-3
DEFAULT_GAMMA_CAP = 1e3


class SolverFailure(RuntimeError):
    """The backend could not solve the problem (status ``Unsolved``)."""

    def __init__(self, message: str, status: str = "unsolved"):
        super().__init__(message)
        self.status = status


@dataclass(frozen=True)
class SupplyQSR:
    """Quadratic supply ``s = [dw; dz]' [[Q, S], [S', R]] [dw; dz]``."""

    Q: np.ndarray
    S: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        S = np.atleast_2d(np.asarray(self.S, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        n_w, n_z = Q.shape[0], R.shape[0]
        if Q.shape != (n_w, n_w) or R.shape != (n_z, n_z) or S.shape != (n_w, n_z):
            raise ContractViolation(f"supply shapes Q{Q.shape} S{S.shape} R{R.shape} are inconsistent")
        for name, M in (("Q", Q), ("R", R)):
            if np.max(np.abs(M - M.T), initial=0.0) > 1e-12:
                raise ContractViolation(f"{name} must be symmetric")
        if np.any(R != 0):
            if np.max(np.linalg.eigvalsh(R)) >= 0:
                raise ContractViolation("R must be negative definite or zero")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "R", R)

    @property
    def n_w(self) -> int:
        return self.Q.shape[0]

    @property
    def n_z(self) -> int:
        return self.R.shape[0]

    @property
    def matrix(self) -> np.ndarray:
        return np.block([[self.Q, self.S], [self.S.T, self.R]])

    def __call__(self, dw, dz) -> float:
        v = np.concatenate([np.atleast_1d(dw), np.atleast_1d(dz)]).astype(float)
        return float(v @ self.matrix @ v)

    @classmethod
    def l2_gain(cls, gamma: float, n_w: int = 1, n_z: int = 1) -> "SupplyQSR":
        return cls(gamma ** 2 * np.eye(n_w), np.zeros((n_w, n_z)), -np.eye(n_z))

    @classmethod
    def passivity(cls, n: int = 1) -> "SupplyQSR":
        """Supply ``dw' dz + dz' dw``."""
        return cls(np.zeros((n, n)), np.eye(n), np.zeros((n, n)))

    @classmethod
    def zero(cls, n_w: int = 1, n_z: int = 1) -> "SupplyQSR":
        return cls(np.zeros((n_w, n_w)), np.zeros((n_w, n_z)), np.zeros((n_z, n_z)))

    def to_dict(self) -> dict:
        return {"Q": self.Q.tolist(), "S": self.S.tolist(), "R": self.R.tolist()}

    @classmethod
    def from_dict(cls, d) -> "SupplyQSR":
        return cls(np.array(d["Q"], float), np.array(d["S"], float), np.array(d["R"], float))


# -- block assembly -------------------------------------------------------------

def _is_expr(obj) -> bool:
    return type(obj).__module__.startswith("cvxpy")


def _bmat(rows):
    if any(_is_expr(b) for row in rows for b in row):
        import cvxpy as cp
        return cp.bmat(rows)
    M = np.block([[np.asarray(b, dtype=float) for b in row] for row in rows])
    # rounding in the products leaves ~1 ulp asymmetry; average it away
    return (M + M.T) / 2.0


def _check_dims(mats: DifferentialMatrices, n_p: int):
    if mats.dims[0] != n_p:
        raise ContractViolation(f"storage matrix is {n_p}x{n_p} but A is {mats.A.shape}")


def assemble_incremental_qsr(mats: DifferentialMatrices, supply: SupplyQSR, P):
    """Dissipation block, required to be negative semidefinite."""
    A, B, C, D = mats.as_tuple()
    n_x, n_w, n_z = mats.dims
    if (supply.n_w, supply.n_z) != (n_w, n_z):
        raise ContractViolation(
            f"supply is for (n_w, n_z)=({supply.n_w}, {supply.n_z}), system has ({n_w}, {n_z})")
    _check_dims(mats, P.shape[0])
    Q, S, R = supply.Q, supply.S, supply.R
    # -[0 I; C D]' Pi [0 I; C D]
    s11 = C.T @ R @ C
    s12 = C.T @ S.T + C.T @ R @ D
    s22 = Q + S @ D + D.T @ S.T + D.T @ R @ D
    return _bmat([[A.T @ P @ A - P - s11, A.T @ P @ B - s12],
                  [B.T @ P @ A - s12.T, B.T @ P @ B - s22]])


def assemble_li2_schur(mats: DifferentialMatrices, gamma, Pbar):
    """Schur form of the l2-gain condition in ``Pbar``; positive semidefinite."""
    A, B, C, D = mats.as_tuple()
    n_x, n_w, n_z = mats.dims
    _check_dims(mats, Pbar.shape[0])
    if not _is_expr(gamma) and not gamma > 0:
        raise ContractViolation(f"gamma must be positive, got {gamma}")
    Zxx, Zxw, Zxz, Zwz = (np.zeros((n_x, n_x)), np.zeros((n_x, n_w)),
                          np.zeros((n_x, n_z)), np.zeros((n_w, n_z)))
    Iw, Iz = np.eye(n_w), np.eye(n_z)
    return _bmat([[Pbar, A @ Pbar, B, Zxz],
                  [Pbar @ A.T, Pbar, Zxw, Pbar @ C.T],
                  [B.T, Zxw.T, gamma * Iw, D.T],
                  [Zxz.T, C @ Pbar, D, gamma * Iz]])


def assemble_passivity(mats: DifferentialMatrices, P):
    """Passivity block, required to be positive semidefinite."""
    A, B, C, D = mats.as_tuple()
    n_x, n_w, n_z = mats.dims
    if n_w != n_z:
        raise ContractViolation(f"passivity needs n_w == n_z, got {n_w} and {n_z}")
    _check_dims(mats, P.shape[0])
    return _bmat([[P, A.T @ P, C.T],
                  [P @ A, P, P @ B],
                  [C, B.T @ P, D + D.T]])


# -- problem and results ----------------------------------------------------------

@dataclass(eq=False)
class LmiProblem:
    """Feasibility problem in one symmetric matrix variable ``P`` (n x n).

    Each entry of ``blocks`` maps ``(P, gamma)`` to a symmetric matrix that
    is affine in ``P``; ``sense`` says whether blocks must be ``"psd"``
    (>= 0) or ``"nsd"`` (<= 0). ``gamma`` is a scalar parameter, fixed per
    solve, for families such as the l2-gain condition.
    """

    n: int
    blocks: list
    sense: str = "psd"
    label: str = ""

    def __post_init__(self):
        if self.sense not in ("psd", "nsd"):
            raise ContractViolation(f"sense must be 'psd' or 'nsd', got {self.sense!r}")
        if not self.blocks:
            raise ContractViolation("an LMI problem needs at least one block")

    def oriented_blocks(self, P, gamma=None) -> list:
        sign = 1.0 if self.sense == "psd" else -1.0
        out = []
        for build in self.blocks:
            blk = build(P, gamma)
            out.append(sign * (blk + blk.T) / 2.0)
        return out

    def margins(self, P, gamma=None) -> np.ndarray:
        """Smallest eigenvalue of every block, oriented so >= 0 is satisfied."""
        return np.array([np.linalg.eigvalsh(b)[0] for b in self.oriented_blocks(np.asarray(P, float), gamma)])


@dataclass
class StorageCertificate:
    """Shared quadratic storage ``V = (x - x~)' P (x - x~)`` with its evidence."""

    P: np.ndarray
    min_eigen_margin: float
    gamma: Optional[float] = None
    region: Optional[BoxRegion] = None
    grid_meta: tuple = ()
    solver_status: str = "optimal"
    analysis: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))

    @property
    def min_eig_P(self) -> float:
        return float(np.linalg.eigvalsh((self.P + self.P.T) / 2)[0])

    def supply(self, n_w: int = 1, n_z: int = 1) -> Optional[SupplyQSR]:
        if self.gamma is None:
            return None
        return SupplyQSR.l2_gain(self.gamma, n_w, n_z)

    def to_dict(self) -> dict:
        return {
            "format": CERTIFICATE_FORMAT,
            "analysis": self.analysis,
            "gamma": self.gamma,
            "P": self.P.ravel(order="C").tolist(),
            "n": self.P.shape[0],
            "region": None if self.region is None else self.region.to_dict(),
            "grid": list(self.grid_meta),
            "margin": self.min_eigen_margin,
            "solver_status": self.solver_status,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return jsonio.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "StorageCertificate":
        if d.get("format") != CERTIFICATE_FORMAT:
            raise ContractViolation(f"unknown certificate format {d.get('format')!r}")
        n = int(d["n"])
        return cls(P=np.array(d["P"], dtype=float).reshape(n, n),
                   min_eigen_margin=float(d["margin"]),
                   gamma=None if d.get("gamma") is None else float(d["gamma"]),
                   region=None if d.get("region") is None else BoxRegion.from_dict(d["region"]),
                   grid_meta=tuple(d.get("grid", ())), solver_status=d.get("solver_status", ""),
                   analysis=d.get("analysis", ""), meta=dict(d.get("meta", {})))

    @classmethod
    def from_json(cls, text: str) -> "StorageCertificate":
        return cls.from_dict(jsonio.loads(text))


@dataclass
class Infeasible:
    """No storage matrix met the tolerance.

    ``dual_certificate`` is False for the shipped backend: the verdict
    rests on the optimal margin, not on an infeasibility proof.
    """

    margin: float
    solver_status: str
    dual_certificate: bool = False
    gamma: Optional[float] = None

    def __bool__(self):
        return False


@dataclass
class Unbounded:
    """No l2-gain certificate up to ``gamma_cap``."""

    gamma_cap: float
    margin: float

    def __bool__(self):
        return False


# -- backend --------------------------------------------------------------------------

@dataclass
class BackendResult:
    P: Optional[np.ndarray]
    margin: Optional[float]
    status: str
    solve_time: float = 0.0


# settings tried in turn when the solver stalls on the default ones
CLARABEL_RETRIES = ({"max_step_fraction": 0.9}, {"equilibrate_enable": False},
                    {"static_regularization_constant": 1e-7})


class CvxpyBackend:
    """Margin-maximizing SDP through cvxpy.

    Solves ``max t`` subject to ``P >= t I``, every oriented block ``>= t I``,
    ``trace(P) <= n * p_scale`` and ``t <= t_cap``. Maximizing one shared
    margin keeps homogeneous problems from collapsing onto ``P -> 0`` with
    a deceptively small negative slack. Compiled problems are cached per
    :class:`LmiProblem`, with ``gamma`` as a cvxpy parameter, so bisection
    reuses the canonicalization.
    """

    def __init__(self, solver: str = "CLARABEL", p_scale: float = 1e6, t_cap: float = 1.0,
                 retries: Optional[Sequence[dict]] = None, solver_opts: Optional[dict] = None):
        self.solver = solver
        self.p_scale = p_scale
        self.t_cap = t_cap
        if retries is None:
            retries = CLARABEL_RETRIES if solver == "CLARABEL" else ()
        self.retries = tuple(retries)
        self.solver_opts = solver_opts or {}
        self._cache: "weakref.WeakKeyDictionary[LmiProblem, tuple]" = weakref.WeakKeyDictionary()

    @property
    def name(self) -> str:
        return f"cvxpy/{self.solver}"

    def _compile(self, problem: LmiProblem):
        import cvxpy as cp
        if problem in self._cache:
            return self._cache[problem]
        n = problem.n
        P = cp.Variable((n, n), symmetric=True)
        t = cp.Variable()
        gamma = cp.Parameter(nonneg=True)
        cons = [P - t * np.eye(n) >> 0, cp.trace(P) <= n * self.p_scale, t <= self.t_cap]
        for blk in problem.oriented_blocks(P, gamma):
            cons.append(blk - t * np.eye(blk.shape[0]) >> 0)
        compiled = (cp.Problem(cp.Maximize(t), cons), P, t, gamma)
        self._cache[problem] = compiled
        return compiled

    def maximize_margin(self, problem: LmiProblem, gamma: Optional[float] = None) -> BackendResult:
        import cvxpy as cp
        prob, P, t, gpar = self._compile(problem)
        gpar.value = 0.0 if gamma is None else float(gamma)
        start = time.perf_counter()
        status = "solver_error"
        # interior-point stalls are rare and depend on settings, so retry the
        # same solver with altered settings rather than a less accurate one
        for extra in ({},) + self.retries:
            try:
                with warnings.catch_warnings():
                    # accuracy is judged by the numpy re-check, not by this warning
                    warnings.filterwarnings("ignore", "Solution may be inaccurate")
                    prob.solve(solver=self.solver, **{**self.solver_opts, **extra})
                status = prob.status
            except cp.error.SolverError as exc:
                logger.debug("solver %s %s failed: %s", self.solver, extra, exc)
                status = "solver_error"
            if status in ("optimal", "optimal_inaccurate") and P.value is not None:
                break
        elapsed = time.perf_counter() - start
        if status not in ("optimal", "optimal_inaccurate") or P.value is None:
            return BackendResult(None, None, status, elapsed)
        Pv = np.array(P.value, dtype=float)
        return BackendResult((Pv + Pv.T) / 2.0, float(t.value), status, elapsed)


_default_backend: Optional[CvxpyBackend] = None


def default_backend() -> CvxpyBackend:
    global _default_backend
    if _default_backend is None:
        _default_backend = CvxpyBackend()
    return _default_backend


def solve_feasibility(problem: LmiProblem, tol: float = DEFAULT_FEAS_TOL,
                      gamma: Optional[float] = None, backend=None,
                      region: Optional[BoxRegion] = None, grid_meta=()):
    """Look for a shared ``P`` satisfying every block of ``problem``.

    Returns a :class:`StorageCertificate` when the returned ``P`` has
    smallest eigenvalue >= ``tol`` and every block holds with margin
    >= ``-tol`` (both re-checked with numpy eigenvalues), otherwise
    :class:`Infeasible`.

    Raises
    ------
    SolverFailure
        When the backend returns no usable point.
    """
    if not tol > 0:
        raise ContractViolation(f"tol must be positive, got {tol}")
    backend = backend or default_backend()
    res = backend.maximize_margin(problem, gamma)
    if res.P is None:
        raise SolverFailure(f"backend {getattr(backend, 'name', backend)} returned status "
                            f"{res.status!r}", res.status)
    margins = problem.margins(res.P, gamma)
    block_margin = float(np.min(margins))
    min_eig_P = float(np.linalg.eigvalsh(res.P)[0])
    logger.debug("gamma=%s status=%s t=%.3e block margin=%.3e eig(P)=%.3e (%.2fs)",
                 gamma, res.status, res.margin, block_margin, min_eig_P, res.solve_time)
    if min_eig_P >= tol and block_margin >= -tol:
        return StorageCertificate(P=res.P, min_eigen_margin=block_margin, gamma=gamma,
                                  region=region, grid_meta=tuple(grid_meta),
                                  solver_status=res.status, analysis=problem.label,
                                  meta={"min_eig_P": min_eig_P,
                                        "backend": getattr(backend, "name", str(backend))})
    return Infeasible(margin=min(block_margin, min_eig_P), solver_status=res.status, gamma=gamma)


# -- analyses -------------------------------------------------------------------------

def _qsr_block(mats, supply, P, _gamma):
    return assemble_incremental_qsr(mats, supply, P)


def _li2_block(mats, Pbar, gamma):
    return assemble_li2_schur(mats, gamma, Pbar)


def _passivity_block(mats, P, _gamma):
    return assemble_passivity(mats, P)


def _as_matrices(embedding) -> list:
    if isinstance(embedding, GriddedEmbedding):
        return embedding.matrices
    if isinstance(embedding, DifferentialMatrices):
        return [embedding]
    return list(embedding)


def qsr_problem(embedding, supply: SupplyQSR) -> LmiProblem:
    mats = _as_matrices(embedding)
    return LmiProblem(mats[0].dims[0], [partial(_qsr_block, m, supply) for m in mats],
                      sense="nsd", label="qsr")


def li2_problem(embedding) -> LmiProblem:
    mats = _as_matrices(embedding)
    return LmiProblem(mats[0].dims[0], [partial(_li2_block, m) for m in mats],
                      sense="psd", label="li2")


def passivity_problem(embedding) -> LmiProblem:
    mats = _as_matrices(embedding)
    n_x, n_w, n_z = mats[0].dims
    if n_w != n_z:
        raise ContractViolation(f"passivity needs n_w == n_z, got {n_w} and {n_z}")
    return LmiProblem(n_x, [partial(_passivity_block, m) for m in mats],
                      sense="psd", label="passivity")


def _region_meta(embedding):
    if isinstance(embedding, GriddedEmbedding):
        return embedding.region, embedding.points_per_dim
    return None, ()


def check_incremental_qsr(embedding, supply: SupplyQSR, tol: float = DEFAULT_FEAS_TOL,
                          backend=None):
    """One shared ``P`` for the (Q,S,R) block at every grid point."""
    region, grid = _region_meta(embedding)
    cert = solve_feasibility(qsr_problem(embedding, supply), tol, backend=backend,
                             region=region, grid_meta=grid)
    if isinstance(cert, StorageCertificate):
        cert.meta["supply"] = supply.to_dict()
    return cert


def check_passivity(embedding, tol: float = DEFAULT_FEAS_TOL, backend=None):
    """One shared ``P`` for the passivity block at every grid point."""
    region, grid = _region_meta(embedding)
    n = _as_matrices(embedding)[0].dims[1]
    cert = solve_feasibility(passivity_problem(embedding), tol, backend=backend,
                             region=region, grid_meta=grid)
    if isinstance(cert, StorageCertificate):
        cert.meta["supply"] = SupplyQSR.passivity(n).to_dict()
    return cert


@dataclass
class GainResult:
    gamma: float
    certificate: StorageCertificate
    iterations: int
    bracket: tuple

    def __iter__(self):
        yield self.gamma
        yield self.certificate


def compute_li2_gain(embedding, bisect_tol: float = DEFAULT_BISECT_TOL,
                     gamma_cap: float = DEFAULT_GAMMA_CAP, tol: float = DEFAULT_FEAS_TOL,
                     backend=None):
    """Bisect on gamma over ``(0, gamma_cap]`` for the l2-gain Schur LMI.

    Returns a :class:`GainResult` (unpacks as ``gamma, certificate``) whose
    certificate stores the storage matrix ``P = gamma * inv(Pbar)``, or
    :class:`Unbounded` when even ``gamma_cap`` is not certified.
    """
    if not bisect_tol > 0 or not gamma_cap > 0:
        raise ContractViolation("bisect_tol and gamma_cap must be positive")
    mats = _as_matrices(embedding)
    if not mats:
        raise ContractViolation("empty embedding")
    region, grid = _region_meta(embedding)
    problem = li2_problem(mats)
    n_x, n_w, n_z = mats[0].dims

    best = solve_feasibility(problem, tol, gamma=gamma_cap, backend=backend)
    if not isinstance(best, StorageCertificate):
        return Unbounded(gamma_cap=gamma_cap, margin=best.margin)
    lo, hi = 0.0, float(gamma_cap)
    iterations = 1
    while hi - lo > bisect_tol:
        mid = 0.5 * (lo + hi)
        res = solve_feasibility(problem, tol, gamma=mid, backend=backend)
        iterations += 1
        if isinstance(res, StorageCertificate):
            hi, best = mid, res
        else:
            lo = mid
        logger.info("bisection [%.6g, %.6g]", lo, hi)

    Pbar = best.P
    P = hi * np.linalg.inv(Pbar)
    P = (P + P.T) / 2.0
    cert = StorageCertificate(
        P=P, min_eigen_margin=best.min_eigen_margin, gamma=hi, region=region,
        grid_meta=tuple(grid), solver_status=best.solver_status, analysis="li2",
        meta={"Pbar": Pbar.ravel().tolist(), "gamma_lower": lo, "bisect_tol": bisect_tol,
              "gamma_cap": gamma_cap, "iterations": iterations,
              "backend": best.meta.get("backend", ""),
              "supply": SupplyQSR.l2_gain(hi, n_w, n_z).to_dict()})
    return GainResult(hi, cert, iterations, (lo, hi))
