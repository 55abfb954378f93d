"""Primal and differential simulation, trajectory-pair sampling and
empirical checks of storage certificates."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .embedding import BoxRegion, SchedulingMap
from .jsonio import format_float
from .lmi import SupplyQSR
from .sysmodel import ContractViolation, DiscreteTimeSystem, evaluate, jacobians

DIVERGENCE_BOUND = 1e6


@dataclass
class Trajectory:
    """States x(0..N), inputs w(0..N-1), outputs z(0..N-1).

    ``diagnostic`` is set when simulation stopped early on a non-finite
    state; the arrays then hold the finite prefix.
    """

    states: np.ndarray
    inputs: np.ndarray
    outputs: np.ndarray
    diagnostic: Optional[str] = None

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        n = self.states.shape[0] - 1
        self.inputs = np.asarray(self.inputs, dtype=float).reshape(n, -1)
        self.outputs = np.asarray(self.outputs, dtype=float).reshape(n, -1)

    @property
    def horizon(self) -> int:
        return self.states.shape[0] - 1

    @property
    def truncated(self) -> bool:
        return self.diagnostic is not None


@dataclass
class TrajectoryPair:
    first: Trajectory
    second: Trajectory

    def __post_init__(self):
        if self.first.horizon != self.second.horizon:
            raise ContractViolation(
                f"pair horizons differ: {self.first.horizon} vs {self.second.horizon}")
        for name in ("states", "inputs", "outputs"):
            if getattr(self.first, name).shape[1:] != getattr(self.second, name).shape[1:]:
                raise ContractViolation(f"pair {name} dimensions differ")


@dataclass
class DifferentialTrajectory:
    dstates: np.ndarray
    dinputs: np.ndarray
    doutputs: np.ndarray


def _input_array(w_seq, n_w: int) -> np.ndarray:
    w = np.asarray(w_seq, dtype=float)
    if w.ndim == 1 and n_w == 1:
        w = w.reshape(-1, 1)
    if w.ndim != 2 or w.shape[1] != n_w:
        raise ContractViolation(f"input sequence must have shape (N, {n_w}), got {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ContractViolation("input sequence contains non-finite values")
    return w


def simulate(sys: DiscreteTimeSystem, x0, w_seq) -> Trajectory:
    """Iterate the system map from ``x0`` under ``w_seq``."""
    w = _input_array(w_seq, sys.n_w)
    x = np.asarray(x0, dtype=float).reshape(-1)
    if x.shape[0] != sys.n_x:
        raise ContractViolation(f"x0 must have length {sys.n_x}, got {x.shape[0]}")
    states = [x]
    outputs = []
    for k in range(w.shape[0]):
        x_next, z = evaluate(sys, states[-1], w[k])
        if not (np.all(np.isfinite(x_next)) and np.all(np.isfinite(z))):
            return Trajectory(np.array(states), w[:k], np.array(outputs).reshape(k, sys.n_z),
                              diagnostic=f"non-finite state at step {k + 1}")
        states.append(x_next)
        outputs.append(z)
    return Trajectory(np.array(states), w, np.array(outputs).reshape(w.shape[0], sys.n_z))


def simulate_differential(sys: DiscreteTimeSystem, base: Trajectory, dx0, dw_seq,
                          fd_step: Optional[float] = None) -> DifferentialTrajectory:
    """Propagate variations along ``base`` with the Jacobians evaluated on it."""
    N = base.horizon
    dw = _input_array(dw_seq, sys.n_w)
    if dw.shape[0] != N:
        raise ContractViolation(f"dw_seq has {dw.shape[0]} steps, base trajectory has {N}")
    dx = np.empty((N + 1, sys.n_x))
    dz = np.empty((N, sys.n_z))
    dx[0] = np.asarray(dx0, dtype=float).reshape(sys.n_x)
    for k in range(N):
        A, B, C, D = jacobians(sys, base.states[k], base.inputs[k], fd_step).as_tuple()
        dx[k + 1] = A @ dx[k] + B @ dw[k]
        dz[k] = C @ dx[k] + D @ dw[k]
    return DifferentialTrajectory(dx, dw, dz)


# -- dissipation checks -------------------------------------------------------------

def dissipation_residuals(pair: TrajectoryPair, P, supply: SupplyQSR) -> np.ndarray:
    """``V(k+1) - V(k) - s(k)`` for every step of the pair."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    a, b = pair.first, pair.second
    if P.shape != (a.states.shape[1],) * 2:
        raise ContractViolation(f"P has shape {P.shape}, state dimension is {a.states.shape[1]}")
    if (supply.n_w, supply.n_z) != (a.inputs.shape[1], a.outputs.shape[1]):
        raise ContractViolation("supply dimensions do not match the trajectories")
    dx = a.states - b.states
    V = np.einsum("ki,ij,kj->k", dx, P, dx)
    v = np.hstack([a.inputs - b.inputs, a.outputs - b.outputs])
    s = np.einsum("ki,ij,kj->k", v, supply.matrix, v)
    return V[1:] - V[:-1] - s


def validate_dissipation(pair: TrajectoryPair, P, supply: SupplyQSR) -> float:
    """Largest per-step dissipation violation (<= 0 means none)."""
    res = dissipation_residuals(pair, P, supply)
    return float(np.max(res)) if res.size else 0.0


def storage(P, x, x_tilde) -> float:
    d = np.asarray(x, float) - np.asarray(x_tilde, float)
    return float(d @ np.asarray(P, float) @ d)


@dataclass
class LongRunVerdict:
    kind: str                     # "converged", "oscillating" or "diverged"
    amplitude: np.ndarray         # per-state peak-to-peak after settle_k
    max_step: float

    @property
    def peak_to_peak(self) -> float:
        return float(np.max(self.amplitude)) if self.amplitude.size else 0.0


def classify_longrun(traj: Trajectory, settle_k: int = 500, tol: float = 1e-6) -> LongRunVerdict:
    """Converged, oscillating or diverged behaviour after ``settle_k``."""
    X = traj.states
    if traj.truncated or np.any(np.linalg.norm(X, axis=1) > DIVERGENCE_BOUND):
        return LongRunVerdict("diverged", np.full(X.shape[1], np.inf), np.inf)
    if traj.horizon <= settle_k:
        raise ContractViolation(f"horizon {traj.horizon} must exceed settle_k {settle_k}")
    tail = X[settle_k:]
    max_step = float(np.max(np.linalg.norm(np.diff(tail, axis=0), axis=1)))
    amplitude = np.ptp(tail, axis=0)
    return LongRunVerdict("converged" if max_step <= tol else "oscillating", amplitude, max_step)


def _l2(rows: np.ndarray) -> float:
    return math.sqrt(math.fsum(float(v) for v in np.sum(rows * rows, axis=1)))


def empirical_gain_lower_bound(sys: DiscreteTimeSystem, pairs: Sequence[TrajectoryPair]) -> float:
    """Largest ``||z - z~||_2 / ||w - w~||_2`` over pairs sharing x0."""
    best = 0.0
    for i, pair in enumerate(pairs):
        a, b = pair.first, pair.second
        if a.outputs.shape[1] != sys.n_z or a.inputs.shape[1] != sys.n_w:
            raise ContractViolation(f"pair {i} does not match the system dimensions")
        if not np.allclose(a.states[0], b.states[0], rtol=0, atol=1e-12):
            raise ContractViolation(f"pair {i} does not share its initial state")
        den = _l2(a.inputs - b.inputs)
        if den == 0.0:
            warnings.warn(f"pair {i} has identical inputs; skipped", RuntimeWarning, stacklevel=2)
            continue
        best = max(best, _l2(a.outputs - b.outputs) / den)
    return best


# -- pair sampling ------------------------------------------------------------------

def band_limited_noise(rng: np.random.Generator, horizon: int, n: int,
                       amplitude: float, pole: float = 0.8) -> np.ndarray:
    """First-order low-pass filtered Gaussian noise clipped to +-amplitude."""
    e = rng.standard_normal((horizon, n))
    out = np.empty_like(e)
    acc = np.zeros(n)
    for k in range(horizon):
        acc = pole * acc + (1 - pole) * e[k]
        out[k] = acc
    scale = amplitude / max(np.max(np.abs(out)), 1e-12)
    return np.clip(out * scale * rng.uniform(0.2, 1.0), -amplitude, amplitude)


def in_region(traj: Trajectory, schedmap: SchedulingMap, region: BoxRegion) -> bool:
    for k in range(traj.horizon):
        if not region.contains(schedmap.selector(traj.states[k], traj.inputs[k])):
            return False
    return region.contains(schedmap.selector(traj.states[-1], traj.inputs[-1]))


@dataclass
class PairSample:
    pairs: list
    attempts: int
    rejected: int = 0
    seed: Optional[int] = None
    meta: dict = field(default_factory=dict)


def sample_pairs(sys: DiscreteTimeSystem, schedmap: SchedulingMap, region: BoxRegion,
                 n_pairs: int, horizon: int = 40, seed: int = 0, shared_initial: bool = False,
                 input_amplitude: float = 1.0, fraction: float = 0.9,
                 max_attempts: Optional[int] = None) -> PairSample:
    """Random trajectory pairs that stay inside ``region`` throughout.

    Initial operating points are drawn uniformly from the region shrunk to
    ``fraction`` of its size and lifted to states; inputs are the lifted
    input plus band-limited noise. Pairs leaving the region are discarded.
    """
    if n_pairs < 1:
        raise ContractViolation("n_pairs must be at least 1")
    rng = np.random.default_rng(seed)
    inner = region.scaled(fraction)
    max_attempts = max_attempts or 200 * n_pairs

    def draw(x0=None, w_base=None):
        if x0 is None:
            rho = rng.uniform(inner.lower, inner.upper)
            x0, w_base = schedmap.lift(rho)
        w = np.asarray(w_base, float) + band_limited_noise(rng, horizon, sys.n_w, input_amplitude)
        return simulate(sys, x0, w), x0, w_base

    pairs, attempts = [], 0
    while len(pairs) < n_pairs:
        attempts += 1
        if attempts > max_attempts:
            raise RuntimeError(f"only {len(pairs)} of {n_pairs} in-region pairs after "
                               f"{max_attempts} attempts")
        a, x0, w_base = draw()
        b, _, _ = draw(x0, w_base) if shared_initial else draw()
        if a.truncated or b.truncated:
            continue
        if in_region(a, schedmap, region) and in_region(b, schedmap, region):
            pairs.append(TrajectoryPair(a, b))
    return PairSample(pairs, attempts, attempts - n_pairs, seed)


# -- CSV --------------------------------------------------------------------------

def trajectory_csv(traj: Trajectory) -> str:
    """``k,x1..xn,w1..wm,z1..zp`` rows; the last row carries x(N) only."""
    n_x, n_w, n_z = traj.states.shape[1], traj.inputs.shape[1], traj.outputs.shape[1]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["k"] + [f"x{i + 1}" for i in range(n_x)] + [f"w{i + 1}" for i in range(n_w)]
                    + [f"z{i + 1}" for i in range(n_z)])
    for k in range(traj.horizon + 1):
        row = [str(k)] + [format_float(v) for v in traj.states[k]]
        if k < traj.horizon:
            row += [format_float(v) for v in traj.inputs[k]]
            row += [format_float(v) for v in traj.outputs[k]]
        else:
            row += [""] * (n_w + n_z)
        writer.writerow(row)
    return buf.getvalue()


def read_trajectory_csv(text: str) -> Trajectory:
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], rows[1:]
    n_x = sum(h.startswith("x") for h in header)
    n_w = sum(h.startswith("w") for h in header)
    states = np.array([[float(v) for v in r[1:1 + n_x]] for r in body])
    inputs = np.array([[float(v) for v in r[1 + n_x:1 + n_x + n_w]] for r in body[:-1]])
    outputs = np.array([[float(v) for v in r[1 + n_x + n_w:]] for r in body[:-1]])
    return Trajectory(states, inputs, outputs)
