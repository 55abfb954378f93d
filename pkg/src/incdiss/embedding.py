"""Gridded LPV embedding of a system's differential form.

The grid lives in scheduling space. A :class:`SchedulingMap` carries both
directions: ``selector`` sends an operating point ``(x, w)`` to its
scheduling vector, and ``lift`` sends a grid point back to an operating
point at which the Jacobians are evaluated.

The storage certificate computed on a grid is only proven at the grid
points; between grid points it is a (usually good) heuristic.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Optional, Sequence

import numpy as np

from . import jsonio
from .sysmodel import (ContractViolation, DifferentialMatrices, DiscreteTimeSystem,
                       EvaluationError, jacobians)

EMBEDDING_FORMAT = "incdiss.embedding/1"


@dataclass(frozen=True)
class BoxRegion:
    """Axis-aligned box, one ``(lower, upper)`` pair per coordinate."""

    intervals: tuple
    names: tuple = ()

    def __post_init__(self):
        ivals = tuple((float(lo), float(hi)) for lo, hi in self.intervals)
        if not ivals:
            raise ContractViolation("a region needs at least one interval")
        for i, (lo, hi) in enumerate(ivals):
            if not (np.isfinite(lo) and np.isfinite(hi)):
                raise ContractViolation(f"interval {i} has non-finite bounds ({lo}, {hi})")
            if not lo < hi:
                raise ContractViolation(f"interval {i} needs lower < upper, got ({lo}, {hi})")
        object.__setattr__(self, "intervals", ivals)
        names = tuple(self.names)
        if names and len(names) != len(ivals):
            raise ContractViolation("names must match the number of intervals")
        object.__setattr__(self, "names", names)

    @property
    def ndim(self) -> int:
        return len(self.intervals)

    @property
    def lower(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.intervals])

    @property
    def upper(self) -> np.ndarray:
        return np.array([hi for _, hi in self.intervals])

    def contains(self, point, rtol: float = 1e-12) -> bool:
        p = np.asarray(point, dtype=float).reshape(-1)
        if p.shape[0] != self.ndim:
            raise ContractViolation(f"point has {p.shape[0]} coordinates, region has {self.ndim}")
        slack = rtol * np.maximum(1.0, np.abs(self.upper - self.lower))
        return bool(np.all(p >= self.lower - slack) and np.all(p <= self.upper + slack))

    def scaled(self, fraction: float) -> "BoxRegion":
        """Box with the same centre and each side scaled by ``fraction``."""
        mid = 0.5 * (self.lower + self.upper)
        half = 0.5 * fraction * (self.upper - self.lower)
        return BoxRegion(tuple(zip(mid - half, mid + half)), self.names)

    def to_dict(self) -> dict:
        d = {"intervals": [list(iv) for iv in self.intervals]}
        if self.names:
            d["names"] = list(self.names)
        return d

    @classmethod
    def from_dict(cls, d) -> "BoxRegion":
        if isinstance(d, dict):
            return cls(tuple(tuple(iv) for iv in d["intervals"]), tuple(d.get("names", ())))
        return cls(tuple(tuple(iv) for iv in d))


@dataclass(frozen=True)
class SchedulingMap:
    """Scheduling map ``rho = selector(x, w)`` with a right inverse ``lift``."""

    n_rho: int
    selector: Callable[[np.ndarray, np.ndarray], np.ndarray]
    lift: Callable[[np.ndarray], tuple]
    names: tuple = ()


def identity_scheduling(n_x: int, n_w: int) -> SchedulingMap:
    """Schedule on the full operating point ``col(x, w)``."""
    return SchedulingMap(n_x + n_w, partial(_concat), partial(_split_at, n_x))


def _concat(x, w):
    return np.concatenate([np.atleast_1d(x), np.atleast_1d(w)])


def _split_at(n_x, rho):
    rho = np.asarray(rho, dtype=float)
    return rho[:n_x], rho[n_x:]


def generate_grid(region: BoxRegion, points_per_dim: Sequence[int]) -> np.ndarray:
    """Equidistant Cartesian grid, endpoints included, lexicographic order.

    A count of 1 places the single point at the interval midpoint. The
    last coordinate varies fastest.
    """
    counts = [int(c) for c in points_per_dim]
    if len(counts) != region.ndim:
        raise ContractViolation(
            f"got {len(counts)} grid counts for a {region.ndim}-dimensional region")
    axes = []
    for i, ((lo, hi), c) in enumerate(zip(region.intervals, counts)):
        if c < 1:
            raise ContractViolation(f"grid count for dimension {i} must be >= 1, got {c}")
        axes.append(np.array([0.5 * (lo + hi)]) if c == 1 else np.linspace(lo, hi, c))
    return np.array(list(itertools.product(*axes)), dtype=float).reshape(-1, region.ndim)


@dataclass
class GriddedEmbedding:
    """Differential matrices attached to every point of a scheduling grid."""

    points: np.ndarray
    matrices: list
    region: Optional[BoxRegion] = None
    points_per_dim: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if len(self.matrices) != self.points.shape[0]:
            raise ContractViolation(
                f"{len(self.matrices)} matrix sets for {self.points.shape[0]} grid points")
        if self.points_per_dim and int(np.prod(self.points_per_dim)) != len(self.matrices):
            raise ContractViolation("points_per_dim does not match the number of grid points")
        dims = {m.dims for m in self.matrices}
        if len(dims) > 1:
            raise ContractViolation(f"inconsistent matrix dimensions across grid: {dims}")

    def __len__(self) -> int:
        return len(self.matrices)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.matrices[0].dims

    def subset(self, indices) -> "GriddedEmbedding":
        idx = list(indices)
        return GriddedEmbedding(self.points[idx], [self.matrices[i] for i in idx],
                                self.region, (), dict(self.meta))

    def to_dict(self) -> dict:
        n_x, n_w, n_z = self.dims
        return {
            "format": EMBEDDING_FORMAT,
            "dims": {"n_x": n_x, "n_w": n_w, "n_z": n_z},
            "region": None if self.region is None else self.region.to_dict(),
            "points_per_dim": list(self.points_per_dim),
            "meta": self.meta,
            "points": self.points.tolist(),
            # each matrix flattened row-major
            "matrices": [{k: getattr(m, k).ravel(order="C").tolist() for k in "ABCD"}
                         for m in self.matrices],
        }

    def to_json(self) -> str:
        return jsonio.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "GriddedEmbedding":
        if d.get("format") != EMBEDDING_FORMAT:
            raise ContractViolation(f"unknown embedding format {d.get('format')!r}")
        n_x, n_w, n_z = d["dims"]["n_x"], d["dims"]["n_w"], d["dims"]["n_z"]
        shapes = {"A": (n_x, n_x), "B": (n_x, n_w), "C": (n_z, n_x), "D": (n_z, n_w)}
        mats = [DifferentialMatrices(*(np.array(m[k], dtype=float).reshape(shapes[k])
                                       for k in "ABCD"))
                for m in d["matrices"]]
        region = None if d.get("region") is None else BoxRegion.from_dict(d["region"])
        return cls(np.array(d["points"], dtype=float).reshape(len(mats), -1), mats, region,
                   tuple(d.get("points_per_dim", ())), dict(d.get("meta", {})))

    @classmethod
    def from_json(cls, text: str) -> "GriddedEmbedding":
        return cls.from_dict(jsonio.loads(text))


def _matrices_at(sys: DiscreteTimeSystem, schedmap: SchedulingMap,
                 fd_step: Optional[float], indexed_point):
    index, rho = indexed_point
    x, w = schedmap.lift(rho)
    rho_back = np.asarray(schedmap.selector(np.asarray(x, float), np.asarray(w, float)), float)
    if rho_back.shape != rho.shape or not np.allclose(rho_back, rho, rtol=1e-9, atol=1e-9):
        raise ContractViolation(
            f"lift and selector disagree at grid point {index}: {rho.tolist()} -> "
            f"{np.asarray(rho_back).tolist()}")
    try:
        return jacobians(sys, x, w, fd_step)
    except EvaluationError as exc:
        raise EvaluationError(f"grid point {index} (rho={rho.tolist()}): {exc}", x, w) from exc


def embed_differential_form(sys: DiscreteTimeSystem, schedmap: SchedulingMap, grid,
                            region: Optional[BoxRegion] = None, points_per_dim=(),
                            fd_step: Optional[float] = None,
                            workers: Optional[int] = None) -> GriddedEmbedding:
    """Evaluate the differential matrices at every grid point.

    With ``workers > 1`` the points are distributed over a process pool;
    results are gathered in grid order either way.
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    if grid.shape[1] != schedmap.n_rho:
        raise ContractViolation(
            f"grid points have {grid.shape[1]} coordinates, scheduling map has {schedmap.n_rho}")
    if region is not None:
        for i, rho in enumerate(grid):
            if not region.contains(rho):
                raise ContractViolation(f"grid point {i} {rho.tolist()} lies outside the region")
    work = partial(_matrices_at, sys, schedmap, fd_step)
    items = list(enumerate(grid))
    if workers and workers > 1 and len(items) > 1:
        chunk = max(1, len(items) // (4 * workers))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            mats = list(pool.map(work, items, chunksize=chunk))
    else:
        mats = [work(item) for item in items]
    return GriddedEmbedding(grid, mats, region, tuple(int(c) for c in points_per_dim),
                            {"system": sys.name})


def embed_region(sys: DiscreteTimeSystem, schedmap: SchedulingMap, region: BoxRegion,
                 points_per_dim: Sequence[int], fd_step: Optional[float] = None,
                 workers: Optional[int] = None) -> GriddedEmbedding:
    """Grid ``region`` and embed the differential form on it."""
    grid = generate_grid(region, points_per_dim)
    return embed_differential_form(sys, schedmap, grid, region, points_per_dim,
                                   fd_step=fd_step, workers=workers)
