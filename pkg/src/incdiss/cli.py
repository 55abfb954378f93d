"""Command-line front end.

``incdiss run --config cfg.json --out DIR`` runs one analysis on a builtin
system; ``incdiss validate --cert certificate.json --system NAME`` checks a
certificate against sampled trajectory pairs. The config schema is
described in the README.

Exit codes: 0 certified or completed, 1 usage error, 2 infeasible,
unbounded or violated, 3 solver failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import examples, jsonio, lmi, sim
from .embedding import BoxRegion, embed_region
from .sysmodel import ContractViolation

EXIT_OK, EXIT_USAGE, EXIT_NEGATIVE, EXIT_UNSOLVED = 0, 1, 2, 3
VIOLATION_TOL = 1e-6
SEED_MAX = 2**64 - 1

log = logging.getLogger("incdiss")


class UsageError(Exception):
    pass


# -- config schema ------------------------------------------------------------------

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class Tolerances(_Strict):
    bisect_tol: float = Field(lmi.DEFAULT_BISECT_TOL, gt=0)
    feas_tol: float = Field(lmi.DEFAULT_FEAS_TOL, gt=0)
    gamma_cap: float = Field(lmi.DEFAULT_GAMMA_CAP, gt=0)


class SupplyConfig(_Strict):
    Q: list[list[float]]
    S: list[list[float]]
    R: list[list[float]]


class ZeroDisturbance(_Strict):
    kind: Literal["zero"]


class RampSatDisturbance(_Strict):
    kind: Literal["ramp_sat"]
    slope: float = -1.0
    k_sat: int = Field(70, ge=0)


class ConstantDisturbance(_Strict):
    kind: Literal["constant"]
    value: float


Disturbance = Union[ZeroDisturbance, RampSatDisturbance, ConstantDisturbance]


class SimulationConfig(_Strict):
    horizon: int = Field(1000, ge=1)
    x0: Optional[list[float]] = None
    disturbance: Disturbance = Field(default_factory=lambda: ZeroDisturbance(kind="zero"),
                                     discriminator="kind")
    settle_k: int = Field(500, ge=0)
    converge_tol: float = Field(1e-6, gt=0)


class ValidationConfig(_Strict):
    certificate: Optional[str] = None
    pairs: int = Field(100, ge=1)
    horizon: int = Field(40, ge=1)


class AnalysisConfig(_Strict):
    system: str
    analysis: Literal["li2", "qsr", "passivity", "simulate", "validate"]
    region: Optional[list[tuple[float, float]]] = None
    grid: Optional[list[int]] = None
    supply: Optional[SupplyConfig] = None
    tolerances: Tolerances = Field(default_factory=Tolerances)
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)
    validation: ValidationConfig = Field(default_factory=ValidationConfig)
    seed: int = Field(0, ge=0, le=SEED_MAX)
    out: Optional[str] = None

    @field_validator("system")
    @classmethod
    def _known_system(cls, v):
        if v not in examples.BUILTINS:
            raise ValueError(f"unknown builtin {v!r}; choose from {', '.join(examples.BUILTINS)}")
        return v

    @field_validator("grid")
    @classmethod
    def _positive_counts(cls, v):
        if v is not None and any(c < 1 for c in v):
            raise ValueError("grid counts must be >= 1")
        return v

    @model_validator(mode="after")
    def _analysis_inputs(self):
        if self.analysis == "qsr" and self.supply is None:
            raise ValueError("analysis 'qsr' needs a supply {Q, S, R}")
        if self.analysis == "validate" and self.validation.certificate is None:
            raise ValueError("analysis 'validate' needs validation.certificate")
        return self


def _format_validation_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"  field {loc}: {err['msg']}")
    return "invalid config:\n" + "\n".join(lines)


def load_config(path: Union[str, Path]) -> AnalysisConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path}: malformed JSON at line {exc.lineno}, "
                         f"column {exc.colno}: {exc.msg}") from None
    try:
        return AnalysisConfig.model_validate(data)
    except ValidationError as exc:
        raise UsageError(f"config {path}: {_format_validation_error(exc)}") from None


# -- analyses ---------------------------------------------------------------------

def _region_and_grid(cfg: AnalysisConfig, bench: examples.Benchmark):
    region = bench.region if cfg.region is None else BoxRegion(tuple(cfg.region), bench.region.names)
    grid = tuple(bench.grid if cfg.grid is None else cfg.grid)
    if region.ndim != bench.region.ndim:
        raise UsageError(f"region has {region.ndim} intervals, {bench.name} schedules on "
                         f"{bench.region.ndim} coordinates")
    if len(grid) != region.ndim:
        raise UsageError(f"grid has {len(grid)} counts for a {region.ndim}-dimensional region")
    return region, grid


def _disturbance(spec, horizon: int) -> np.ndarray:
    if spec.kind == "ramp_sat":
        return examples.ramp_saturating(spec.slope, spec.k_sat, horizon)
    if spec.kind == "constant":
        return np.full((horizon, 1), spec.value)
    return np.zeros((horizon, 1))


class Outcome:
    def __init__(self, code: int, report: dict, summary: list):
        self.code = code
        self.report = report
        self.summary = summary


def _fmt(x) -> str:
    return jsonio.format_float(x) if isinstance(x, float) else str(x)


def _lmi_analysis(cfg: AnalysisConfig, bench, out: Path) -> Outcome:
    region, grid = _region_and_grid(cfg, bench)
    tol = cfg.tolerances
    emb = embed_region(bench.system, bench.schedmap, region, grid)
    n_points = len(emb)
    report = {"system": bench.name, "analysis": cfg.analysis, "seed": cfg.seed,
              "grid": list(grid), "grid_points": n_points}
    if cfg.analysis == "li2":
        res = lmi.compute_li2_gain(emb, tol.bisect_tol, tol.gamma_cap, tol.feas_tol)
    elif cfg.analysis == "qsr":
        supply = lmi.SupplyQSR(np.array(cfg.supply.Q), np.array(cfg.supply.S),
                               np.array(cfg.supply.R))
        res = lmi.check_incremental_qsr(emb, supply, tol.feas_tol)
    else:
        res = lmi.check_passivity(emb, tol.feas_tol)

    if isinstance(res, lmi.GainResult):
        cert = res.certificate
        report.update(verdict="certified", gamma=res.gamma, gamma_lower=float(res.bracket[0]),
                      iterations=res.iterations)
    elif isinstance(res, lmi.StorageCertificate):
        cert = res
        report.update(verdict="certified")
    elif isinstance(res, lmi.Unbounded):
        report.update(verdict="unbounded", gamma_cap=res.gamma_cap, margin=res.margin)
        return Outcome(EXIT_NEGATIVE, report, [
            f"verdict: no certificate up to gamma_cap = {_fmt(res.gamma_cap)}",
            f"margin at gamma_cap: {_fmt(res.margin)}"])
    else:
        report.update(verdict="infeasible", margin=res.margin,
                      dual_certificate=res.dual_certificate)
        return Outcome(EXIT_NEGATIVE, report, [
            "verdict: no certificate found at the requested tolerance",
            f"margin: {_fmt(res.margin)}"])

    cert.meta["seed"] = cfg.seed
    cert.meta["system"] = bench.name
    (out / "certificate.json").write_text(cert.to_json())
    report.update(margin=cert.min_eigen_margin, certificate="certificate.json")
    lines = ["verdict: certified"]
    if cert.gamma is not None:
        lines.append(f"gamma: {_fmt(cert.gamma)}")
    lines.append(f"margin: {_fmt(cert.min_eigen_margin)}")
    return Outcome(EXIT_OK, report, lines)


def _simulate_analysis(cfg: AnalysisConfig, bench, out: Path) -> Outcome:
    sc = cfg.simulation
    x0 = bench.x0 if sc.x0 is None else tuple(sc.x0)
    if len(x0) != bench.system.n_x:
        raise UsageError(f"x0 has {len(x0)} entries, {bench.name} has {bench.system.n_x} states")
    if bench.system.n_w != 1 and sc.disturbance.kind != "zero":
        raise UsageError("scalar disturbances need a single-input system")
    w = _disturbance(sc.disturbance, sc.horizon)
    if bench.system.n_w != 1:
        w = np.zeros((sc.horizon, bench.system.n_w))
    traj = sim.simulate(bench.system, x0, w)
    (out / "trajectory.csv").write_text(sim.trajectory_csv(traj))
    report = {"system": bench.name, "analysis": "simulate", "seed": cfg.seed,
              "horizon": sc.horizon, "x0": list(map(float, x0)),
              "disturbance": sc.disturbance.model_dump(), "trajectory": "trajectory.csv",
              "final_state": traj.states[-1].tolist(), "truncated": traj.truncated}
    lines = [f"horizon: {traj.horizon}", "final state: "
             + " ".join(_fmt(float(v)) for v in traj.states[-1])]
    if traj.diagnostic:
        report["diagnostic"] = traj.diagnostic
        lines.append(f"diagnostic: {traj.diagnostic}")
    if traj.horizon > sc.settle_k:
        verdict = sim.classify_longrun(traj, sc.settle_k, sc.converge_tol)
        report.update(behaviour=verdict.kind, amplitude=verdict.amplitude.tolist(),
                      max_step=verdict.max_step)
        lines.append(f"behaviour: {verdict.kind}")
        lines.append("peak-to-peak after settle: "
                     + " ".join(_fmt(float(v)) for v in verdict.amplitude))
    return Outcome(EXIT_OK, report, lines)


def validate_certificate(cert: lmi.StorageCertificate, bench: examples.Benchmark,
                         n_pairs: int, seed: int = 0, horizon: int = 40) -> dict:
    """Sample in-region pairs and measure the worst dissipation violation."""
    if n_pairs < 1:
        raise UsageError("at least one trajectory pair is needed")
    n_x, n_w, n_z = bench.system.n_x, bench.system.n_w, bench.system.n_z
    if cert.P.shape != (n_x, n_x):
        raise UsageError(f"certificate P is {cert.P.shape[0]}x{cert.P.shape[1]}, "
                         f"{bench.name} has {n_x} states")
    if "supply" in cert.meta:
        supply = lmi.SupplyQSR.from_dict(cert.meta["supply"])
    elif cert.gamma is not None:
        supply = lmi.SupplyQSR.l2_gain(cert.gamma, n_w, n_z)
    else:
        raise UsageError("certificate carries neither a supply nor a gamma")
    if (supply.n_w, supply.n_z) != (n_w, n_z):
        raise UsageError("certificate supply does not match the system dimensions")
    region = cert.region or bench.region
    if region.ndim != bench.region.ndim:
        raise UsageError(f"certificate region has {region.ndim} coordinates, {bench.name} "
                         f"schedules on {bench.region.ndim}")
    sample = sim.sample_pairs(bench.system, bench.schedmap, region, n_pairs, horizon, seed)
    worst = max(sim.validate_dissipation(p, cert.P, supply) for p in sample.pairs)
    return {"max_violation": worst, "pairs": n_pairs, "attempts": sample.attempts,
            "horizon": horizon, "seed": seed, "tolerance": VIOLATION_TOL,
            "passed": bool(worst <= VIOLATION_TOL)}


def _read_certificate(path) -> lmi.StorageCertificate:
    try:
        return lmi.StorageCertificate.from_json(Path(path).read_text())
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load certificate {path}: {exc}") from None


def _validate_analysis(cfg: AnalysisConfig, bench, out: Path) -> Outcome:
    vc = cfg.validation
    cert = _read_certificate(vc.certificate)
    res = validate_certificate(cert, bench, vc.pairs, cfg.seed, vc.horizon)
    report = {"system": bench.name, "analysis": "validate", **res}
    lines = [f"pairs: {res['pairs']}", f"max violation: {_fmt(res['max_violation'])}",
             "verdict: " + ("no violation" if res["passed"] else "violation found")]
    return Outcome(EXIT_OK if res["passed"] else EXIT_NEGATIVE, report, lines)


_ANALYSES = {"li2": _lmi_analysis, "qsr": _lmi_analysis, "passivity": _lmi_analysis,
             "simulate": _simulate_analysis, "validate": _validate_analysis}


def run(cfg: AnalysisConfig, out: Union[str, Path], quiet: bool = False) -> int:
    """Run one configured analysis, write artifacts into ``out``, return the exit code."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    bench = examples.get_builtin(cfg.system)
    start = time.perf_counter()
    try:
        outcome = _ANALYSES[cfg.analysis](cfg, bench, out)
    except lmi.SolverFailure as exc:
        outcome = Outcome(EXIT_UNSOLVED, {"system": bench.name, "analysis": cfg.analysis,
                                          "seed": cfg.seed, "verdict": "unsolved",
                                          "solver_status": exc.status},
                          [f"verdict: unsolved ({exc})"])
    except ContractViolation as exc:
        raise UsageError(str(exc)) from None
    wall = time.perf_counter() - start
    outcome.report["wall_time_s"] = wall
    outcome.report["exit_code"] = outcome.code
    header = [f"system: {bench.name}", f"analysis: {cfg.analysis}", f"seed: {cfg.seed}"]
    if "grid_points" in outcome.report:
        header.append(f"grid: {'x'.join(map(str, outcome.report['grid']))} "
                      f"({outcome.report['grid_points']} points)")
    summary = "\n".join(header + outcome.summary + [f"wall time: {wall:.3f} s",
                                                    f"exit code: {outcome.code}"]) + "\n"
    (out / "summary.txt").write_text(summary)
    (out / "report.json").write_text(jsonio.dumps(outcome.report))
    if not quiet:
        sys.stdout.write(summary)
    return outcome.code


# -- entry point ----------------------------------------------------------------------

def _seed(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= v <= SEED_MAX:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="incdiss", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the analysis described by a JSON config")
    p_run.add_argument("--config", required=True, help="path to the JSON config")
    p_run.add_argument("--out", help="output directory (default: config 'out' or '.')")
    p_run.add_argument("--seed", type=_seed, help="override the config seed")
    p_run.add_argument("--quiet", action="store_true", help="do not print the summary")

    p_val = sub.add_parser("validate", help="check a certificate on sampled trajectory pairs")
    p_val.add_argument("--cert", required=True, help="certificate JSON")
    p_val.add_argument("--system", required=True, choices=examples.BUILTINS)
    p_val.add_argument("--pairs", type=int, default=100)
    p_val.add_argument("--horizon", type=int, default=40)
    p_val.add_argument("--seed", type=_seed, default=0)
    p_val.add_argument("--quiet", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            cfg = load_config(args.config)
            if args.seed is not None:
                cfg.seed = args.seed
            return run(cfg, args.out or cfg.out or ".", args.quiet)
        if args.pairs < 1 or args.horizon < 1:
            raise UsageError("--pairs and --horizon must be at least 1")
        cert = _read_certificate(args.cert)
        res = validate_certificate(cert, examples.get_builtin(args.system), args.pairs,
                                   args.seed, args.horizon)
        if not args.quiet:
            sys.stdout.write(f"pairs: {res['pairs']}\nseed: {res['seed']}\n"
                             f"max violation: {_fmt(res['max_violation'])}\n"
                             f"verdict: {'no violation' if res['passed'] else 'violation found'}\n")
        return EXIT_OK if res["passed"] else EXIT_NEGATIVE
    except UsageError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
