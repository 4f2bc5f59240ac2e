"""Command-line entry point.

Subcommands: ``prepare``, ``simulate``, ``calibrate-fd``,
``calibrate-solution``, ``compare`` and ``synth``. Settings come from a JSON
config file (``--config``) with a handful of flag overrides; every run writes
``manifest.json`` with the resolved config, its hash, library versions and the
seed next to its outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import __version__
from .data_pipeline import (
    BinSummary,
    DataFormatError,
    NormalizedDataset,
    bin_summaries,
    finite_diff_derivative,
    ingest_csv,
    load_normalized,
    normalize,
    with_derivative,
)
from .fd_calibration import (
    FDProblem,
    FDResult,
    calibrate_newell,
    calibrate_spline,
    saturation_grid,
    write_fd_table,
    write_scatter_csv,
)
from .ldg_solver import BoundaryCondition, SolverConfig, simulate
from .model import FluxVariant, Kernel, ModelParams, SaturationParams, velocity_from_dict
from .solution_calibration import (
    DEFAULT_C_GRID,
    DEFAULT_KAPPA_GRID,
    DEFAULT_V_GRID,
    calibrate_solution,
    compare_models,
    extract_scenario,
    synthesize_scenario,
    write_solution_table,
)

log = logging.getLogger("nonlocal_traffic")

COMMANDS = ("prepare", "simulate", "calibrate-fd", "calibrate-solution", "compare", "synth")


# ---------------------------------------------------------------------------
# Configuration schema
# ---------------------------------------------------------------------------


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _check_kappa(v: float) -> float:
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"kappa must lie in [0, 1], got {v}")
    return v


class DataSection(_Strict):
    units: dict[str, Any] | None = None
    time_scale: Literal["hours", "seconds", "unit"] = "hours"
    speed_floor: float = Field(1e-6, gt=0)
    box_filter: bool = False
    box_radius: int = Field(1, ge=1)


class SaturationSection(_Strict):
    K1: float = 1.0
    K2: float = 0.0
    K3: float = 1.0
    variant: Literal["tanh", "algebraic", "viscous"] = "tanh"
    nu: float = 1.0
    c: float = 1.0

    @field_validator("K3")
    @classmethod
    def _k3(cls, v: float) -> float:
        if v == 0:
            raise ValueError("K3 must be nonzero")
        return v

    def build(self) -> SaturationParams:
        return SaturationParams(**self.model_dump())


class FDSection(_Strict):
    bins: int = Field(40, ge=1)
    regime: Literal["all", "free", "congested"] = "all"
    threshold: float = Field(0.2, ge=0, le=1)
    family: Literal["newell", "spline", "both"] = "newell"
    k123: bool = False
    k1_grid: list[float] = Field(default_factory=lambda: [0.0, 0.5, 1.0, 1.5, 2.0])
    k2_grid: list[float] = Field(default_factory=lambda: [0.0, 0.5, 1.0, 1.5, 2.0])
    k3_grid: list[float] = Field(default_factory=lambda: [1.0, 2.5, 5.0, 7.5, 10.0])
    spline_points: int = Field(6, ge=2)
    spline_levels: int = Field(100, ge=2)
    quadrature_points: int = Field(8, ge=1)

    @field_validator("k3_grid")
    @classmethod
    def _k3(cls, v: list[float]) -> list[float]:
        if any(k == 0 for k in v):
            raise ValueError("K3 values must be nonzero")
        return v

    @model_validator(mode="after")
    def _levels(self) -> "FDSection":
        if self.spline_levels < self.spline_points:
            raise ValueError("spline_levels must be >= spline_points")
        return self


class SolverSection(_Strict):
    degree: int = Field(1, ge=1)
    n_cells: int = Field(64, ge=1)
    cfl_beta: float = Field(0.5, gt=0, le=1)
    tvb_M: float = Field(0.0, ge=0)
    slope_limiter: bool = True
    bounds_limiter: bool = True

    def build(self) -> SolverConfig:
        return SolverConfig(
            degree=self.degree,
            n_cells=self.n_cells,
            cfl_beta=self.cfl_beta,
            tvb_M=self.tvb_M,
            enable_slope_limiter=self.slope_limiter,
            enable_bounds_limiter=self.bounds_limiter,
        )


class VelocitySection(_Strict):
    kind: Literal["newell", "constant", "spline"] = "newell"
    v: float | None = 1.8
    c: float | None = 0.1
    speeds: list[float] | None = None
    rho_max: float = Field(1.0, gt=0)

    @model_validator(mode="after")
    def _complete(self) -> "VelocitySection":
        if self.kind == "newell" and (self.v is None or self.c is None or self.v <= 0 or self.c <= 0):
            raise ValueError("newell velocity needs v > 0 and c > 0")
        if self.kind == "spline" and (not self.speeds or len(self.speeds) < 2):
            raise ValueError("spline velocity needs at least 2 speeds")
        return self

    def build(self):
        return velocity_from_dict(self.model_dump(exclude_none=True))


class ModelSection(_Strict):
    flux_variant: Literal["nonlocal", "lwr", "phi"] = "nonlocal"
    kappa: float = 0.0
    velocity: VelocitySection = Field(default_factory=VelocitySection)
    gamma: float = Field(0.05, gt=0)
    saturation: SaturationSection = Field(default_factory=SaturationSection)

    @field_validator("kappa")
    @classmethod
    def _kappa(cls, v: float) -> float:
        return _check_kappa(v)

    def build(self, kernel_shape: str) -> ModelParams:
        kernel = Kernel(kernel_shape, self.gamma) if self.flux_variant == "nonlocal" else None
        return ModelParams(FluxVariant(self.flux_variant), self.kappa, self.velocity.build(), kernel, self.saturation.build())


class InitialSection(_Strict):
    kind: Literal["constant", "gaussian", "riemann", "sine"] = "gaussian"
    base: float = Field(0.3, ge=0, le=1)
    amplitude: float = 0.4
    center: float = 0.5
    width: float = Field(0.1, gt=0)
    left: float = Field(0.2, ge=0, le=1)
    right: float = Field(0.6, ge=0, le=1)
    x0: float = 0.5
    waves: int = Field(1, ge=1)

    def build(self, domain: tuple[float, float]):
        a, b = domain
        if self.kind == "constant":
            return lambda x: np.full_like(np.asarray(x, dtype=float), self.base)
        if self.kind == "gaussian":
            return lambda x: np.clip(self.base + self.amplitude * np.exp(-(((x - self.center) / self.width) ** 2)), 0, 1)
        if self.kind == "riemann":
            return lambda x: np.where(np.asarray(x) < self.x0, self.left, self.right)
        return lambda x: np.clip(self.base + self.amplitude * np.sin(2 * np.pi * self.waves * (x - a) / (b - a)), 0, 1)


class BoundarySection(_Strict):
    kind: Literal["periodic", "dirichlet"] = "periodic"
    left: float = Field(0.0, ge=0, le=1)
    right: float = Field(0.0, ge=0, le=1)
    left_rate: float = 0.0
    right_rate: float = 0.0

    def build(self) -> BoundaryCondition:
        if self.kind == "periodic":
            return BoundaryCondition.periodic()
        return BoundaryCondition.dirichlet(_Ramp(self.left, self.left_rate), _Ramp(self.right, self.right_rate))


class _Ramp:
    def __init__(self, value: float, rate: float) -> None:
        self.value, self.rate = value, rate

    def __call__(self, t: float) -> float:
        return float(np.clip(self.value + self.rate * t, 0.0, 1.0))


class SimulationSection(_Strict):
    initial: InitialSection = Field(default_factory=InitialSection)
    boundary: BoundarySection = Field(default_factory=BoundarySection)
    domain: tuple[float, float] = (0.0, 1.0)
    t_final: float = Field(0.5, gt=0)
    n_outputs: int = Field(11, ge=2)

    @model_validator(mode="after")
    def _domain(self) -> "SimulationSection":
        if not self.domain[1] > self.domain[0]:
            raise ValueError("domain must satisfy left < right")
        return self


class ScenarioSection(_Strict):
    name: str = "scenario"
    dataset: str = "dataset"
    x_range: tuple[float, float] | None = None
    t_range: tuple[float, float] | None = None


class SynthSection(_Strict):
    noise: float = Field(0.0, ge=0)
    n_times: int = Field(21, ge=2)


class CompareSection(_Strict):
    variants: list[Literal["nonlocal", "lwr", "phi"]] = Field(default_factory=lambda: ["nonlocal", "lwr", "phi"])


class RunConfig(_Strict):
    command: Literal["prepare", "simulate", "calibrate-fd", "calibrate-solution", "compare", "synth"] | None = None
    input: Path | None = None
    out: Path = Path("out")
    seed: int = 0
    threads: int = Field(1, ge=1)
    kernel: Literal["linear", "quadratic", "exp", "exponential"] = "exp"
    gamma_list: list[float] = Field(default_factory=lambda: [0.01])
    kappa_grid: list[float] = Field(default_factory=lambda: list(DEFAULT_KAPPA_GRID))
    v_grid: list[float] = Field(default_factory=lambda: list(DEFAULT_V_GRID))
    c_grid: list[float] = Field(default_factory=lambda: list(DEFAULT_C_GRID))
    data: DataSection = Field(default_factory=DataSection)
    fd: FDSection = Field(default_factory=FDSection)
    solver: SolverSection = Field(default_factory=SolverSection)
    model: ModelSection = Field(default_factory=ModelSection)
    simulation: SimulationSection = Field(default_factory=SimulationSection)
    scenario: ScenarioSection = Field(default_factory=ScenarioSection)
    synth: SynthSection = Field(default_factory=SynthSection)
    compare: CompareSection = Field(default_factory=CompareSection)

    @field_validator("input")
    @classmethod
    def _exists(cls, v: Path | None) -> Path | None:
        if v is not None and not Path(v).exists():
            raise ValueError(f"input file {v} does not exist")
        return v

    @field_validator("kappa_grid")
    @classmethod
    def _kappas(cls, v: list[float]) -> list[float]:
        if not v:
            raise ValueError("kappa grid must be non-empty")
        for k in v:
            _check_kappa(k)
        return v

    @field_validator("gamma_list")
    @classmethod
    def _gammas(cls, v: list[float]) -> list[float]:
        if not v or any(g <= 0 for g in v):
            raise ValueError("gamma list must be non-empty with positive entries")
        return v

    @field_validator("v_grid", "c_grid")
    @classmethod
    def _positive(cls, v: list[float]) -> list[float]:
        if not v or any(x <= 0 for x in v):
            raise ValueError("velocity grids must be non-empty with positive entries")
        return v

    @property
    def kernel_shape(self) -> str:
        return "exponential" if self.kernel in ("exp", "exponential") else self.kernel


class ConfigError(ValueError):
    def __init__(self, problems: list[str]) -> None:
        self.problems = problems
        super().__init__("; ".join(problems))


def _format_validation(err: ValidationError) -> list[str]:
    out = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        msg = e["msg"].removeprefix("Value error, ")
        out.append(f"{loc}: {msg}")
    return out


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(s) for s in text.replace(" ", "").split(",") if s]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _set(d: dict, path: str, value) -> None:
    keys = path.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def parse_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Load a JSON config, apply dotted-key overrides and validate.

    Unknown keys are rejected; problems are reported with their key paths.
    """
    raw: dict[str, Any] = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})"]) from exc
        if not isinstance(raw, dict):
            raise ConfigError([f"{path}: top level must be an object"])
    for key, value in (overrides or {}).items():
        if value is not None:
            _set(raw, key, value)
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from exc


def config_hash(cfg: RunConfig) -> str:
    text = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _require_input(cfg: RunConfig) -> Path:
    if cfg.input is None:
        raise ConfigError(["input: required for this command"])
    return Path(cfg.input)


def load_dataset(cfg: RunConfig) -> NormalizedDataset:
    """Raw ``t,x,speed,flow`` tables are normalized; normalized CSVs are read back."""
    path = _require_input(cfg)
    with open(path, encoding="utf-8") as fh:
        header = [h.strip() for h in fh.readline().split(",")]
    if "rho" in header:
        ds = load_normalized(path)
        if ds.drho is None or cfg.data.box_filter:
            ds = with_derivative(ds, cfg.data.box_filter, cfg.data.box_radius)
        return ds
    table = ingest_csv(path, cfg.data.units)
    ds = normalize(table, cfg.data.speed_floor, cfg.data.time_scale)
    return with_derivative(ds, cfg.data.box_filter, cfg.data.box_radius)


def _bins(cfg: RunConfig, ds: NormalizedDataset) -> BinSummary:
    return bin_summaries(ds.rho, ds.q, cfg.fd.bins, regime=cfg.fd.regime, threshold=cfg.fd.threshold)


def cmd_prepare(cfg: RunConfig) -> list[Path]:
    ds = load_dataset(cfg)
    out = cfg.out
    ds.to_csv(out / "normalized.csv")
    _bins(cfg, ds).to_csv(out / "bins.csv")
    return [out / "normalized.csv", out / "normalized.json", out / "bins.csv"]


def cmd_simulate(cfg: RunConfig) -> list[Path]:
    sim = cfg.simulation
    params = cfg.model.build(cfg.kernel_shape)
    times = np.linspace(0.0, sim.t_final, sim.n_outputs)
    res = simulate(sim.initial.build(sim.domain), params, sim.boundary.build(), cfg.solver.build(),
                   0.0, sim.t_final, output_times=times, domain=sim.domain)
    res.to_csv(cfg.out / "solution.csv")
    res.to_json(cfg.out / "solution.json")
    return [cfg.out / "solution.csv", cfg.out / "solution.json"]


def cmd_calibrate_fd(cfg: RunConfig) -> list[Path]:
    ds = load_dataset(cfg)
    fd = cfg.fd
    base_sat = cfg.model.saturation.build()
    sats = saturation_grid(fd.k1_grid, fd.k2_grid, fd.k3_grid, base_sat) if fd.k123 else [base_sat]
    families = ["newell", "spline"] if fd.family == "both" else [fd.family]
    results: list[FDResult] = []
    written = []
    for gamma in cfg.gamma_list:
        problem = FDProblem(ds, Kernel(cfg.kernel_shape, gamma), fd.bins, regime=fd.regime,
                            threshold=fd.threshold, n_points=fd.quadrature_points)
        for fam in families:
            if fam == "newell":
                res = calibrate_newell(problem, cfg.v_grid, cfg.c_grid, cfg.kappa_grid, sats, workers=cfg.threads)
            else:
                res = calibrate_spline(problem, cfg.kappa_grid, fd.spline_points, fd.spline_levels, base_sat)
            results.append(res)
            scatter = cfg.out / f"fd_scatter_{fam}_gamma{gamma:g}.csv"
            write_scatter_csv(ds, res.params, scatter, fd.quadrature_points)
            written.append(scatter)
            log.info("gamma=%g %s: kappa=%g coverage=%.1f%% accuracy=%.1f%%", gamma, fam,
                     res.params.kappa, res.metrics.coverage, res.metrics.accuracy)
    write_fd_table(results, cfg.out / "fd_table.csv")
    report = [r.to_dict() | {"gamma": r.params.kernel.gamma} for r in results]
    (cfg.out / "fd_report.json").write_text(json.dumps(report, indent=2, default=float), encoding="utf-8")
    return [cfg.out / "fd_table.csv", cfg.out / "fd_report.json"] + written


def _scenario(cfg: RunConfig, ds: NormalizedDataset):
    sc = cfg.scenario
    xr = sc.x_range or (float(ds.positions[0]), float(ds.positions[-1]))
    tr = sc.t_range or (float(ds.times[0]), float(ds.times[-1]))
    return extract_scenario(ds, xr, tr, name=sc.name, dataset_name=sc.dataset)


def _calibrate(cfg: RunConfig, scenario, variants: list[str]):
    outcomes = []
    sat = cfg.model.saturation.build()
    for variant in variants:
        outcomes += calibrate_solution(
            scenario,
            variant,
            cfg.solver.build(),
            v_grid=cfg.v_grid,
            c_grid=cfg.c_grid,
            kappa_grid=cfg.kappa_grid,
            kernel_shape=cfg.kernel_shape,
            gamma_list=cfg.gamma_list,
            saturation=sat,
            workers=cfg.threads,
        )
    return compare_models(scenario, outcomes)


def cmd_calibrate_solution(cfg: RunConfig) -> list[Path]:
    scenario = _scenario(cfg, load_dataset(cfg))
    report = _calibrate(cfg, scenario, [cfg.model.flux_variant])
    write_solution_table(report.rows(), cfg.out / "solution_table.csv")
    report.to_json(cfg.out / "calibration.json")
    return [cfg.out / "solution_table.csv", cfg.out / "calibration.json"]


def cmd_compare(cfg: RunConfig) -> list[Path]:
    scenario = _scenario(cfg, load_dataset(cfg))
    report = _calibrate(cfg, scenario, list(cfg.compare.variants))
    report.write_table(cfg.out / "solution_table.csv")
    report.to_json(cfg.out / "compare.json")
    report.write_final_profiles(cfg.out / "final_profiles.csv")
    snaps = report.write_snapshots(cfg.out / "snapshots")
    return [cfg.out / "solution_table.csv", cfg.out / "compare.json", cfg.out / "final_profiles.csv"] + snaps


def cmd_synth(cfg: RunConfig) -> list[Path]:
    sim = cfg.simulation
    if sim.boundary.kind != "dirichlet":
        raise ConfigError(["simulation.boundary.kind: synth needs dirichlet boundaries"])
    params = cfg.model.build(cfg.kernel_shape)
    bnd = sim.boundary
    scenario = synthesize_scenario(
        params,
        cfg.solver.build(),
        sim.initial.build(sim.domain),
        _Ramp(bnd.left, bnd.left_rate),
        _Ramp(bnd.right, bnd.right_rate),
        sim.t_final,
        n_times=cfg.synth.n_times,
        domain=sim.domain,
        noise=cfg.synth.noise,
        seed=cfg.seed,
    )
    rho = scenario.truth
    u = np.asarray(params.velocity(rho), dtype=float)
    ds = NormalizedDataset(scenario.times, scenario.positions, rho, u, rho * u,
                           drho=finite_diff_derivative(rho, scenario.positions),
                           boundary_left=scenario.left_trace, boundary_right=scenario.right_trace)
    ds.to_csv(cfg.out / "synthetic.csv")
    (cfg.out / "generator.json").write_text(json.dumps(
        {"params": params.to_dict(), "noise": cfg.synth.noise, "seed": cfg.seed}, indent=2), encoding="utf-8")
    return [cfg.out / "synthetic.csv", cfg.out / "synthetic.json", cfg.out / "generator.json"]


HANDLERS = {
    "prepare": cmd_prepare,
    "simulate": cmd_simulate,
    "calibrate-fd": cmd_calibrate_fd,
    "calibrate-solution": cmd_calibrate_solution,
    "compare": cmd_compare,
    "synth": cmd_synth,
}


def _versions() -> dict[str, str]:
    import pydantic
    import scipy

    return {
        "package": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pydantic": pydantic.__version__,
    }


def write_manifest(cfg: RunConfig, command: str, artifacts: list[Path]) -> Path:
    path = cfg.out / "manifest.json"
    data = {
        "command": command,
        "config": cfg.model_dump(mode="json"),
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "versions": _versions(),
        "artifacts": [str(p) for p in artifacts],
    }
    path.write_text(json.dumps(data, indent=2), encoding="utf-8")
    return path


def run_command(cfg: RunConfig, command: str | None = None) -> int:
    """Run one subcommand; 0 iff every artifact it promised exists afterwards."""
    command = command or cfg.command
    if command not in HANDLERS:
        raise ConfigError([f"command: unknown command {command!r}; expected one of {', '.join(COMMANDS)}"])
    np.random.seed(cfg.seed)
    cfg.out.mkdir(parents=True, exist_ok=True)
    artifacts = HANDLERS[command](cfg)
    artifacts.append(write_manifest(cfg, command, artifacts))
    missing = [str(p) for p in artifacts if not Path(p).exists()]
    if missing:
        _error("MissingArtifacts", "expected outputs were not written", missing)
        return 1
    return 0


# ---------------------------------------------------------------------------
# argparse front end
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nonlocal-traffic", description="Nonlocal traffic model simulation and calibration.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="JSON config file")
        s.add_argument("--input", type=Path, help="input CSV (raw t,x,speed,flow or normalized)")
        s.add_argument("--out", type=Path, help="output directory")
        s.add_argument("--gamma-list", type=_parse_floats, help="comma-separated look-ahead lengths")
        s.add_argument("--kernel", choices=["linear", "quadratic", "exp"])
        s.add_argument("--kappa-grid", type=_parse_floats, help="comma-separated kappa values")
        s.add_argument("--bins", type=int, help="number of density bins")
        s.add_argument("--regime", choices=["free", "congested", "all"])
        s.add_argument("--box-filter", action="store_true", default=None, help="smooth density with a radius-1 box filter")
        s.add_argument("--k123", action="store_true", default=None, help="also search the saturation parameters K1, K2, K3")
        s.add_argument("--threads", type=int, help="worker processes for parameter sweeps")
        s.add_argument("--seed", type=int)
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def _error(kind: str, message: str, details: list[str] | None = None) -> None:
    print(json.dumps({"error": kind, "message": message, "details": details or []}), file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    overrides = {
        "command": args.command,
        "input": str(args.input) if args.input else None,
        "out": str(args.out) if args.out else None,
        "gamma_list": args.gamma_list,
        "kernel": args.kernel,
        "kappa_grid": args.kappa_grid,
        "fd.bins": args.bins,
        "fd.regime": args.regime,
        "data.box_filter": args.box_filter,
        "fd.k123": args.k123,
        "threads": args.threads,
        "seed": args.seed,
    }
    try:
        cfg = parse_config(args.config, overrides)
        return run_command(cfg, args.command)
    except ConfigError as exc:
        _error("ConfigError", "invalid configuration", exc.problems)
        return 2
    except DataFormatError as exc:
        _error("DataFormatError", "malformed input data",
               [f"line {ln}: {m}" if ln is not None else m for ln, m in exc.problems])
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        _error(type(exc).__name__, str(exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())
