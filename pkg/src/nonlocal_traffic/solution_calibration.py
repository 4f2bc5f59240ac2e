"""Calibration against measured density fields by repeated simulation.

A scenario is a space-time window of the normalized data. Each candidate
parameter set is simulated from the window's initial profile with the
measured boundary densities as ghost values, and scored by the L2 distance
to the measured field (trapezoid rule on the data grid). The grid search is
exhaustive and its result independent of evaluation order.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .data_pipeline import NormalizedDataset
from .grid_basis import PolyField, build_grid
from .ldg_solver import BoundaryCondition, SimulationDiverged, SolverConfig, simulate
from .model import FluxVariant, Kernel, ModelParams, NewellVelocity, SaturationParams

log = logging.getLogger(__name__)

SOLUTION_TABLE_HEADER = ("Dataset", "Scenario", "Kernel", "Model", "gamma", "kappa", "MSR", "v_max", "c")
_VARIANT_LABEL = {FluxVariant.NONLOCAL: "Nonlocal", FluxVariant.LWR: "LWR", FluxVariant.PHI: "Phi"}
_KERNEL_LABEL = {"linear": "linear", "quadratic": "quadratic", "exponential": "exp"}


def _default_grid(lo: float, hi: float, step: float) -> tuple[float, ...]:
    n = int(round((hi - lo) / step))
    return tuple(round(lo + i * step, 10) for i in range(n + 1))


DEFAULT_V_GRID = _default_grid(0.1, 2.0, 0.1)
DEFAULT_C_GRID = _default_grid(0.1, 2.0, 0.1)
DEFAULT_KAPPA_GRID = _default_grid(0.0, 1.0, 0.1)


@dataclass
class Scenario:
    """Space-time window of measured density with its initial and boundary data.

    The boundary traces default to the window's edge columns.
    """

    positions: np.ndarray
    times: np.ndarray
    truth: np.ndarray
    name: str = "scenario"
    dataset: str = "dataset"
    left_trace: np.ndarray | None = None
    right_trace: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=float)
        self.times = np.asarray(self.times, dtype=float)
        self.truth = np.asarray(self.truth, dtype=float)
        if self.left_trace is None:
            self.left_trace = self.truth[:, 0].copy()
        if self.right_trace is None:
            self.right_trace = self.truth[:, -1].copy()
        self.left_trace = np.asarray(self.left_trace, dtype=float)
        self.right_trace = np.asarray(self.right_trace, dtype=float)
        if self.left_trace.shape != self.times.shape or self.right_trace.shape != self.times.shape:
            raise ValueError("boundary traces must have one value per time")
        if len(self.positions) < 2 or len(self.times) < 2:
            raise ValueError("scenario needs at least 2 positions and 2 times")
        if np.any(np.diff(self.positions) <= 0) or np.any(np.diff(self.times) <= 0):
            raise ValueError("scenario grid must be strictly increasing")
        if self.truth.shape != (len(self.times), len(self.positions)):
            raise ValueError("truth field does not match the scenario grid")
        if np.any(self.truth < 0) or np.any(self.truth > 1):
            raise ValueError("truth densities must lie in [0, 1]")

    @property
    def x_window(self) -> tuple[float, float]:
        return float(self.positions[0]), float(self.positions[-1])

    @property
    def t_window(self) -> tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])

    @property
    def area(self) -> float:
        return (self.positions[-1] - self.positions[0]) * (self.times[-1] - self.times[0])

    def initial_profile(self, x: np.ndarray) -> np.ndarray:
        return np.interp(x, self.positions, self.truth[0])

    def boundary(self) -> BoundaryCondition:
        """Ghost densities interpolated linearly in time from the boundary traces."""
        return BoundaryCondition.from_series(self.times, self.left_trace, self.right_trace)


def extract_scenario(
    dataset: NormalizedDataset,
    x_range: tuple[float, float],
    t_range: tuple[float, float],
    name: str = "scenario",
    dataset_name: str = "dataset",
) -> Scenario:
    """Slice the data grid to ``x_range x t_range`` (inclusive, small tolerance).

    Boundary traces are the window's edge columns unless the window reaches
    the edge of the data and the dataset records ghost densities there.
    """
    x, t = dataset.positions, dataset.times
    tx = 1e-9 * max(1.0, float(np.ptp(x)))
    tt = 1e-9 * max(1.0, float(np.ptp(t)))
    xs = np.nonzero((x >= x_range[0] - tx) & (x <= x_range[1] + tx))[0]
    ts = np.nonzero((t >= t_range[0] - tt) & (t <= t_range[1] + tt))[0]
    if xs.size < 2 or ts.size < 2:
        raise ValueError(f"window x={x_range}, t={t_range} holds {xs.size} positions and {ts.size} times; need >= 2 each")
    truth = np.clip(dataset.rho[np.ix_(ts, xs)], 0.0, 1.0)
    # recorded ghost densities apply only when the window touches the data edge
    left = dataset.boundary_left[ts] if dataset.boundary_left is not None and xs[0] == 0 else None
    right = dataset.boundary_right[ts] if dataset.boundary_right is not None and xs[-1] == x.size - 1 else None
    return Scenario(x[xs], t[ts], truth, name=name, dataset=dataset_name, left_trace=left, right_trace=right)


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------


def _trapezoid_2d(values: np.ndarray, t: np.ndarray, x: np.ndarray) -> float:
    return float(np.trapezoid(np.trapezoid(values, x, axis=1), t))


def run_scenario(scenario: Scenario, params: ModelParams, config: SolverConfig) -> np.ndarray:
    """Simulate the window and return the solution on the data grid (shape of ``truth``)."""
    grid = build_grid(scenario.positions[0], scenario.positions[-1], config.n_cells, config.degree)
    init = PolyField.interpolate(grid, scenario.initial_profile)
    t0, tf = scenario.t_window
    res = simulate(init, params, scenario.boundary(), config, t0, tf, output_times=scenario.times)
    return res.sample(scenario.positions)


def l2_distance(scenario: Scenario, solution: np.ndarray) -> float:
    """``sqrt`` of the trapezoid-rule space-time integral of the squared difference."""
    return math.sqrt(max(_trapezoid_2d((scenario.truth - solution) ** 2, scenario.times, scenario.positions), 0.0))


def l2_objective(scenario: Scenario, params: ModelParams, config: SolverConfig) -> float:
    """L2 misfit of one simulation; ``inf`` when the solver diverges."""
    try:
        sol = run_scenario(scenario, params, config)
    except (SimulationDiverged, FloatingPointError) as exc:
        log.warning("simulation diverged for %s: %s", params.to_dict(), exc)
        return math.inf
    if not np.all(np.isfinite(sol)):
        return math.inf
    return l2_distance(scenario, sol)


def msr(scenario: Scenario, solution: np.ndarray) -> float:
    """Mean squared residual over all data points of the window."""
    solution = np.asarray(solution, dtype=float)
    if solution.shape != scenario.truth.shape:
        raise ValueError("solution does not match the scenario grid")
    return float(np.mean((scenario.truth - solution) ** 2))


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Candidate:
    variant: FluxVariant
    v: float
    c: float
    kappa: float
    gamma: float | None
    kernel_shape: str | None

    def params(self, saturation: SaturationParams) -> ModelParams:
        kernel = Kernel(self.kernel_shape, self.gamma) if self.variant is FluxVariant.NONLOCAL else None
        return ModelParams(self.variant, self.kappa, NewellVelocity(self.v, self.c), kernel, saturation)

    def sort_key(self) -> tuple:
        return (self.kappa, self.c, self.v)


@dataclass
class CalibrationOutcome:
    """Best grid point for one model variant (and one look-ahead length for the nonlocal model)."""

    variant: FluxVariant
    params: ModelParams
    objective: float
    msr: float
    solution: np.ndarray
    evaluations: int
    diverged: int
    gamma: float | None = None
    scores: list[tuple[Candidate, float]] = field(default_factory=list, repr=False)

    def table_row(self, scenario: Scenario) -> dict:
        vel = self.params.velocity
        shape = self.params.kernel.shape if self.params.kernel is not None else None
        return {
            "Dataset": scenario.dataset,
            "Scenario": scenario.name,
            "Kernel": _KERNEL_LABEL.get(shape, "") if shape else "",
            "Model": _VARIANT_LABEL[self.variant],
            "gamma": self.gamma if self.variant is FluxVariant.NONLOCAL else None,
            "kappa": self.params.kappa,
            "MSR": self.msr,
            "v_max": vel.v,
            "c": vel.c,
        }


def _evaluate(args) -> float:
    scenario, cand, saturation, config = args
    try:
        params = cand.params(saturation)
    except ValueError:
        return math.inf
    return l2_objective(scenario, params, config)


def candidate_grid(
    variant: FluxVariant | str,
    v_grid: Sequence[float],
    c_grid: Sequence[float],
    kappa_grid: Sequence[float],
    gamma: float | None = None,
    kernel_shape: str | None = None,
) -> list[Candidate]:
    variant = FluxVariant(variant)
    if variant is FluxVariant.LWR:
        kappas, gamma, kernel_shape = [0.0], None, None
    else:
        kappas = sorted({float(k) for k in kappa_grid})
    if variant is FluxVariant.PHI:
        gamma, kernel_shape = None, None
    if variant is FluxVariant.NONLOCAL and (gamma is None or kernel_shape is None):
        raise ValueError("nonlocal calibration needs a kernel shape and gamma")
    return [
        Candidate(variant, float(v), float(c), k, gamma, kernel_shape)
        for k, c, v in itertools.product(kappas, sorted({float(c) for c in c_grid}), sorted({float(v) for v in v_grid}))
    ]


def _search(
    scenario: Scenario,
    cands: list[Candidate],
    config: SolverConfig,
    saturation: SaturationParams,
    workers: int,
) -> list[tuple[Candidate, float]]:
    jobs = [(scenario, c, saturation, config) for c in cands]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            scores = list(ex.map(_evaluate, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        scores = [_evaluate(j) for j in jobs]
    return list(zip(cands, scores))


def calibrate_solution(
    scenario: Scenario,
    variant: FluxVariant | str,
    config: SolverConfig,
    v_grid: Sequence[float] = DEFAULT_V_GRID,
    c_grid: Sequence[float] = DEFAULT_C_GRID,
    kappa_grid: Sequence[float] = DEFAULT_KAPPA_GRID,
    kernel_shape: str = "exponential",
    gamma_list: Sequence[float] = (0.01,),
    saturation: SaturationParams = SaturationParams(),
    workers: int = 1,
) -> list[CalibrationOutcome]:
    """Exhaustive search of the L2 misfit; one outcome per gamma for the nonlocal model.

    The local LWR model ignores the kernel and kappa; the Phi model ignores the
    kernel. Ties are broken by the smallest kappa, then c, then v.
    """
    variant = FluxVariant(variant)
    if not len(v_grid) or not len(c_grid) or not len(kappa_grid):
        raise ValueError("search grids must be non-empty")
    gammas: list[float | None] = [float(g) for g in gamma_list] if variant is FluxVariant.NONLOCAL else [None]
    if not gammas:
        raise ValueError("gamma list must be non-empty")
    outcomes = []
    for g in gammas:
        cands = candidate_grid(variant, v_grid, c_grid, kappa_grid, g, kernel_shape if g is not None else None)
        scored = _search(scenario, cands, config, saturation, workers)
        finite = [(c, s) for c, s in scored if math.isfinite(s)]
        if not finite:
            raise RuntimeError(f"every {variant.value} simulation diverged (gamma={g})")
        best, obj = min(finite, key=lambda cs: (cs[1],) + cs[0].sort_key())
        params = best.params(saturation)
        sol = run_scenario(scenario, params, config)
        outcomes.append(
            CalibrationOutcome(
                variant=variant,
                params=params,
                objective=obj,
                msr=msr(scenario, sol),
                solution=sol,
                evaluations=len(scored),
                diverged=len(scored) - len(finite),
                gamma=g,
                scores=scored,
            )
        )
    return outcomes


# ---------------------------------------------------------------------------
# Comparison reports
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6g}"
    return str(v)


@dataclass
class ComparisonReport:
    scenario: Scenario
    outcomes: list[CalibrationOutcome]

    def rows(self) -> list[dict]:
        return [o.table_row(self.scenario) for o in self.outcomes]

    def labels(self) -> list[str]:
        out = []
        for o in self.outcomes:
            lab = _VARIANT_LABEL[o.variant]
            if o.variant is FluxVariant.NONLOCAL:
                lab += f"_gamma{o.gamma:g}"
            out.append(lab)
        return out

    def write_table(self, path: str | Path) -> None:
        write_solution_table(self.rows(), path)

    def write_final_profiles(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "truth"] + self.labels())
            for j, x in enumerate(self.scenario.positions):
                w.writerow([repr(float(x)), repr(float(self.scenario.truth[-1, j]))]
                           + [repr(float(o.solution[-1, j])) for o in self.outcomes])

    def write_snapshots(self, directory: str | Path) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for i, t in enumerate(self.scenario.times):
            p = directory / f"snapshot_{i:04d}.csv"
            with open(p, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["t", "x", "truth"] + self.labels())
                for j, x in enumerate(self.scenario.positions):
                    w.writerow([repr(float(t)), repr(float(x)), repr(float(self.scenario.truth[i, j]))]
                               + [repr(float(o.solution[i, j])) for o in self.outcomes])
            paths.append(p)
        return paths

    def to_json(self, path: str | Path) -> None:
        data = {
            "scenario": {
                "name": self.scenario.name,
                "dataset": self.scenario.dataset,
                "x_window": self.scenario.x_window,
                "t_window": self.scenario.t_window,
                "shape": list(self.scenario.truth.shape),
            },
            "rows": self.rows(),
            "outcomes": [
                {
                    "model": _VARIANT_LABEL[o.variant],
                    "gamma": o.gamma,
                    "params": o.params.to_dict(),
                    "l2_objective": o.objective,
                    "msr": o.msr,
                    "evaluations": o.evaluations,
                    "diverged": o.diverged,
                }
                for o in self.outcomes
            ],
        }
        Path(path).write_text(json.dumps(data, indent=2), encoding="utf-8")


def compare_models(scenario: Scenario, outcomes: Iterable[CalibrationOutcome]) -> ComparisonReport:
    return ComparisonReport(scenario, list(outcomes))


def write_solution_table(rows: Iterable[dict], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SOLUTION_TABLE_HEADER)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in SOLUTION_TABLE_HEADER])


# ---------------------------------------------------------------------------
# Synthetic ground truth
# ---------------------------------------------------------------------------


def synthesize_scenario(
    params: ModelParams,
    config: SolverConfig,
    initial: Callable[[np.ndarray], np.ndarray],
    left_trace: Callable[[float], float],
    right_trace: Callable[[float], float],
    t_final: float,
    n_times: int = 21,
    domain: tuple[float, float] = (0.0, 1.0),
    noise: float = 0.0,
    seed: int = 0,
    name: str = "synthetic",
) -> Scenario:
    """Ground truth from a known parameter set.

    Data positions are the cell edges, so with ``degree == 1`` the
    piecewise-linear initial profile rebuilt from the data is exactly the one
    that was simulated. The scenario's boundary traces are the prescribed
    ghost densities. ``noise`` is the relative standard deviation of multiplicative Gaussian
    noise (seeded), applied after simulation and clipped to [0, 1].
    """
    grid = build_grid(domain[0], domain[1], config.n_cells, config.degree)
    x = grid.partition
    times = np.linspace(0.0, t_final, n_times)
    left = np.array([left_trace(t) for t in times], dtype=float)
    right = np.array([right_trace(t) for t in times], dtype=float)
    prof = np.asarray(initial(x), dtype=float)
    init = PolyField.interpolate(grid, lambda y: np.interp(y, x, prof))
    bc = BoundaryCondition.from_series(times, left, right)
    res = simulate(init, params, bc, config, 0.0, t_final, output_times=times)
    truth = res.sample(x)
    if noise > 0:
        rng = np.random.default_rng(seed)
        truth = truth * (1.0 + noise * rng.standard_normal(truth.shape))
    return Scenario(x, times, np.clip(truth, 0.0, 1.0), name=name, dataset="synthetic",
                    left_trace=left, right_trace=right)
