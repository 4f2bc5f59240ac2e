"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest -s tests/test_acceptance.py`` to see the report lines.
"""

import json
import logging
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.integrate import quad

from nonlocal_traffic.cli import main
from nonlocal_traffic.fd_calibration import Bands, FDParams, FDProblem, band_objective, calibrate_newell, fd_metrics
from nonlocal_traffic.fd_calibration import synthetic_fd_dataset
from nonlocal_traffic.grid_basis import PolyField, build_grid, l2_error
from nonlocal_traffic.ldg_solver import BoundaryCondition, LDGSolver, SolverConfig, simulate
from nonlocal_traffic.model import (
    ConstantVelocity,
    Kernel,
    ModelParams,
    NewellVelocity,
    SplineVelocity,
    perceived_density,
)
from nonlocal_traffic.solution_calibration import calibrate_solution, synthesize_scenario

log = logging.getLogger("acceptance")
GOLDEN = Path(__file__).parent / "golden"


def _report(n: int, ok: bool, detail: str, elapsed: float) -> None:
    print(f"\ncriterion {n:2d} {'PASS' if ok else 'FAIL'}: {detail} [{elapsed:.2f} s]", flush=True)


def test_01_perceived_density_bounds():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    n = 100_000
    rho = rng.uniform(0.0, 1.0, n)
    rho[:4] = [0.0, 1.0, 0.0, 1.0]
    drho = rng.standard_normal(n) * 10.0 ** rng.uniform(-3, 4, n)
    kappa = rng.uniform(0.0, 1.0, n)
    kappa[:2] = 1.0
    r = perceived_density(rho, drho, kappa)
    bad = int(np.sum((r < 0) | (r > 1)))
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and elapsed < 1.0
    _report(1, ok, f"{bad} of {n} samples outside [0, 1]", elapsed)
    assert bad == 0
    assert elapsed < 1.0


def test_02_kernel_suite():
    t0 = time.perf_counter()
    worst_mass, monotone, deviations = 0.0, True, {}
    for shape in ("linear", "quadratic", "exponential"):
        for gamma in (0.004, 0.04, 0.3):
            k = Kernel(shape, gamma)
            pts = k.breakpoints()
            pts = pts[(pts > 0) & (pts < gamma)]
            mass = quad(k, 0.0, gamma, points=pts if pts.size else None, limit=200, epsabs=1e-13, epsrel=1e-12)[0]
            worst_mass = max(worst_mass, abs(mass - 1.0))
            monotone &= bool(np.all(np.diff(k(np.linspace(0.0, gamma, 1000))) <= 0.0))
            if shape == "exponential":
                deviations[gamma] = k.ei_form_deviation()
                log.info("exponential kernel gamma=%g: deviation from the Ei closed form %.6g", gamma, deviations[gamma])
    elapsed = time.perf_counter() - t0
    nonzero = all(d > 0 for d in deviations.values())
    ok = worst_mass <= 1e-8 and monotone and nonzero and elapsed < 1.0
    dev = ", ".join(f"{g:g}: {d:.3g}" for g, d in deviations.items())
    _report(2, ok, f"max |mass - 1| = {worst_mass:.2e}, monotone={monotone}, Ei closed-form deviation {{{dev}}}", elapsed)
    assert worst_mass <= 1e-8
    assert monotone
    assert nonzero
    assert elapsed < 1.0


def test_03_mass_conservation():
    t0 = time.perf_counter()
    cfg = SolverConfig(degree=2, n_cells=128)
    params = ModelParams("nonlocal", 0.6, NewellVelocity(1.8, 0.1), Kernel("exponential", 0.1))
    grid = build_grid(0.0, 1.0, 128, 2)
    init = PolyField.interpolate(grid, lambda x: 0.4 + 0.3 * np.exp(-(((x - 0.5) / 0.1) ** 2)))
    solver = LDGSolver(grid, params, BoundaryCondition.periodic(), cfg)
    rho, t = init.coeffs.copy(), 0.0
    for _ in range(1000):
        dt, alpha = solver.stable_dt(rho, t)
        rho = solver.rk3_step(rho, t, dt, alpha)
        t += dt
    m0 = init.integral()
    drift = abs(PolyField(grid, rho).integral() - m0) / m0
    elapsed = time.perf_counter() - t0
    _report(3, drift <= 1e-8 and elapsed < 30, f"relative mass drift {drift:.2e} after 1000 steps (t={t:.3f})", elapsed)
    assert drift <= 1e-8
    assert elapsed < 30


def test_04_convergence_order():
    t0 = time.perf_counter()
    ic = lambda x: 0.5 + 0.25 * np.sin(2 * np.pi * x)
    params = ModelParams("lwr", 0.0, ConstantVelocity(1.0))
    orders = {}
    for p in (1, 2):
        errs = []
        for n in (32, 64, 128, 256):
            cfg = SolverConfig(degree=p, n_cells=n, tvb_M=50.0)
            res = simulate(ic, params, BoundaryCondition.periodic(), cfg, 0.0, 0.5)
            errs.append(l2_error(res.final, lambda x: ic(x - 0.5)))
        errs = np.array(errs)
        orders[p] = np.log2(errs[:-1] / errs[1:])
    elapsed = time.perf_counter() - t0
    ok = all(np.all(orders[p] >= p + 0.5) for p in (1, 2)) and elapsed < 120
    detail = "; ".join(f"p={p} orders {np.round(o, 2).tolist()}" for p, o in orders.items())
    _report(4, ok, detail, elapsed)
    for p in (1, 2):
        assert np.all(orders[p] >= p + 0.5)
    assert elapsed < 120


def test_05_shock_position():
    t0 = time.perf_counter()
    # decreasing spline speed, concave flux: a left state below the right state makes a shock
    vel = SplineVelocity(1.0 - np.linspace(0.0, 1.0, 6))
    rl, rr, x0, n = 0.2, 0.6, 0.25, 256
    q = lambda r: r * vel(r)
    speed = (q(rr) - q(rl)) / (rr - rl)
    res = simulate(lambda x: np.where(x < x0, rl, rr), ModelParams("lwr", 0.0, vel),
                   BoundaryCondition.dirichlet(rl, rr), SolverConfig(degree=1, n_cells=n), 0.0, 0.5)
    xs = np.linspace(0.0, 1.0, 20001)
    found = xs[np.argmax(res.final(xs) > 0.5 * (rl + rr))]
    expected = x0 + 0.5 * speed
    err = abs(found - expected) * n
    elapsed = time.perf_counter() - t0
    _report(5, err <= 2 and elapsed < 60, f"shock at {found:.5f}, Rankine-Hugoniot {expected:.5f}, {err:.2f} dx apart", elapsed)
    assert err <= 2
    assert elapsed < 60


def test_06_local_limit():
    t0 = time.perf_counter()
    n = 128
    dx = 1.0 / n
    cfg = SolverConfig(degree=1, n_cells=n)
    ic = lambda x: 0.3 + 0.4 * np.exp(-(((x - 0.5) / 0.1) ** 2))
    vel = NewellVelocity(1.8, 0.5)
    a = simulate(ic, ModelParams("nonlocal", 0.0, vel, Kernel("linear", dx / 4)), BoundaryCondition.periodic(), cfg, 0, 0.5)
    b = simulate(ic, ModelParams("lwr", 0.0, vel), BoundaryCondition.periodic(), cfg, 0, 0.5)
    xs = np.linspace(0.0, 1.0, 4001)
    dist = float(np.trapezoid(np.abs(a.final(xs) - b.final(xs)), xs))
    elapsed = time.perf_counter() - t0
    _report(6, dist <= 10 * dx and elapsed < 60, f"L1 distance {dist:.3e} (bound {10 * dx:.3e})", elapsed)
    assert dist <= 10 * dx
    assert elapsed < 60


def test_07_fd_recovery():
    t0 = time.perf_counter()
    kern = Kernel("exponential", 0.04)
    gen = FDParams(NewellVelocity(1.8, 0.1), 0.3, kern)
    problem = FDProblem(synthetic_fd_dataset(gen), kern)
    grid = np.round(np.arange(1, 21) * 0.1, 10)
    res = calibrate_newell(problem, grid, grid)
    found = (res.params.velocity.v, res.params.velocity.c, res.params.kappa)
    m = res.metrics
    elapsed = time.perf_counter() - t0
    ok = found == (1.8, 0.1, 0.3) and m.accuracy >= 99 and m.coverage >= 99 and elapsed < 120
    _report(7, ok, f"recovered (v, c, kappa) = {found}, accuracy {m.accuracy:.2f}%, coverage {m.coverage:.2f}%"
            f" over {res.evaluations} grid points", elapsed)
    assert found == (1.8, 0.1, 0.3)
    assert m.accuracy >= 99 and m.coverage >= 99
    assert elapsed < 120


def test_08_solution_recovery():
    t0 = time.perf_counter()
    cfg = SolverConfig(degree=1, n_cells=64)
    gen = ModelParams("nonlocal", 0.3, NewellVelocity(1.8, 0.1), Kernel("exponential", 0.05))
    ic = lambda x: 0.03 + 0.6 * np.exp(-(((x - 0.3) / 0.08) ** 2))
    sc = synthesize_scenario(gen, cfg, ic, lambda t: 0.03, lambda t: 0.03, 0.4, n_times=21, noise=0.01, seed=0)
    vg, cg, kg = [1.4, 1.6, 1.8, 2.0], [0.05, 0.1, 0.2], [0.0, 0.3, 0.6]
    non = calibrate_solution(sc, "nonlocal", cfg, vg, cg, kg, "exponential", [0.05])[0]
    lwr = calibrate_solution(sc, "lwr", cfg, vg, cg, kg)[0]
    found = (non.params.velocity.v, non.params.velocity.c, non.params.kappa)
    elapsed = time.perf_counter() - t0
    ok = found == (1.8, 0.1, 0.3) and non.msr <= lwr.msr and elapsed < 600
    _report(8, ok, f"recovered (v, c, kappa) = {found}; MSR nonlocal {non.msr:.3e} vs LWR {lwr.msr:.3e}", elapsed)
    assert found == (1.8, 0.1, 0.3)
    assert non.msr <= lwr.msr
    assert elapsed < 600


def test_09_metric_identities():
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    m = 40
    count = rng.integers(0, 4, m)
    lo = np.round(rng.uniform(0, 1, m) * 1024) / 1024
    hi = lo + np.round(rng.uniform(0, 1, m) * 1024 + 1) / 1024
    edges = np.linspace(0, 1, m + 1)
    emp = Bands(hi, lo, count, edges)
    met = fd_metrics(emp, emp)
    delta = 0.125
    shifted = Bands(hi + delta, lo + delta, count, edges)
    obj = band_objective(emp, shifted)
    expected = 2 * int(np.sum(count > 0)) * delta
    elapsed = time.perf_counter() - t0
    ok = met.accuracy == 100 and met.coverage == 100 and obj == expected and elapsed < 1
    _report(9, ok, f"identical: accuracy {met.accuracy}, coverage {met.coverage}; shift objective {obj} vs {expected}", elapsed)
    assert met.accuracy == 100.0 and met.coverage == 100.0
    assert obj == expected
    assert elapsed < 1


def _first_line(path: Path) -> str:
    return path.read_text(encoding="utf-8").splitlines()[0]


def test_10_report_headers(tmp_path):
    t0 = time.perf_counter()
    synth = {
        "model": {"kappa": 0.3, "gamma": 0.1, "velocity": {"kind": "newell", "v": 1.6, "c": 0.2}},
        "solver": {"n_cells": 16},
        "simulation": {"initial": {"kind": "gaussian", "base": 0.05, "amplitude": 0.5, "center": 0.4, "width": 0.12},
                       "boundary": {"kind": "dirichlet", "left": 0.05, "right": 0.05}, "t_final": 0.3},
        "synth": {"n_times": 7},
    }
    grids = {"v_grid": [1.6], "c_grid": [0.2], "solver": {"n_cells": 16}, "fd": {"bins": 20}}
    (tmp_path / "synth.json").write_text(json.dumps(synth))
    (tmp_path / "grid.json").write_text(json.dumps(grids))
    data = tmp_path / "data"
    codes = [
        main(["synth", "--config", str(tmp_path / "synth.json"), "--out", str(data)]),
        main(["calibrate-fd", "--config", str(tmp_path / "grid.json"), "--input", str(data / "synthetic.csv"),
              "--out", str(tmp_path / "fd"), "--gamma-list", "0.1", "--kappa-grid", "0.3"]),
        main(["compare", "--config", str(tmp_path / "grid.json"), "--input", str(data / "synthetic.csv"),
              "--out", str(tmp_path / "cmp"), "--gamma-list", "0.1", "--kappa-grid", "0.3"]),
    ]
    fd_ok = _first_line(tmp_path / "fd" / "fd_table.csv") == _first_line(GOLDEN / "fd_table_header.csv")
    t4_ok = _first_line(tmp_path / "cmp" / "solution_table.csv") == _first_line(GOLDEN / "solution_table_header.csv")
    elapsed = time.perf_counter() - t0
    ok = codes == [0, 0, 0] and fd_ok and t4_ok
    _report(10, ok, f"exit codes {codes}; FD table header match {fd_ok}; solution table header match {t4_ok}", elapsed)
    assert codes == [0, 0, 0]
    assert fd_ok and t4_ok
