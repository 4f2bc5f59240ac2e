"""Local discontinuous Galerkin solver for the nonlocal traffic model.

Per cell the density gradient is recovered from the auxiliary equation
``M sigma = -C rho + S1`` and the density evolves by ``M rho' = K - S2`` where
``K`` is the volume flux term (Gauss-Legendre quadrature, with the look-ahead
average evaluated at every quadrature point) and ``S2`` holds Lax-Friedrichs
interface fluxes. Time stepping is three-stage SSP Runge-Kutta with a slope
limiter and a bound-preserving limiter after every stage.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np

from .grid_basis import (
    PolyField,
    QuadratureRule,
    SpatialGrid,
    build_grid,
    gauss_legendre_rule,
    mean_weights,
)
from .model import (
    FluxVariant,
    ModelParams,
    NonlocalStencil,
    flux_eval,
)


class SimulationDiverged(RuntimeError):
    """Raised when the state becomes non-finite; carries the partial record."""

    def __init__(self, message: str, result: "SimulationResult | None" = None) -> None:
        super().__init__(message)
        self.result = result


# ---------------------------------------------------------------------------
# Configuration and boundary data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SolverConfig:
    degree: int = 1
    n_cells: int = 64
    cfl_beta: float = 0.5
    n_gauss: int | None = None  # default degree + 1
    conv_points: int = 6
    tvb_M: float = 0.0
    enable_slope_limiter: bool = True
    enable_bounds_limiter: bool = True
    max_dt: float | None = None
    max_steps: int = 5_000_000

    def __post_init__(self) -> None:
        if not 0.0 < self.cfl_beta <= 1.0:
            raise ValueError("cfl_beta must lie in (0, 1]")
        if self.degree < 1:
            raise ValueError("degree must be >= 1")
        if self.n_cells < 1:
            raise ValueError("n_cells must be >= 1")
        if self.n_gauss is not None and self.n_gauss < math.ceil((self.degree + 1) / 2):
            raise ValueError("n_gauss must be >= (degree + 1) / 2")
        if self.tvb_M < 0:
            raise ValueError("tvb_M must be nonnegative")

    @property
    def quadrature_order(self) -> int:
        return self.n_gauss if self.n_gauss is not None else self.degree + 1


class _Constant:
    def __init__(self, value: float) -> None:
        self.value = float(value)

    def __call__(self, t: float) -> float:
        return self.value


class _Series:
    """Piecewise-linear interpolant of a sampled time series (held constant outside)."""

    def __init__(self, times, values) -> None:
        self.times = np.asarray(times, dtype=float)
        self.values = np.asarray(values, dtype=float)

    def __call__(self, t: float) -> float:
        return float(np.interp(t, self.times, self.values))


@dataclass(frozen=True)
class BoundaryCondition:
    kind: Literal["periodic", "dirichlet"]
    left: Callable[[float], float] | None = None
    right: Callable[[float], float] | None = None

    @classmethod
    def periodic(cls) -> "BoundaryCondition":
        return cls("periodic")

    @classmethod
    def dirichlet(cls, left, right) -> "BoundaryCondition":
        lf = left if callable(left) else _Constant(left)
        rf = right if callable(right) else _Constant(right)
        return cls("dirichlet", lf, rf)

    @classmethod
    def from_series(cls, times, left_values, right_values) -> "BoundaryCondition":
        return cls("dirichlet", _Series(times, left_values), _Series(times, right_values))

    @property
    def is_periodic(self) -> bool:
        return self.kind == "periodic"

    def ghosts(self, t: float) -> tuple[float, float]:
        if self.is_periodic:
            raise ValueError("periodic boundaries have no ghost values")
        return float(np.clip(self.left(t), 0.0, 1.0)), float(np.clip(self.right(t), 0.0, 1.0))


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CellOperators:
    mass: np.ndarray
    convection: np.ndarray
    mass_inv: np.ndarray


def _reference_matrices(degree: int, rule: QuadratureRule) -> tuple[np.ndarray, np.ndarray]:
    from .grid_basis import reference_element

    el = reference_element(degree)
    b = el.values(rule.points)
    d = el.derivatives(rule.points)
    mass = 0.5 * (b.T * rule.weights) @ b  # per unit cell width
    conv = (d.T * rule.weights) @ b  # C_ij = int phi_i' phi_j dx (Jacobians cancel)
    return mass, conv


def assemble_operators(grid: SpatialGrid, rule: QuadratureRule) -> list[CellOperators]:
    """Mass and convection matrices of every cell."""
    if 2 * rule.order - 1 < 2 * grid.degree:
        raise ValueError(
            f"{rule.order}-point rule integrates degree {2 * rule.order - 1} < {2 * grid.degree} exactly"
        )
    mass_ref, conv = _reference_matrices(grid.degree, rule)
    mass = grid.dx * mass_ref
    ops = CellOperators(mass, conv, np.linalg.inv(mass))
    return [ops] * grid.n_cells


def numerical_flux(rho_left, rho_right, U_at_interface, alpha: float):
    """Lax-Friedrichs interface flow ``((rL + rR) U + alpha (rL - rR)) / 2``."""
    rl = np.clip(rho_left, 0.0, 1.0)
    rr = np.clip(rho_right, 0.0, 1.0)
    return 0.5 * ((rl + rr) * U_at_interface + alpha * (rl - rr))


def cfl_dt(dx: float, max_flux_derivative: float, degree: int, beta: float, max_dt: float | None = None) -> float:
    """``beta dx / ((2p + 1) max|dQ/drho|)``, capped by ``max_dt``."""
    if max_flux_derivative > 1e-14:
        dt = beta * dx / ((2 * degree + 1) * max_flux_derivative)
        return dt if max_dt is None else min(dt, max_dt)
    if max_dt is None:
        raise ValueError("vanishing wave speed and no max_dt cap")
    return max_dt


def _tvb_minmod(a1, a2, a3, threshold):
    same = (np.sign(a1) == np.sign(a2)) & (np.sign(a2) == np.sign(a3))
    mm = np.where(same, np.sign(a1) * np.minimum(np.abs(a1), np.minimum(np.abs(a2), np.abs(a3))), 0.0)
    return np.where(np.abs(a1) <= threshold, a1, mm)


@dataclass
class LimiterStats:
    slope: int = 0
    bounds: int = 0
    mean_clipped: int = 0


class _Limiter:
    def __init__(self, grid: SpatialGrid, qpoints: np.ndarray) -> None:
        el = grid.element
        self.grid = grid
        self.mean_w = mean_weights(grid.degree)
        rule = gauss_legendre_rule(grid.degree + 1)
        # xi-coefficient of the L2 projection onto linears: a1 = 3/2 int rho xi dxi
        self.slope_w = 1.5 * (rule.weights * rule.points) @ el.values(rule.points)
        self.nodes = el.nodes
        self.check = el.values(qpoints)

    def __call__(self, rho, config: SolverConfig, neighbors, stats: LimiterStats | None = None):
        h = self.grid.dx
        means = rho @ self.mean_w
        if config.enable_slope_limiter:
            left_n, right_n = neighbors(means)
            d_plus = right_n - means
            d_minus = means - left_n
            thr = config.tvb_M * h * h
            up = rho[:, -1] - means
            down = means - rho[:, 0]
            bad = (_tvb_minmod(up, d_plus, d_minus, thr) != up) | (_tvb_minmod(down, d_plus, d_minus, thr) != down)
            if np.any(bad):
                a1 = rho[bad] @ self.slope_w
                a1 = _tvb_minmod(a1, d_plus[bad], d_minus[bad], -1.0)
                rho = rho.copy()
                rho[bad] = means[bad, None] + a1[:, None] * self.nodes[None, :]
                if stats is not None:
                    stats.slope += int(np.count_nonzero(bad))
        if config.enable_bounds_limiter:
            vals = np.concatenate([rho, rho @ self.check.T], axis=1)
            hi = vals.max(axis=1)
            lo = vals.min(axis=1)
            bad = (hi > 1.0) | (lo < 0.0)
            if np.any(bad):
                rho = rho.copy()
                m = means[bad]
                clipped = (m < 0.0) | (m > 1.0)
                m = np.clip(m, 0.0, 1.0)
                with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                    t_hi = np.where(hi[bad] > 1.0, (1.0 - m) / (hi[bad] - m), 1.0)
                    t_lo = np.where(lo[bad] < 0.0, m / (m - lo[bad]), 1.0)
                theta = np.clip(np.nan_to_num(np.minimum(t_hi, t_lo), nan=0.0), 0.0, 1.0)
                theta[clipped] = 0.0
                rho[bad] = m[:, None] + theta[:, None] * (rho[bad] - means[bad, None])
                rho[bad] = np.where(theta[:, None] > 0, rho[bad], m[:, None])
                if stats is not None:
                    stats.bounds += int(np.count_nonzero(bad))
                    stats.mean_clipped += int(np.count_nonzero(clipped))
        return rho


def apply_limiters(
    rho: PolyField,
    config: SolverConfig,
    bc: BoundaryCondition | None = None,
    t: float = 0.0,
    stats: LimiterStats | None = None,
) -> PolyField:
    """Minmod-TVB slope limiter followed by bound-preserving scaling into [0, 1].

    Both steps keep every cell mean. Without a boundary condition, boundary
    cells reuse their single neighbor difference.
    """
    grid = rho.grid
    qpts = gauss_legendre_rule(config.quadrature_order).points
    limiter = _Limiter(grid, qpts)
    out = limiter(rho.coeffs, config, _neighbor_fn(bc, t), stats)
    return PolyField(grid, out)


def _neighbor_fn(bc: BoundaryCondition | None, t: float):
    def neighbors(means):
        if bc is not None and bc.is_periodic:
            return np.roll(means, 1), np.roll(means, -1)
        left = np.empty_like(means)
        right = np.empty_like(means)
        left[1:], right[:-1] = means[:-1], means[1:]
        if bc is None:
            # mirror the single available difference
            if len(means) > 1:
                left[0] = 2 * means[0] - means[1]
                right[-1] = 2 * means[-1] - means[-2]
            else:
                left[0] = right[-1] = means[0]
        else:
            left[0], right[-1] = bc.ghosts(t)
        return left, right

    return neighbors


def ssp_rk3_step(u, t: float, dt: float, rhs, post=None):
    """Shu-Osher SSP-RK3; ``post(u, t)`` (limiters) is applied after every stage."""
    post = post or (lambda v, _t: v)
    u1 = post(u + dt * rhs(u, t), t + dt)
    u2 = post(0.75 * u + 0.25 * (u1 + dt * rhs(u1, t + dt)), t + 0.5 * dt)
    return post(u / 3.0 + 2.0 / 3.0 * (u2 + dt * rhs(u2, t + 0.5 * dt)), t + dt)


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------

_STENCILS: dict[tuple, NonlocalStencil] = {}


def _cached_stencil(grid: SpatialGrid, params: ModelParams, targets: np.ndarray, conv_points: int, periodic: bool, qorder: int):
    key = (
        grid.domain_left, grid.domain_right, grid.n_cells, grid.degree, qorder,
        params.kernel.shape, params.kernel.gamma, conv_points, periodic,
    )
    st = _STENCILS.get(key)
    if st is None:
        if len(_STENCILS) > 32:
            _STENCILS.clear()
        st = NonlocalStencil(grid, params.kernel, targets, conv_points, periodic)
        _STENCILS[key] = st
    return st


class LDGSolver:
    """Spatial discretization plus time stepping for one parameter set."""

    def __init__(self, grid: SpatialGrid, params: ModelParams, bc: BoundaryCondition, config: SolverConfig) -> None:
        if grid.degree != config.degree:
            raise ValueError("grid degree and config degree differ")
        self.grid = grid
        self.params = params
        self.bc = bc
        self.config = config
        p = grid.degree
        el = grid.element
        self.rule = gauss_legendre_rule(config.quadrature_order)
        mass_rule = gauss_legendre_rule(p + 1)
        self.mass_ref, self.conv = _reference_matrices(p, mass_rule)
        self.mass_inv_ref = np.linalg.inv(self.mass_ref)
        self.bq = el.values(self.rule.points)
        self.dq = el.derivatives(self.rule.points)
        self.wq = self.rule.weights
        self.xq = grid.partition[:-1, None] + 0.5 * (self.rule.points[None, :] + 1.0) * grid.dx
        self.limiter = _Limiter(grid, self.rule.points)
        self.stats = LimiterStats()
        self.stencil = None
        if params.flux_variant is FluxVariant.NONLOCAL:
            targets = np.concatenate([self.xq.ravel(), grid.partition])
            self.stencil = _cached_stencil(grid, params, targets, config.conv_points, bc.is_periodic, self.rule.order)

    # -- pieces ------------------------------------------------------------

    def _ghosts(self, t: float) -> tuple[float, float] | None:
        return None if self.bc.is_periodic else self.bc.ghosts(t)

    def compute_sigma(self, rho: np.ndarray, t: float) -> np.ndarray:
        """Auxiliary gradient: ``M sigma = -C rho + S1`` with downstream traces."""
        s1 = np.zeros_like(rho)
        s1[:, 0] = -rho[:, 0]
        s1[:-1, -1] += rho[1:, 0]
        if self.bc.is_periodic:
            s1[-1, -1] += rho[0, 0]
        else:
            s1[-1, -1] += self.bc.ghosts(t)[1]
        rhs = -rho @ self.conv.T + s1
        return rhs @ self.mass_inv_ref.T / self.grid.dx

    def look_ahead(self, rho: np.ndarray, sigma: np.ndarray, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Look-ahead average at quadrature points ``(n, NG)`` and interfaces ``(n+1,)``."""
        ext = 0.0 if self.bc.is_periodic else self.bc.ghosts(t)[1]
        r = self.stencil.apply(rho, sigma, self.params.kappa, self.params.saturation, ext)
        nq = self.xq.size
        rq = r[:nq].reshape(self.xq.shape)
        ri = r[nq:]
        if self.bc.is_periodic:
            ri[-1] = ri[0]
        return rq, ri

    def wave_speed(self, rho: np.ndarray, t: float) -> float:
        """Global Lax-Friedrichs coefficient ``max |d(rho U)/d rho|``."""
        vel = self.params.velocity
        vals = [rho.ravel()]
        g = self._ghosts(t)
        if g is not None:
            vals.append(np.array(g))
        allv = np.clip(np.concatenate(vals), 0.0, 1.0)
        lo, hi = float(allv.min()), float(allv.max())
        if self.stencil is not None:
            sigma = self.compute_sigma(rho, t)
            rq, ri = self.look_ahead(rho, sigma, t)
            rhoq = np.clip(rho @ self.bq.T, 0.0, 1.0)
            pointwise = np.abs(vel(rq) + rhoq * vel.derivative(rq))
            rall = np.clip(np.concatenate([rq.ravel(), ri]), 0.0, 1.0)
            lo, hi = min(lo, float(rall.min())), max(hi, float(rall.max()))
            return max(float(pointwise.max()), vel.max_flux_slope(lo, hi, 129))
        return vel.max_flux_slope(lo, hi, 129)

    def spatial_residual(
        self, rho: np.ndarray, sigma: np.ndarray, t: float, alpha: float, return_fluxes: bool = False
    ):
        """Nodal time derivative ``M^{-1}(K - S2)``."""
        params = self.params
        vel = params.velocity
        variant = params.flux_variant
        rq_rho = rho @ self.bq.T
        n = self.grid.n_cells
        periodic = self.bc.is_periodic

        # interface states: left/right of x_0 .. x_n
        rl = np.empty(n + 1)
        rr = np.empty(n + 1)
        rl[1:] = rho[:, -1]
        rr[:-1] = rho[:, 0]
        if periodic:
            rl[0] = rho[-1, -1]
            rr[-1] = rho[0, 0]
        else:
            gl, gr = self.bc.ghosts(t)
            rl[0], rr[-1] = gl, gr

        if variant is FluxVariant.NONLOCAL:
            rq, ri = self.look_ahead(rho, sigma, t)
            qq = rq_rho * vel(rq)
            flux = numerical_flux(rl, rr, vel(ri), alpha)
        else:
            sq = sigma @ self.bq.T
            qq = flux_eval(variant, rq_rho, sq, None, params)
            sl = np.empty(n + 1)
            sr = np.empty(n + 1)
            sl[1:] = sigma[:, -1]
            sr[:-1] = sigma[:, 0]
            if periodic:
                sl[0], sr[-1] = sigma[-1, -1], sigma[0, 0]
            else:
                # zero-gradient extension of sigma into the ghost cells
                sl[0], sr[-1] = sigma[0, 0], sigma[-1, -1]
            rlc, rrc = np.clip(rl, 0.0, 1.0), np.clip(rr, 0.0, 1.0)
            flux = 0.5 * (
                flux_eval(variant, rlc, sl, None, params)
                + flux_eval(variant, rrc, sr, None, params)
                + alpha * (rlc - rrc)
            )
        if periodic:
            flux[-1] = flux[0]

        k_vol = (qq * self.wq) @ self.dq
        s2 = np.zeros_like(rho)
        s2[:, 0] -= flux[:-1]
        s2[:, -1] += flux[1:]
        rate = (k_vol - s2) @ self.mass_inv_ref.T / self.grid.dx
        if return_fluxes:
            return rate, flux
        return rate

    def rhs(self, rho: np.ndarray, t: float, alpha: float) -> np.ndarray:
        sigma = self.compute_sigma(rho, t)
        return self.spatial_residual(rho, sigma, t, alpha)

    def limit(self, rho: np.ndarray, t: float) -> np.ndarray:
        return self.limiter(rho, self.config, _neighbor_fn(self.bc, t), self.stats)

    def stable_dt(self, rho: np.ndarray, t: float) -> tuple[float, float]:
        """CFL step and the Lax-Friedrichs coefficient used for it."""
        cfg = self.config
        alpha = self.wave_speed(rho, t)
        if alpha > 1e-14 or cfg.max_dt is not None:
            dt = cfl_dt(self.grid.dx, alpha, self.grid.degree, cfg.cfl_beta, cfg.max_dt)
        else:
            dt = math.inf
        if self.params.flux_variant is FluxVariant.PHI and self.params.kappa > 0:
            # explicit parabolic limit for the local diffusive correction
            nu = 0.25 * self.params.kappa * self.params.saturation.max_slope
            dt = min(dt, cfg.cfl_beta * self.grid.dx**2 / (2.0 * nu * (2 * self.grid.degree + 1) ** 2))
        return dt, alpha

    def rk3_step(self, rho: np.ndarray, t: float, dt: float, alpha: float | None = None) -> np.ndarray:
        if alpha is None:
            alpha = self.wave_speed(rho, t)
        out = ssp_rk3_step(rho, t, dt, lambda u, s: self.rhs(u, s, alpha), self.limit)
        if not np.all(np.isfinite(out)):
            raise SimulationDiverged(f"non-finite state at t={t + dt:.6g}")
        return out


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


@dataclass
class SimulationResult:
    grid: SpatialGrid
    times: list[float] = field(default_factory=list)
    snapshots: list[np.ndarray] = field(default_factory=list)
    dt_history: list[float] = field(default_factory=list)
    limiter: LimiterStats = field(default_factory=LimiterStats)
    params: dict | None = None

    def field(self, i: int) -> PolyField:
        return PolyField(self.grid, self.snapshots[i])

    @property
    def final(self) -> PolyField:
        return self.field(-1)

    def sample(self, x: np.ndarray) -> np.ndarray:
        """Snapshots evaluated at positions ``x`` (trace average at interfaces)."""
        x = np.asarray(x, dtype=float)
        out = np.empty((len(self.snapshots), len(x)))
        for i, c in enumerate(self.snapshots):
            f = PolyField(self.grid, c)
            out[i] = 0.5 * (f(x, "left") + f(x, "right"))
        return out

    def metadata(self) -> dict:
        dts = np.array(self.dt_history) if self.dt_history else np.zeros(1)
        return {
            "params": self.params,
            "grid": {
                "left": self.grid.domain_left,
                "right": self.grid.domain_right,
                "n_cells": self.grid.n_cells,
                "degree": self.grid.degree,
            },
            "steps": len(self.dt_history),
            "dt": {"min": float(dts.min()), "max": float(dts.max()), "mean": float(dts.mean())},
            "limiter_activations": {
                "slope": self.limiter.slope,
                "bounds": self.limiter.bounds,
                "mean_clipped": self.limiter.mean_clipped,
            },
            "output_times": list(self.times),
        }

    def to_csv(self, path: str | Path) -> None:
        nodes = self.grid.nodes.ravel()
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("t,x,rho\n")
            for t, c in zip(self.times, self.snapshots):
                for x, r in zip(nodes, c.ravel()):
                    fh.write(f"{t:.12g},{x:.12g},{r:.15g}\n")

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.metadata(), indent=2), encoding="utf-8")


def simulate(
    initial: PolyField | Callable[[np.ndarray], np.ndarray],
    params: ModelParams,
    bc: BoundaryCondition,
    config: SolverConfig,
    t0: float,
    tf: float,
    output_times: Sequence[float] | None = None,
    domain: tuple[float, float] = (0.0, 1.0),
    limit_initial: bool = False,
) -> SimulationResult:
    """Advance from ``t0`` to ``tf`` with CFL-adaptive steps landing on ``output_times``."""
    if not tf > t0:
        raise ValueError("tf must exceed t0")
    if isinstance(initial, PolyField):
        grid = initial.grid
        rho = initial.coeffs.copy()
    else:
        grid = build_grid(domain[0], domain[1], config.n_cells, config.degree)
        rho = PolyField.interpolate(grid, initial).coeffs
    outs = sorted({float(t) for t in (output_times if output_times is not None else [t0, tf])})
    if outs and (outs[0] < t0 - 1e-12 or outs[-1] > tf + 1e-12):
        raise ValueError("output times must lie within [t0, tf]")
    if not outs or outs[-1] < tf:
        outs.append(tf)

    solver = LDGSolver(grid, params, bc, config)
    if limit_initial:
        rho = solver.limit(rho, t0)
    result = SimulationResult(grid, params=params.to_dict())
    result.limiter = solver.stats
    t = t0
    idx = 0
    scale = max(1.0, abs(tf))
    while idx < len(outs) and outs[idx] <= t0 + 1e-12 * scale:
        result.times.append(outs[idx])
        result.snapshots.append(rho.copy())
        idx += 1
    steps = 0
    while idx < len(outs):
        target = outs[idx]
        dt, alpha = solver.stable_dt(rho, t)
        land = False
        if t + dt >= target - 1e-12 * scale:
            dt = target - t
            land = True
        try:
            rho = solver.rk3_step(rho, t, dt, alpha)
        except SimulationDiverged as exc:
            exc.result = result
            raise
        result.dt_history.append(dt)
        t = target if land else t + dt
        steps += 1
        if steps > config.max_steps:
            raise SimulationDiverged(f"step budget exhausted at t={t:.6g}", result)
        while idx < len(outs) and outs[idx] <= t + 1e-12 * scale:
            result.times.append(outs[idx])
            result.snapshots.append(rho.copy())
            idx += 1
    return result
