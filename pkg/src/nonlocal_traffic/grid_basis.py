"""Spatial discretization: uniform partitions, nodal bases, Gauss-Legendre rules.

Each cell carries ``p + 1`` nodes taken from the Chebyshev family and stretched
so that the first and last nodes sit exactly on the cell edges. The basis is the
Lagrange (cardinal) basis on those nodes, so coefficient vectors are nodal values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Literal

import numpy as np

Side = Literal["left", "right"]


# ---------------------------------------------------------------------------
# Quadrature
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Legendre rule on the reference interval [-1, 1]."""

    order: int
    points: np.ndarray
    weights: np.ndarray

    def mapped(self, a: float, b: float) -> tuple[np.ndarray, np.ndarray]:
        """Points and weights of the same rule on ``[a, b]``."""
        half = 0.5 * (b - a)
        return 0.5 * (a + b) + half * self.points, half * self.weights

    def integrate(self, f: Callable[[np.ndarray], np.ndarray], a: float = -1.0, b: float = 1.0) -> float:
        x, w = self.mapped(a, b)
        return float(np.dot(w, f(x)))


def _legendre_and_derivative(n: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p_prev = np.ones_like(x)
    p = x.copy()
    for k in range(2, n + 1):
        p_prev, p = p, ((2 * k - 1) * x * p - (k - 1) * p_prev) / k
    # derivative from the standard recurrence; nodes never hit x = +-1
    dp = n * (x * p - p_prev) / (x * x - 1.0)
    return p, dp


@lru_cache(maxsize=None)
def _gauss_legendre_cached(n: int) -> tuple[tuple[float, ...], tuple[float, ...]]:
    if n == 1:
        return (0.0,), (2.0,)
    k = np.arange(1, n + 1)
    # Tricomi initial guess, then Newton on P_n
    x = np.cos(np.pi * (k - 0.25) / (n + 0.5))
    for _ in range(100):
        p, dp = _legendre_and_derivative(n, x)
        dx = p / dp
        x = x - dx
        if np.max(np.abs(dx)) < 1e-14:
            break
    p, dp = _legendre_and_derivative(n, x)
    w = 2.0 / ((1.0 - x * x) * dp * dp)
    order = np.argsort(x)
    x, w = x[order], w[order]
    # enforce exact symmetry
    x = 0.5 * (x - x[::-1])
    w = 0.5 * (w + w[::-1])
    return tuple(x.tolist()), tuple(w.tolist())


def gauss_legendre_rule(n_points: int) -> QuadratureRule:
    """Gauss-Legendre rule with ``n_points`` nodes (exact to degree 2n-1).

    Nodes are found by Newton iteration on the Legendre polynomial, so any
    order is available.
    """
    if int(n_points) != n_points or n_points < 1:
        raise ValueError(f"quadrature order must be a positive integer, got {n_points!r}")
    x, w = _gauss_legendre_cached(int(n_points))
    return QuadratureRule(int(n_points), np.array(x), np.array(w))


def adaptive_integrate(
    f: Callable[[np.ndarray], np.ndarray],
    a: float,
    b: float,
    tol: float = 1e-13,
    breakpoints: np.ndarray | None = None,
    order: int = 12,
    max_depth: int = 40,
) -> float:
    """Adaptive composite Gauss-Legendre integration of ``f`` over ``[a, b]``.

    The interval is first cut at ``breakpoints`` (used for graded meshes near
    steep features); each piece is bisected until the one-panel and two-panel
    estimates agree to ``tol`` relative to the coarse estimate of the whole integral.
    """
    rule = gauss_legendre_rule(order)
    cuts = [a, b] if breakpoints is None else sorted({a, b, *[float(c) for c in breakpoints if a < c < b]})

    def panel(lo: float, hi: float) -> float:
        x, w = rule.mapped(lo, hi)
        return float(np.dot(w, f(x)))

    total = 0.0
    stack = []
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        stack.append((lo, hi, panel(lo, hi), 0))
    # compare panel errors with the coarse estimate of the whole integral, not the running sum
    scale = max(sum(abs(s[2]) for s in stack), 1e-300)
    while stack:
        lo, hi, whole, depth = stack.pop()
        mid = 0.5 * (lo + hi)
        left, right = panel(lo, mid), panel(mid, hi)
        err = abs(left + right - whole)
        if err <= tol * scale or depth >= max_depth:
            total += left + right
        else:
            stack.append((lo, mid, left, depth + 1))
            stack.append((mid, hi, right, depth + 1))
    return total


# ---------------------------------------------------------------------------
# Reference element
# ---------------------------------------------------------------------------


def chebyshev_reference_nodes(p: int) -> np.ndarray:
    """``p + 1`` Chebyshev points on [-1, 1] stretched so the end nodes are +-1.

    These are the roots ``cos((2k+1) pi / (2m))`` with ``m = p + 1``, sorted
    ascending and divided by the largest root.
    """
    if p < 1:
        raise ValueError("polynomial degree must be >= 1")
    m = p + 1
    roots = np.sort(np.cos((2 * np.arange(m) + 1) * np.pi / (2 * m)))
    nodes = roots / roots[-1]
    nodes[0], nodes[-1] = -1.0, 1.0
    return nodes


@dataclass(frozen=True)
class ReferenceElement:
    """Lagrange basis on the reference nodes, stored in monomial form."""

    degree: int
    nodes: np.ndarray
    coeffs: np.ndarray  # row i: monomial coefficients (ascending) of phi_i
    dcoeffs: np.ndarray

    @classmethod
    def build(cls, degree: int) -> "ReferenceElement":
        nodes = chebyshev_reference_nodes(degree)
        vander = np.vander(nodes, degree + 1, increasing=True)
        coeffs = np.linalg.solve(vander, np.eye(degree + 1)).T
        dcoeffs = np.zeros_like(coeffs)
        dcoeffs[:, :-1] = coeffs[:, 1:] * np.arange(1, degree + 1)
        return cls(degree, nodes, coeffs, dcoeffs)

    def values(self, xi: np.ndarray) -> np.ndarray:
        """Basis matrix ``B[q, i] = phi_i(xi_q)``."""
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        powers = np.vander(xi, self.degree + 1, increasing=True)
        return powers @ self.coeffs.T

    def derivatives(self, xi: np.ndarray) -> np.ndarray:
        """``D[q, i] = dphi_i/dxi(xi_q)`` on the reference interval."""
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        powers = np.vander(xi, self.degree + 1, increasing=True)
        return powers @ self.dcoeffs.T


@lru_cache(maxsize=None)
def reference_element(degree: int) -> ReferenceElement:
    return ReferenceElement.build(degree)


# ---------------------------------------------------------------------------
# Grid and fields
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpatialGrid:
    domain_left: float
    domain_right: float
    n_cells: int
    degree: int
    partition: np.ndarray = field(repr=False)
    nodes: np.ndarray = field(repr=False)  # (n_cells, degree + 1)

    @property
    def dx(self) -> float:
        return (self.domain_right - self.domain_left) / self.n_cells

    @property
    def length(self) -> float:
        return self.domain_right - self.domain_left

    @property
    def element(self) -> ReferenceElement:
        return reference_element(self.degree)

    def cell_of(self, x: np.ndarray, side: Side = "right") -> np.ndarray:
        """Cell index holding ``x``; at interior partition points ``side``
        picks the cell to the left or right of the interface."""
        x = np.asarray(x, dtype=float)
        s = (x - self.domain_left) / self.dx
        if side == "right":
            k = np.floor(s + 1e-12 * np.maximum(1.0, np.abs(s)))
        else:
            k = np.ceil(s - 1e-12 * np.maximum(1.0, np.abs(s))) - 1
        return np.clip(k, 0, self.n_cells - 1).astype(int)

    def to_reference(self, cell: np.ndarray, x: np.ndarray) -> np.ndarray:
        lo = self.partition[cell]
        return 2.0 * (np.asarray(x, dtype=float) - lo) / self.dx - 1.0

    def check_inside(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=float)
        tol = 1e-12 * max(1.0, abs(self.domain_left), abs(self.domain_right))
        if np.any(x < self.domain_left - tol) or np.any(x > self.domain_right + tol):
            raise ValueError(f"position outside domain [{self.domain_left}, {self.domain_right}]")


def build_grid(left: float, right: float, n_cells: int, degree: int) -> SpatialGrid:
    """Uniform partition of ``[left, right]`` into ``n_cells`` cells of degree ``degree``."""
    if not (np.isfinite(left) and np.isfinite(right)) or right <= left:
        raise ValueError(f"degenerate interval [{left}, {right}]")
    if int(n_cells) != n_cells or n_cells < 1:
        raise ValueError("n_cells must be a positive integer")
    if int(degree) != degree or degree < 1:
        raise ValueError("degree must be an integer >= 1")
    n_cells, degree = int(n_cells), int(degree)
    partition = np.linspace(left, right, n_cells + 1)
    ref = reference_element(degree).nodes
    lo, hi = partition[:-1, None], partition[1:, None]
    nodes = lo + 0.5 * (ref[None, :] + 1.0) * (hi - lo)
    nodes[:, 0] = partition[:-1]
    nodes[:, -1] = partition[1:]
    return SpatialGrid(float(left), float(right), n_cells, degree, partition, nodes)


def lagrange_basis_eval(grid: SpatialGrid, cell: int, i: int, x: float) -> tuple[float, float]:
    """Value and x-derivative of the ``i``-th cardinal function of ``cell`` at ``x``."""
    if not 0 <= cell < grid.n_cells:
        raise IndexError(f"cell {cell} out of range")
    if not 0 <= i <= grid.degree:
        raise IndexError(f"node index {i} out of range")
    lo, hi = grid.partition[cell], grid.partition[cell + 1]
    tol = 1e-12 * max(1.0, abs(lo), abs(hi))
    if x < lo - tol or x > hi + tol:
        raise ValueError(f"x={x} outside cell [{lo}, {hi}]")
    xi = grid.to_reference(np.array([cell]), np.array([x]))
    el = grid.element
    value = el.values(xi)[0, i]
    deriv = el.derivatives(xi)[0, i] * 2.0 / grid.dx
    return float(value), float(deriv)


@dataclass
class PolyField:
    """Piecewise polynomial stored as nodal values, shape ``(n_cells, p + 1)``."""

    grid: SpatialGrid
    coeffs: np.ndarray

    def __post_init__(self) -> None:
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        expected = (self.grid.n_cells, self.grid.degree + 1)
        if self.coeffs.shape != expected:
            raise ValueError(f"coeffs shape {self.coeffs.shape} != {expected}")

    @classmethod
    def constant(cls, grid: SpatialGrid, value: float) -> "PolyField":
        return cls(grid, np.full((grid.n_cells, grid.degree + 1), float(value)))

    @classmethod
    def interpolate(cls, grid: SpatialGrid, f: Callable[[np.ndarray], np.ndarray]) -> "PolyField":
        """Nodal interpolant of ``f``."""
        return cls(grid, np.asarray(f(grid.nodes), dtype=float).reshape(grid.nodes.shape))

    def __call__(self, x, side: Side = "right") -> np.ndarray:
        return eval_field(self, x, side)

    def left_traces(self) -> np.ndarray:
        """Value at each cell's left edge."""
        return self.coeffs[:, 0]

    def right_traces(self) -> np.ndarray:
        return self.coeffs[:, -1]

    def cell_means(self) -> np.ndarray:
        return self.coeffs @ mean_weights(self.grid.degree)

    def integral(self) -> float:
        return float(np.sum(self.cell_means()) * self.grid.dx)

    def copy(self) -> "PolyField":
        return PolyField(self.grid, self.coeffs.copy())


@lru_cache(maxsize=None)
def _mean_weights_cached(degree: int) -> tuple[float, ...]:
    rule = gauss_legendre_rule(degree + 1)
    b = reference_element(degree).values(rule.points)
    return tuple((0.5 * rule.weights @ b).tolist())


def mean_weights(degree: int) -> np.ndarray:
    """Weights ``c`` with cell mean = ``c @ nodal_values``."""
    return np.array(_mean_weights_cached(degree))


def eval_field(field_: PolyField, x, side: Side = "right") -> np.ndarray | float:
    """Evaluate a piecewise polynomial; ``side`` selects the trace at interfaces."""
    grid = field_.grid
    scalar = np.ndim(x) == 0
    xa = np.atleast_1d(np.asarray(x, dtype=float))
    grid.check_inside(xa)
    cells = grid.cell_of(xa, side)
    xi = grid.to_reference(cells, xa)
    b = grid.element.values(xi)
    out = np.einsum("qi,qi->q", b, field_.coeffs[cells])
    return float(out[0]) if scalar else out


def l2_error(field_: PolyField, exact: Callable[[np.ndarray], np.ndarray], order: int | None = None) -> float:
    """``||field - exact||_{L2}`` by per-cell Gauss-Legendre quadrature."""
    grid = field_.grid
    rule = gauss_legendre_rule(order or grid.degree + 4)
    xq = grid.partition[:-1, None] + 0.5 * (rule.points[None, :] + 1.0) * grid.dx
    vals = field_.coeffs @ grid.element.values(rule.points).T
    err = (vals - exact(xq)) ** 2
    return float(np.sqrt(0.5 * grid.dx * np.sum(err * rule.weights[None, :])))
