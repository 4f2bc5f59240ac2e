"""Physics of the nonlocal saturated-diffusion traffic model.

Perceived density, diffusion coefficient, saturation functions, look-ahead
kernels, velocity laws and the three flux variants (nonlocal, local LWR and the
local diffusively corrected "Phi" model) live here, together with the
convolution machinery shared by the solver and the data pipeline.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Callable, Literal

import numpy as np
from scipy import sparse
from scipy.interpolate import CubicHermiteSpline, CubicSpline, PchipInterpolator
from scipy.special import expi

from .grid_basis import PolyField, SpatialGrid, adaptive_integrate, gauss_legendre_rule

KernelShape = Literal["linear", "quadratic", "exponential"]
_SHAPE_ALIASES = {"linear": "linear", "quadratic": "quadratic", "exponential": "exponential", "exp": "exponential"}


def _clip01(rho):
    return np.clip(rho, 0.0, 1.0)


def diffusion_coeff(rho):
    """Degenerate diffusion ``rho (1 - rho)``; input is clamped into [0, 1]."""
    r = _clip01(np.asarray(rho, dtype=float))
    out = r * (1.0 - r)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# Saturation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SaturationParams:
    """Saturation ``Psi(u) = base((K1 u - K2) / K3)``.

    ``variant`` chooses ``base``: ``tanh``, ``algebraic`` (``s / sqrt(1 + s^2)``)
    or ``viscous`` (``s / sqrt(1 + (nu/c)^2 s^2)``).
    """

    K1: float = 1.0
    K2: float = 0.0
    K3: float = 1.0
    variant: Literal["tanh", "algebraic", "viscous"] = "tanh"
    nu: float = 1.0
    c: float = 1.0

    def __post_init__(self) -> None:
        if self.K3 == 0:
            raise ValueError("K3 must be nonzero")
        if self.variant not in ("tanh", "algebraic", "viscous"):
            raise ValueError(f"unknown saturation variant {self.variant!r}")
        if self.variant == "viscous" and (self.nu <= 0 or self.c <= 0):
            raise ValueError("viscous saturation needs nu > 0 and c > 0")

    @property
    def max_slope(self) -> float:
        """Upper bound of ``|dPsi/du|`` (every base function has unit slope at 0)."""
        return abs(self.K1 / self.K3)


def saturation(u, params: SaturationParams = SaturationParams()):
    s = (params.K1 * np.asarray(u, dtype=float) - params.K2) / params.K3
    if params.variant == "tanh":
        out = np.tanh(s)
    elif params.variant == "algebraic":
        out = s / np.sqrt(1.0 + s * s)
    else:
        ratio = params.nu / params.c
        out = s / np.sqrt(1.0 + ratio * ratio * s * s)
        # the viscous form saturates at c/nu; keep the |Psi| <= 1 bound
        out = np.clip(out, -1.0, 1.0)
    # infinite gradients (e.g. data spikes) map to the limits
    out = np.where(np.isnan(out) & np.isinf(s), np.sign(s), out)
    return float(out) if np.ndim(out) == 0 else out


def perceived_density(rho, drho, kappa: float, params: SaturationParams = SaturationParams()):
    """``rho + kappa D(rho) Psi(drho)``; lies in [0, 1] for rho, kappa in [0, 1]."""
    rho = np.asarray(rho, dtype=float)
    out = rho + kappa * diffusion_coeff(rho) * saturation(drho, params)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


def _unnormalized_kernel(shape: str, gamma: float) -> Callable[[np.ndarray], np.ndarray]:
    if shape == "linear":
        return lambda x: (2.0 / gamma**2) * (gamma - x)
    if shape == "quadratic":
        return lambda x: (3.0 / (2.0 * gamma**3)) * (gamma**2 - x * x)

    # e^{1/(x-gamma)} scaled by e^{1/gamma} to stay representable for small gamma
    def exp_kernel(x):
        x = np.asarray(x, dtype=float)
        d = x - gamma
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            expo = np.where(d < 0, x / (gamma * np.where(d < 0, d, -1.0)), -np.inf)
        return np.exp(expo)

    return exp_kernel


def kernel_breakpoints(shape: str, gamma: float) -> np.ndarray:
    """Offsets in ``[0, gamma]`` where kernel quadrature should cut.

    The exponential kernel decays on a length scale ~ gamma^2 from the origin,
    so it gets geometric grading there.
    """
    if shape != "exponential":
        return np.array([0.0, gamma])
    h = min(gamma, gamma * gamma) / 16.0
    cuts = [0.0]
    while h < gamma:
        cuts.append(h)
        h *= 2.0
    cuts.append(gamma)
    return np.array(cuts)


def _scaled_normalization(shape: str, gamma: float) -> float:
    f = _unnormalized_kernel(shape, gamma)
    return adaptive_integrate(f, 0.0, gamma, tol=1e-14, breakpoints=kernel_breakpoints(shape, gamma))


def kernel_normalization(shape: str, gamma: float) -> float:
    """Constant ``Z`` with ``int_0^gamma k(x) / Z dx = 1`` for the unnormalized kernel formula.

    For the exponential shape ``k(x) = exp(1/(x - gamma))``; the value may underflow
    to 0 for very small gamma (the kernel itself is evaluated in scaled form).
    """
    shape = _normalize_shape(shape)
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    z = _scaled_normalization(shape, gamma)
    if shape == "exponential":
        return z * math.exp(-1.0 / gamma)
    return z


def exponential_normalization_ei_form(gamma: float) -> float:
    """Closed form Ei(-g) + g e^{-1/g}; differs from the true exponential normalization."""
    return float(expi(-gamma) + gamma * math.exp(-1.0 / gamma))


def exponential_normalization_closed_form(gamma: float) -> float:
    """Exact antiderivative result: Ei(-1/g) + g e^{-1/g}."""
    return float(expi(-1.0 / gamma) + gamma * math.exp(-1.0 / gamma))


def _normalize_shape(shape: str) -> str:
    try:
        return _SHAPE_ALIASES[shape]
    except KeyError:
        raise ValueError(f"unknown kernel shape {shape!r}") from None


@dataclass(frozen=True)
class Kernel:
    shape: KernelShape
    gamma: float
    normalization: float = field(init=False, compare=False)
    _scaled_z: float = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "shape", _normalize_shape(self.shape))
        if not (self.gamma > 0 and np.isfinite(self.gamma)):
            raise ValueError("kernel gamma must be positive and finite")
        z = _scaled_normalization(self.shape, self.gamma)
        object.__setattr__(self, "_scaled_z", z)
        true_z = z * math.exp(-1.0 / self.gamma) if self.shape == "exponential" else z
        object.__setattr__(self, "normalization", true_z)

    def __call__(self, x):
        return kernel_eval(self, x)

    def breakpoints(self) -> np.ndarray:
        return kernel_breakpoints(self.shape, self.gamma)

    def ei_form_deviation(self) -> float | None:
        """Relative deviation of the numerical normalization from the
        closed form (exponential kernel only)."""
        if self.shape != "exponential":
            return None
        closed = exponential_normalization_ei_form(self.gamma)
        return abs(self.normalization - closed) / abs(closed)


def kernel_eval(kernel: Kernel, x):
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("kernel offset must be nonnegative")
    inside = x <= kernel.gamma
    raw = _unnormalized_kernel(kernel.shape, kernel.gamma)(np.where(inside, x, kernel.gamma))
    out = np.where(inside, raw / kernel._scaled_z, 0.0)
    return float(out) if np.ndim(out) == 0 else out


def kernel_quadrature(
    kernel: Kernel, x: float, cuts: np.ndarray | None = None, n_points: int = 8
) -> tuple[np.ndarray, np.ndarray]:
    """Sample points ``y`` and weights ``w`` with ``sum w f(y) ~ int_x^{x+g} K(y-x) f(y) dy``.

    The window is split at the kernel's own breakpoints and at any ``cuts``
    (typically cell edges or data positions) falling inside it.
    """
    rule = gauss_legendre_rule(n_points)
    g = kernel.gamma
    pts = x + kernel.breakpoints()
    if cuts is not None and len(cuts):
        cuts = np.asarray(cuts, dtype=float)
        inner = cuts[(cuts > x) & (cuts < x + g)]
        pts = np.union1d(pts, inner)
    pts = np.unique(pts)
    a, b = pts[:-1], pts[1:]
    keep = b - a > 1e-14 * max(1.0, abs(x) + g)
    a, b = a[keep], b[keep]
    half = 0.5 * (b - a)
    y = (0.5 * (a + b))[:, None] + half[:, None] * rule.points[None, :]
    w = half[:, None] * rule.weights[None, :]
    y, w = y.ravel(), w.ravel()
    w = w * kernel_eval(kernel, np.clip(y - x, 0.0, g))
    return y, w


def convolve(
    field_: PolyField | Callable[[np.ndarray], np.ndarray],
    kernel: Kernel,
    x: float,
    right_extension: float | None = None,
    breaks: np.ndarray | None = None,
    n_points: int = 8,
    domain_right: float | None = None,
) -> float:
    """Kernel-weighted look-ahead average ``int_x^{x+g} K(y - x) f(y) dy``.

    ``field_`` is either a :class:`PolyField` (cut at its cell edges) or any
    callable (cut at ``breaks``). Beyond the right end of the domain the field
    is extended by ``right_extension``, defaulting to its right boundary trace.
    """
    if isinstance(field_, PolyField):
        grid = field_.grid
        grid.check_inside(x)
        cuts = grid.partition
        right = grid.domain_right
        f = field_
    else:
        cuts = breaks
        right = np.inf if domain_right is None else domain_right
        f = field_
    y, w = kernel_quadrature(kernel, x, cuts, n_points)
    inside = y <= right
    vals = np.empty_like(y)
    if np.any(inside):
        vals[inside] = f(y[inside])
    if not np.all(inside):
        ext = right_extension
        if ext is None:
            ext = float(f(np.array([right]), "left")[0]) if isinstance(f, PolyField) else float(f(np.array([right]))[0])
        vals[~inside] = ext
    return float(np.dot(w, vals) / np.sum(w))


class NonlocalStencil:
    """Precomputed sparse operator giving the look-ahead average at fixed targets.

    For targets ``x_t`` the perceived density is sampled at kernel quadrature
    points (split at cell edges), so ``R = W @ hat(B rho, B sigma) + e * ext``.
    Rows are normalized so constants are reproduced exactly.
    """

    def __init__(
        self,
        grid: SpatialGrid,
        kernel: Kernel,
        targets: np.ndarray,
        n_points: int = 6,
        periodic: bool = False,
    ) -> None:
        self.grid = grid
        self.kernel = kernel
        self.targets = np.asarray(targets, dtype=float)
        self.periodic = periodic
        left, right, L = grid.domain_left, grid.domain_right, grid.length
        dx = grid.dx
        p1 = grid.degree + 1
        el = grid.element

        rows_w, cols_w, vals_w = [], [], []
        ext = np.zeros(len(self.targets))
        sample_cells, sample_xi = [], []
        n_samples = 0
        g = kernel.gamma
        for t_idx, x in enumerate(self.targets):
            k0 = math.ceil((x - left) / dx - 1e-12)
            k1 = math.floor((x + g - left) / dx + 1e-12)
            cuts = left + dx * np.arange(k0, k1 + 1)
            y, w = kernel_quadrature(kernel, x, cuts, n_points)
            w = w / np.sum(w)
            if periodic:
                y = left + np.mod(y - left, L)
                beyond = np.zeros(len(y), dtype=bool)
            else:
                beyond = y > right
            ext[t_idx] = float(np.sum(w[beyond]))
            yin, win = y[~beyond], w[~beyond]
            if len(yin):
                cells = np.clip(np.floor((yin - left) / dx).astype(int), 0, grid.n_cells - 1)
                xi = np.clip(2.0 * (yin - grid.partition[cells]) / dx - 1.0, -1.0, 1.0)
                sample_cells.append(cells)
                sample_xi.append(xi)
                idx = np.arange(n_samples, n_samples + len(yin))
                rows_w.append(np.full(len(yin), t_idx))
                cols_w.append(idx)
                vals_w.append(win)
                n_samples += len(yin)

        if n_samples:
            cells = np.concatenate(sample_cells)
            xi = np.concatenate(sample_xi)
            b = el.values(xi)
            brow = np.repeat(np.arange(n_samples), p1)
            bcol = (cells[:, None] * p1 + np.arange(p1)[None, :]).ravel()
            self.basis = sparse.csr_matrix((b.ravel(), (brow, bcol)), shape=(n_samples, grid.n_cells * p1))
            self.weights = sparse.csr_matrix(
                (np.concatenate(vals_w), (np.concatenate(rows_w), np.concatenate(cols_w))),
                shape=(len(self.targets), n_samples),
            )
        else:
            self.basis = sparse.csr_matrix((0, grid.n_cells * p1))
            self.weights = sparse.csr_matrix((len(self.targets), 0))
        self.ext_weight = ext

    def apply(
        self,
        rho: np.ndarray,
        sigma: np.ndarray,
        kappa: float,
        sat: SaturationParams,
        ext_value: float = 0.0,
    ) -> np.ndarray:
        r = self.basis @ rho.ravel()
        s = self.basis @ sigma.ravel()
        hat = r + kappa * diffusion_coeff(r) * saturation(s, sat)
        return self.weights @ hat + self.ext_weight * ext_value

    def apply_field(self, values: np.ndarray, ext_value: float = 0.0) -> np.ndarray:
        """Convolve a field given directly by nodal values (no perceived-density map)."""
        return self.weights @ (self.basis @ values.ravel()) + self.ext_weight * ext_value


# ---------------------------------------------------------------------------
# Velocity functions
# ---------------------------------------------------------------------------


class VelocityFn:
    """Decreasing speed law on ``[0, rho_max]``; arguments are clamped into it."""

    rho_max: float = 1.0

    def __call__(self, r):
        raise NotImplementedError

    def derivative(self, r):
        raise NotImplementedError

    @property
    def u_max(self) -> float:
        return float(self(0.0))

    def to_dict(self) -> dict[str, Any]:
        raise NotImplementedError

    def max_flux_slope(self, lo: float = 0.0, hi: float = 1.0, samples: int = 257) -> float:
        """``max |d(r U(r))/dr|`` over ``[lo, hi]`` (sampled)."""
        r = np.linspace(max(lo, 0.0), min(hi, self.rho_max), samples)
        return float(np.max(np.abs(self(r) + r * self.derivative(r))))


@dataclass(frozen=True)
class NewellVelocity(VelocityFn):
    """``U(r) = v (1 - exp{(c/v)(1 - rho_max / r)})``, with ``U(0) = v``."""

    v: float
    c: float
    rho_max: float = 1.0

    def __post_init__(self) -> None:
        if self.v <= 0 or self.c <= 0 or self.rho_max <= 0:
            raise ValueError("Newell parameters v, c, rho_max must be positive")

    def _expo(self, r):
        r = np.clip(np.asarray(r, dtype=float), 0.0, self.rho_max)
        with np.errstate(divide="ignore"):
            z = (self.c / self.v) * (1.0 - self.rho_max / r)
        return r, np.exp(z)  # exp(-inf) = 0 at r = 0

    def __call__(self, r):
        _, e = self._expo(r)
        out = self.v * (1.0 - e)
        return float(out) if np.ndim(out) == 0 else out

    def derivative(self, r):
        r, e = self._expo(r)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(r > 0, -self.c * self.rho_max * e / np.where(r > 0, r * r, 1.0), 0.0)
        return float(out) if np.ndim(out) == 0 else out

    def to_dict(self) -> dict[str, Any]:
        return {"kind": "newell", "v": self.v, "c": self.c, "rho_max": self.rho_max}


@dataclass(frozen=True)
class ConstantVelocity(VelocityFn):
    """Constant speed: turns the local model into linear advection."""

    v: float
    rho_max: float = 1.0

    def __call__(self, r):
        out = np.full(np.shape(r), self.v, dtype=float)
        return float(out) if np.ndim(out) == 0 else out

    def derivative(self, r):
        out = np.zeros(np.shape(r), dtype=float)
        return float(out) if np.ndim(out) == 0 else out

    def to_dict(self) -> dict[str, Any]:
        return {"kind": "constant", "v": self.v, "rho_max": self.rho_max}


class SplineVelocity(VelocityFn):
    """Cubic spline through equidistant control speeds with zero end slopes.

    With ``monotone=True`` a Fritsch-Carlson Hermite cubic (zero end slopes) is
    used instead, which is guaranteed nonincreasing for nonincreasing data.
    """

    def __init__(self, speeds, rho_max: float = 1.0, monotone: bool = False) -> None:
        speeds = np.asarray(speeds, dtype=float)
        if speeds.ndim != 1 or len(speeds) < 2:
            raise ValueError("need at least two control speeds")
        if np.any(speeds < 0):
            raise ValueError("control speeds must be nonnegative")
        self.speeds = speeds
        self.rho_max = float(rho_max)
        self.monotone = monotone
        self.knots = np.linspace(0.0, self.rho_max, len(speeds))
        if monotone:
            if len(speeds) == 2:
                slopes = np.zeros(2)
            else:
                slopes = PchipInterpolator(self.knots, speeds).derivative()(self.knots)
                slopes[0] = slopes[-1] = 0.0
            self._spline = CubicHermiteSpline(self.knots, speeds, slopes)
        else:
            self._spline = CubicSpline(self.knots, speeds, bc_type="clamped")
        self._dspline = self._spline.derivative()

    def __call__(self, r):
        r = np.clip(np.asarray(r, dtype=float), 0.0, self.rho_max)
        out = self._spline(r)
        return float(out) if np.ndim(out) == 0 else out

    def derivative(self, r):
        r = np.clip(np.asarray(r, dtype=float), 0.0, self.rho_max)
        out = self._dspline(r)
        return float(out) if np.ndim(out) == 0 else out

    def is_nonincreasing(self, samples: int = 1000, tol: float = 1e-9) -> bool:
        vals = self(np.linspace(0.0, self.rho_max, samples))
        return bool(np.all(np.diff(vals) <= tol))

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "spline",
            "speeds": self.speeds.tolist(),
            "rho_max": self.rho_max,
            "monotone": self.monotone,
        }

    def __repr__(self) -> str:
        return f"SplineVelocity(speeds={self.speeds.tolist()}, rho_max={self.rho_max})"


def velocity_from_dict(d: dict[str, Any]) -> VelocityFn:
    kind = d.get("kind", "newell")
    if kind == "newell":
        return NewellVelocity(float(d["v"]), float(d["c"]), float(d.get("rho_max", 1.0)))
    if kind == "spline":
        return SplineVelocity(d["speeds"], float(d.get("rho_max", 1.0)), bool(d.get("monotone", False)))
    if kind == "constant":
        return ConstantVelocity(float(d["v"]), float(d.get("rho_max", 1.0)))
    raise ValueError(f"unknown velocity kind {kind!r}")


def velocity_eval(vel: VelocityFn, r):
    return vel(r)


# ---------------------------------------------------------------------------
# Parameters and fluxes
# ---------------------------------------------------------------------------


class FluxVariant(str, Enum):
    NONLOCAL = "nonlocal"
    LWR = "lwr"
    PHI = "phi"


@dataclass(frozen=True)
class ModelParams:
    flux_variant: FluxVariant
    kappa: float
    velocity: VelocityFn
    kernel: Kernel | None = None
    saturation: SaturationParams = SaturationParams()

    def __post_init__(self) -> None:
        object.__setattr__(self, "flux_variant", FluxVariant(self.flux_variant))
        if not 0.0 <= self.kappa <= 1.0:
            raise ValueError(f"kappa must lie in [0, 1], got {self.kappa}")
        if self.flux_variant is FluxVariant.NONLOCAL and self.kernel is None:
            raise ValueError("the nonlocal flux needs a kernel")

    def to_dict(self) -> dict[str, Any]:
        return {
            "flux_variant": self.flux_variant.value,
            "kappa": self.kappa,
            "velocity": self.velocity.to_dict(),
            "kernel": None if self.kernel is None else {"shape": self.kernel.shape, "gamma": self.kernel.gamma},
            "saturation": asdict(self.saturation),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelParams":
        kernel = d.get("kernel")
        return cls(
            flux_variant=FluxVariant(d["flux_variant"]),
            kappa=float(d["kappa"]),
            velocity=velocity_from_dict(d["velocity"]),
            kernel=None if kernel is None else Kernel(kernel["shape"], float(kernel["gamma"])),
            saturation=SaturationParams(**d.get("saturation", {})),
        )


def flux_eval(variant: FluxVariant | str, rho, sigma, R, params: ModelParams):
    """Physical flux for each model variant.

    nonlocal: ``rho U(R)``; lwr: ``rho U(rho)``; phi: ``rho U(rho) - kappa D(rho) Psi(sigma)``.
    """
    variant = FluxVariant(variant)
    rho = np.asarray(rho, dtype=float)
    if variant is FluxVariant.NONLOCAL:
        out = rho * params.velocity(R)
    elif variant is FluxVariant.LWR:
        out = rho * params.velocity(rho)
    else:
        out = rho * params.velocity(rho) - params.kappa * diffusion_coeff(rho) * saturation(sigma, params.saturation)
    return float(out) if np.ndim(out) == 0 else out
