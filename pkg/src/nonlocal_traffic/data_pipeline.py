"""Measurement ingestion and empirical density preparation.

Raw ``t,x,speed,flow`` tables are converted to SI units, turned into
normalized density/speed/flow fields on their native (time x position) grid,
differentiated in space, optionally smoothed, convolved with a look-ahead
kernel and summarized in equal-width density bins.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np

from .model import Kernel, SaturationParams, kernel_quadrature, perceived_density

SPEED_UNITS = {"m/s": 1.0, "mph": 0.44704, "km/h": 1.0 / 3.6}
LENGTH_UNITS = {"m": 1.0, "km": 1000.0, "mi": 1609.344, "ft": 0.3048}
TIME_UNITS = {"s": 1.0, "min": 60.0, "h": 3600.0}
# flows are stored in vehicles per second
FLOW_UNITS = {"veh/s": 1.0, "veh/min": 1.0 / 60.0, "veh/h": 1.0 / 3600.0}

REQUIRED_COLUMNS = ("t", "x", "speed", "flow")
Regime = Literal["all", "free", "congested"]


class DataFormatError(ValueError):
    """Raised with every problem found in an input table, each tagged by line."""

    def __init__(self, problems: list[tuple[int | None, str]]) -> None:
        self.problems = list(problems)
        lines = []
        for line, msg in self.problems:
            lines.append(f"line {line}: {msg}" if line is not None else msg)
        super().__init__("; ".join(lines))


@dataclass(frozen=True)
class Units:
    speed: str = "m/s"
    x: str = "m"
    flow: str = "veh/h"
    time: str = "s"
    section_length: float | None = None

    def __post_init__(self) -> None:
        problems = []
        for name, table in (("speed", SPEED_UNITS), ("x", LENGTH_UNITS), ("flow", FLOW_UNITS), ("time", TIME_UNITS)):
            if getattr(self, name) not in table:
                problems.append((None, f"unknown {name} unit {getattr(self, name)!r}; expected one of {sorted(table)}"))
        if problems:
            raise DataFormatError(problems)

    @classmethod
    def from_mapping(cls, d: dict) -> "Units":
        keys = {"speed_unit": "speed", "x_unit": "x", "flow_unit": "flow", "time_unit": "time", "section_length": "section_length"}
        unknown = sorted(set(d) - set(keys))
        if unknown:
            raise DataFormatError([(None, f"unknown unit declaration(s): {', '.join(unknown)}")])
        return cls(**{keys[k]: v for k, v in d.items()})


@dataclass
class RawMeasurementTable:
    """Measurements in SI units (s, m, m/s, veh/s), sorted by ``(t, x)``."""

    t: np.ndarray
    x: np.ndarray
    speed: np.ndarray
    flow: np.ndarray
    units: Units = field(default_factory=Units)
    section_length: float | None = None

    def __len__(self) -> int:
        return len(self.t)


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def ingest_csv(path: str | Path, units: Units | dict | None = None) -> RawMeasurementTable:
    """Parse a ``t,x,speed,flow`` CSV, convert to SI and sort.

    Unit declarations come from ``units`` or, failing that, from a JSON file
    with the same stem next to the CSV. Every malformed row is reported.
    """
    path = Path(path)
    if units is None:
        side = _sidecar_path(path)
        units = Units.from_mapping(json.loads(side.read_text(encoding="utf-8"))) if side.exists() else Units()
    elif isinstance(units, dict):
        units = Units.from_mapping(units)

    problems: list[tuple[int | None, str]] = []
    rows: list[tuple[float, float, float, float]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataFormatError([(1, "empty file")])
        header = [h.strip() for h in header]
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise DataFormatError([(1, f"missing column '{c}'") for c in missing])
        idx = [header.index(c) for c in REQUIRED_COLUMNS]
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) < len(header):
                problems.append((lineno, f"expected {len(header)} fields, got {len(rec)}"))
                continue
            vals = []
            for col, j in zip(REQUIRED_COLUMNS, idx):
                try:
                    v = float(rec[j])
                except ValueError:
                    problems.append((lineno, f"non-numeric {col} value {rec[j]!r}"))
                    break
                if not math.isfinite(v):
                    problems.append((lineno, f"non-finite {col} value {rec[j]!r}"))
                    break
                vals.append(v)
            else:
                if vals[2] < 0 or vals[3] < 0:
                    problems.append((lineno, "speed and flow must be non-negative"))
                    continue
                rows.append((vals[0], vals[1], vals[2], vals[3], lineno))

    seen: dict[tuple[float, float], int] = {}
    for t, x, _, _, lineno in rows:
        if (t, x) in seen:
            problems.append((lineno, f"duplicate (t, x) = ({t:g}, {x:g}), first seen on line {seen[(t, x)]}"))
        else:
            seen[(t, x)] = lineno
    if problems:
        raise DataFormatError(problems)
    if not rows:
        raise DataFormatError([(None, "no data rows")])

    arr = np.array([r[:4] for r in rows], dtype=float)
    order = np.lexsort((arr[:, 1], arr[:, 0]))
    arr = arr[order]
    length = None
    if units.section_length is not None:
        length = float(units.section_length) * LENGTH_UNITS[units.x]
    return RawMeasurementTable(
        t=arr[:, 0] * TIME_UNITS[units.time],
        x=arr[:, 1] * LENGTH_UNITS[units.x],
        speed=arr[:, 2] * SPEED_UNITS[units.speed],
        flow=arr[:, 3] * FLOW_UNITS[units.flow],
        units=units,
        section_length=length,
    )


# ---------------------------------------------------------------------------
# Normalized dataset
# ---------------------------------------------------------------------------


@dataclass
class NormalizedDataset:
    """Scaled fields on a (time x position) grid together with the scale factors.

    ``rho``, ``u``, ``q`` and ``drho`` have shape ``(len(times), len(positions))``.
    Physical quantities are ``rho * rho_max_obs`` (veh/m), ``u * u_max_obs``
    (m/s), ``x_origin + positions * length`` (m) and
    ``t_origin + times * time_factor`` (s). ``boundary_left`` and
    ``boundary_right`` optionally hold densities just outside the first and
    last positions (one per time), used as ghost values by simulations.
    """

    times: np.ndarray
    positions: np.ndarray
    rho: np.ndarray
    u: np.ndarray
    q: np.ndarray
    drho: np.ndarray | None = None
    rho_max_obs: float = 1.0
    u_max_obs: float = 1.0
    length: float = 1.0
    x_origin: float = 0.0
    t_origin: float = 0.0
    time_factor: float = 1.0
    imputed: np.ndarray | None = None
    boundary_left: np.ndarray | None = None
    boundary_right: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float)
        self.positions = np.asarray(self.positions, dtype=float)
        shape = (len(self.times), len(self.positions))
        for name in ("boundary_left", "boundary_right"):
            val = getattr(self, name)
            if val is not None:
                val = np.asarray(val, dtype=float)
                if val.shape != self.times.shape:
                    raise ValueError(f"{name} needs one value per time")
                setattr(self, name, val)
        for name in ("rho", "u", "q", "drho", "imputed"):
            val = getattr(self, name)
            if val is None:
                continue
            val = np.asarray(val, dtype=bool if name == "imputed" else float)
            if val.shape != shape:
                raise ValueError(f"{name} has shape {val.shape}, expected {shape}")
            setattr(self, name, val)
        if self.imputed is None:
            self.imputed = np.zeros(shape, dtype=bool)

    @property
    def shape(self) -> tuple[int, int]:
        return self.rho.shape

    def physical_density(self) -> np.ndarray:
        return self.rho * self.rho_max_obs

    def physical_speed(self) -> np.ndarray:
        return self.u * self.u_max_obs

    def physical_positions(self) -> np.ndarray:
        return self.x_origin + self.positions * self.length

    def physical_times(self) -> np.ndarray:
        return self.t_origin + self.times * self.time_factor

    def factors(self) -> dict:
        return {
            "rho_max_obs": self.rho_max_obs,
            "u_max_obs": self.u_max_obs,
            "length": self.length,
            "x_origin": self.x_origin,
            "t_origin": self.t_origin,
            "time_factor": self.time_factor,
        }

    def to_csv(self, path: str | Path, excluded: np.ndarray | None = None) -> None:
        """Write ``t,x,rho,u,q,drho,excluded`` rows and a JSON sidecar of factors."""
        path = Path(path)
        drho = self.drho if self.drho is not None else np.full(self.shape, np.nan)
        if excluded is None:
            excluded = np.zeros(self.shape, dtype=bool)
        excluded = np.broadcast_to(excluded, self.shape)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "rho", "u", "q", "drho", "excluded"])
            for i, t in enumerate(self.times):
                for j, x in enumerate(self.positions):
                    w.writerow([repr(float(t)), repr(float(x)), repr(float(self.rho[i, j])), repr(float(self.u[i, j])),
                                repr(float(self.q[i, j])), repr(float(drho[i, j])), int(bool(excluded[i, j]))])
        meta = dict(self.factors(), n_imputed=int(self.imputed.sum()))
        for name in ("boundary_left", "boundary_right"):
            if getattr(self, name) is not None:
                meta[name] = getattr(self, name).tolist()
        _sidecar_path(path).write_text(json.dumps(meta, indent=2), encoding="utf-8")


def load_normalized(path: str | Path) -> NormalizedDataset:
    """Read a dataset written by :meth:`NormalizedDataset.to_csv`."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ("t", "x", "rho", "u", "q") if c not in (reader.fieldnames or [])]
        if missing:
            raise DataFormatError([(1, f"missing column '{c}'") for c in missing])
        recs = [(float(r["t"]), float(r["x"]), float(r["rho"]), float(r["u"]), float(r["q"]),
                 float(r.get("drho") or "nan")) for r in reader]
    arr = np.array(recs, dtype=float)
    times = np.unique(arr[:, 0])
    xs = np.unique(arr[:, 1])
    if len(arr) != len(times) * len(xs):
        raise DataFormatError([(None, "normalized dataset is not a complete (t, x) grid")])
    order = np.lexsort((arr[:, 1], arr[:, 0]))
    arr = arr[order].reshape(len(times), len(xs), 6)
    drho = arr[..., 5]
    factors: dict = {}
    side = _sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text(encoding="utf-8"))
        factors = {k: float(meta[k]) for k in ("rho_max_obs", "u_max_obs", "length", "x_origin", "t_origin", "time_factor") if k in meta}
        factors.update({k: np.asarray(meta[k], dtype=float) for k in ("boundary_left", "boundary_right") if k in meta})
    return NormalizedDataset(times, xs, arr[..., 2], arr[..., 3], arr[..., 4],
                             drho=None if np.all(np.isnan(drho)) else drho, **factors)


def _to_grid(table: RawMeasurementTable) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    times = np.unique(table.t)
    xs = np.unique(table.x)
    if len(table) != len(times) * len(xs):
        raise DataFormatError([(None, f"table is not a complete grid: {len(table)} rows for "
                                      f"{len(times)} times x {len(xs)} positions")])
    # rows are sorted by (t, x) so a reshape recovers the grid
    speed = table.speed.reshape(len(times), len(xs))
    flow = table.flow.reshape(len(times), len(xs))
    return times, xs, speed, flow


def normalize(
    table: RawMeasurementTable,
    speed_floor: float = 1e-6,
    time_scale: Literal["hours", "seconds", "unit"] = "hours",
) -> NormalizedDataset:
    """Derive density from flow/speed and scale density, speed and position.

    Density and speed are divided by their observed maxima and the flow is
    recomputed from the scaled pair. Positions are mapped affinely onto
    [0, 1]. Where the scaled speed is below ``speed_floor`` the density is
    taken from the nearest-in-time valid sample at the same position and the
    sample is flagged in ``imputed``. Times are measured from the first
    timestamp in hours (default), seconds, or mapped onto [0, 1] (``"unit"``).
    """
    times, xs, speed, flow = _to_grid(table)
    if len(times) < 2 or len(xs) < 2:
        raise ValueError("need at least 2 times and 2 positions")
    u_max = float(speed.max())
    if not u_max > 0:
        raise ValueError("all speeds are zero")
    valid = speed / u_max >= speed_floor
    rho_raw = np.zeros_like(speed)
    rho_raw[valid] = flow[valid] / speed[valid]
    imputed = ~valid
    if imputed.any():
        for j in np.nonzero(imputed.any(axis=0))[0]:
            ok = np.nonzero(valid[:, j])[0]
            if ok.size == 0:
                raise ValueError(f"no sample with positive speed at position {xs[j]:g}")
            bad = np.nonzero(~valid[:, j])[0]
            # nearest valid time; ties go to the earlier sample
            pos = np.searchsorted(times[ok], times[bad])
            lo = ok[np.clip(pos - 1, 0, ok.size - 1)]
            hi = ok[np.clip(pos, 0, ok.size - 1)]
            pick = np.where(np.abs(times[bad] - times[lo]) <= np.abs(times[hi] - times[bad]), lo, hi)
            rho_raw[bad, j] = rho_raw[pick, j]
    rho_max = float(rho_raw.max())
    if not rho_max > 0:
        raise ValueError("all densities are zero")
    rho = rho_raw / rho_max
    u = speed / u_max
    length = float(xs[-1] - xs[0])
    if time_scale == "hours":
        tf = 3600.0
    elif time_scale == "seconds":
        tf = 1.0
    elif time_scale == "unit":
        tf = float(times[-1] - times[0])
    else:
        raise ValueError(f"unknown time_scale {time_scale!r}")
    return NormalizedDataset(
        times=(times - times[0]) / tf,
        positions=(xs - xs[0]) / length,
        rho=rho,
        u=u,
        q=rho * u,
        rho_max_obs=rho_max,
        u_max_obs=u_max,
        length=length,
        x_origin=float(xs[0]),
        t_origin=float(times[0]),
        time_factor=tf,
        imputed=imputed,
    )


# ---------------------------------------------------------------------------
# Spatial operations on profiles (last axis is position)
# ---------------------------------------------------------------------------


def finite_diff_derivative(rho: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Central differences inside, one-sided differences at both ends."""
    rho = np.asarray(rho, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        raise ValueError("need at least 2 positions")
    out = np.empty_like(rho)
    out[..., 0] = (rho[..., 1] - rho[..., 0]) / (x[1] - x[0])
    out[..., -1] = (rho[..., -1] - rho[..., -2]) / (x[-1] - x[-2])
    if x.size > 2:
        out[..., 1:-1] = (rho[..., 2:] - rho[..., :-2]) / (x[2:] - x[:-2])
    return out


def box_filter(profile: np.ndarray, radius: int = 1) -> np.ndarray:
    """Moving average over ``2 radius + 1`` neighbours; ends average what exists."""
    profile = np.asarray(profile, dtype=float)
    n = profile.shape[-1]
    if n < 2:
        raise ValueError("need at least 2 samples")
    if radius < 0:
        raise ValueError("radius must be non-negative")
    if radius == 0:
        return profile.copy()
    csum = np.concatenate([np.zeros(profile.shape[:-1] + (1,)), np.cumsum(profile, axis=-1)], axis=-1)
    j = np.arange(n)
    lo = np.maximum(j - radius, 0)
    hi = np.minimum(j + radius, n - 1) + 1
    return (csum[..., hi] - csum[..., lo]) / (hi - lo)


def with_derivative(dataset: NormalizedDataset, smooth: bool = False, radius: int = 1) -> NormalizedDataset:
    """Return a copy with ``drho`` filled in, optionally box-filtering density first.

    When smoothing, the filtered density replaces ``rho`` and the flow is
    recomputed as ``rho * u`` so the flow identity keeps holding.
    """
    rho = box_filter(dataset.rho, radius) if smooth else dataset.rho
    drho = finite_diff_derivative(rho, dataset.positions)
    return replace(dataset, rho=rho, q=rho * dataset.u if smooth else dataset.q, drho=drho)


def retained_mask(positions: np.ndarray, gamma: float) -> np.ndarray:
    """Positions whose whole look-ahead window lies inside the data range."""
    positions = np.asarray(positions, dtype=float)
    return positions < positions[-1] - gamma


def convolution_matrix(positions: np.ndarray, kernel: Kernel, n_points: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Weights ``W`` such that ``W @ f`` is the look-ahead average of the piecewise-linear interpolant of ``f``.

    Rows for excluded positions are zero; the retained mask is returned too.
    """
    x = np.asarray(positions, dtype=float)
    if kernel.gamma >= x[-1] - x[0]:
        raise ValueError(f"gamma={kernel.gamma:g} must be smaller than the data range {x[-1] - x[0]:g}")
    keep = retained_mask(x, kernel.gamma)
    W = np.zeros((x.size, x.size))
    for i in np.nonzero(keep)[0]:
        y, w = kernel_quadrature(kernel, x[i], cuts=x, n_points=n_points)
        j = np.clip(np.searchsorted(x, y, side="right") - 1, 0, x.size - 2)
        lam = (y - x[j]) / (x[j + 1] - x[j])
        np.add.at(W[i], j, w * (1.0 - lam))
        np.add.at(W[i], j + 1, w * lam)
        W[i] /= w.sum()
    return W, keep


def empirical_convolution(
    dataset: NormalizedDataset,
    kappa: float,
    saturation: SaturationParams,
    kernel: Kernel,
    n_points: int = 8,
) -> tuple[np.ndarray, np.ndarray]:
    """Look-ahead average of the empirical perceived density.

    Returns ``(R, retained)``: ``R`` has the dataset's shape with NaN at
    excluded positions and ``retained`` is the boolean position mask.
    """
    if dataset.drho is None:
        raise ValueError("dataset has no density derivative; call with_derivative first")
    W, keep = convolution_matrix(dataset.positions, kernel, n_points)
    hat = perceived_density(dataset.rho, dataset.drho, kappa, saturation)
    R = hat @ W.T
    R[:, ~keep] = np.nan
    return R, keep


# ---------------------------------------------------------------------------
# Fundamental-diagram bins
# ---------------------------------------------------------------------------


@dataclass
class BinSummary:
    edges: np.ndarray
    count: np.ndarray
    mu: np.ndarray
    sd: np.ndarray

    @property
    def n_bins(self) -> int:
        return len(self.count)

    @property
    def nonempty(self) -> np.ndarray:
        return self.count > 0

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "count", "mu", "sd"])
            for m in range(self.n_bins):
                w.writerow([repr(float(self.edges[m])), repr(float(self.edges[m + 1])), int(self.count[m]),
                            "" if self.count[m] == 0 else repr(float(self.mu[m])),
                            "" if self.count[m] == 0 else repr(float(self.sd[m]))])


def regime_mask(rho: np.ndarray, regime: Regime = "all", threshold: float = 0.2) -> np.ndarray:
    rho = np.asarray(rho, dtype=float)
    if regime == "all":
        return np.ones(rho.shape, dtype=bool)
    if regime == "free":
        return rho < threshold
    if regime == "congested":
        return rho >= threshold
    raise ValueError(f"unknown regime {regime!r}")


def bin_index(rho: np.ndarray, n_bins: int, rho_max: float = 1.0) -> np.ndarray:
    """Bin of each density on ``[0, rho_max]`` (last bin closed); -1 outside."""
    rho = np.asarray(rho, dtype=float)
    ok = (rho >= 0) & (rho <= rho_max) & np.isfinite(rho)
    idx = np.floor(np.where(ok, rho, 0.0) / rho_max * n_bins).astype(int)
    idx = np.where(rho == rho_max, n_bins - 1, idx)
    return np.where(ok, idx, -1)


def bin_summaries(
    rho: np.ndarray,
    flow: np.ndarray,
    n_bins: int = 40,
    rho_max: float = 1.0,
    regime: Regime = "all",
    threshold: float = 0.2,
    mask: np.ndarray | None = None,
    ddof: int = 0,
) -> BinSummary:
    """Per-bin count, mean and standard deviation of flow over density bins.

    ``mask`` restricts the samples (for instance to retained positions);
    ``ddof=0`` gives the population standard deviation.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    rho = np.asarray(rho, dtype=float)
    shape = rho.shape
    rho = rho.ravel()
    flow = np.asarray(flow, dtype=float).ravel()
    sel = regime_mask(rho, regime, threshold) & np.isfinite(flow)
    if mask is not None:
        sel &= np.broadcast_to(np.asarray(mask, dtype=bool), shape).ravel()
    idx = bin_index(rho, n_bins, rho_max)
    sel &= idx >= 0
    idx, vals = idx[sel], flow[sel]
    count = np.bincount(idx, minlength=n_bins)
    s1 = np.bincount(idx, weights=vals, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mu = np.where(count > 0, s1 / np.maximum(count, 1), np.nan)
        dev = vals - mu[idx]
        s2 = np.bincount(idx, weights=dev * dev, minlength=n_bins)
        denom = count - ddof
        sd = np.where(denom > 0, np.sqrt(s2 / np.maximum(denom, 1)), np.where(count > 0, 0.0, np.nan))
    edges = np.linspace(0.0, rho_max, n_bins + 1)
    return BinSummary(edges=edges, count=count, mu=mu, sd=sd)
