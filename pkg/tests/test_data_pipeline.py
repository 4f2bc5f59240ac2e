import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nonlocal_traffic.data_pipeline import (
    DataFormatError,
    NormalizedDataset,
    RawMeasurementTable,
    Units,
    bin_index,
    bin_summaries,
    box_filter,
    convolution_matrix,
    empirical_convolution,
    finite_diff_derivative,
    ingest_csv,
    load_normalized,
    normalize,
    regime_mask,
    retained_mask,
    with_derivative,
)
from nonlocal_traffic.model import Kernel, SaturationParams


def _write(path, text, units=None):
    path.write_text(text)
    if units is not None:
        path.with_suffix(".json").write_text(json.dumps(units))
    return path


def _grid_csv(times, xs, speed, flow):
    rows = ["t,x,speed,flow"]
    for i, t in enumerate(times):
        for j, x in enumerate(xs):
            rows.append(f"{t},{x},{speed[i][j]},{flow[i][j]}")
    return "\n".join(rows) + "\n"


# --- ingestion -----------------------------------------------------------------


def test_ingest_two_rows(tmp_path):
    p = _write(tmp_path / "d.csv", "t,x,speed,flow\n0,0,10,5\n0,100,12,6\n")
    table = ingest_csv(p)
    assert len(table) == 2
    assert np.allclose(table.x, [0.0, 100.0])
    assert np.allclose(table.flow, [5 / 3600, 6 / 3600])


def test_ingest_sorts_by_time_then_position(tmp_path):
    p = _write(tmp_path / "d.csv", "x,t,speed,flow\n5,1,1,1\n0,1,2,2\n5,0,3,3\n0,0,4,4\n")
    table = ingest_csv(p)
    assert list(table.t) == [0, 0, 1, 1]
    assert list(table.x) == [0, 5, 0, 5]
    assert list(table.speed) == [4, 3, 2, 1]


def test_ingest_missing_column(tmp_path):
    p = _write(tmp_path / "d.csv", "t,x,flow\n0,0,5\n")
    with pytest.raises(DataFormatError) as info:
        ingest_csv(p)
    assert info.value.problems == [(1, "missing column 'speed'")]
    assert "speed" in str(info.value)


def test_ingest_reports_every_bad_row(tmp_path):
    text = "t,x,speed,flow\n0,0,abc,5\n0,1,1,nan\n0,2,-1,1\n0,3,1,1\n0,3,2,2\n0,4\n"
    p = _write(tmp_path / "d.csv", text)
    with pytest.raises(DataFormatError) as info:
        ingest_csv(p)
    lines = [ln for ln, _ in info.value.problems]
    assert lines == [2, 3, 4, 7, 6]
    msgs = dict((ln, m) for ln, m in info.value.problems)
    assert "non-numeric speed" in msgs[2]
    assert "non-finite flow" in msgs[3]
    assert "first seen on line 5" in msgs[6]


def test_ingest_empty_file(tmp_path):
    with pytest.raises(DataFormatError):
        ingest_csv(_write(tmp_path / "d.csv", ""))
    with pytest.raises(DataFormatError):
        ingest_csv(_write(tmp_path / "e.csv", "t,x,speed,flow\n"))


def test_mph_conversion_via_sidecar(tmp_path):
    p = _write(tmp_path / "d.csv", "t,x,speed,flow\n0,0,10,5\n", {"speed_unit": "mph", "x_unit": "km",
                                                                     "time_unit": "min", "section_length": 2})
    table = ingest_csv(p)
    assert table.speed[0] == pytest.approx(4.4704)
    assert table.section_length == pytest.approx(2000.0)


def test_units_validation():
    with pytest.raises(DataFormatError):
        Units(speed="furlong/fortnight")
    with pytest.raises(DataFormatError):
        Units.from_mapping({"speed_units": "mph"})
    assert Units.from_mapping({"flow_unit": "veh/s"}).flow == "veh/s"


# --- normalization -------------------------------------------------------------


def _table(speed, flow, times=None, xs=None):
    speed = np.asarray(speed, dtype=float)
    flow = np.asarray(flow, dtype=float)
    nt, nx = speed.shape
    times = np.arange(nt, dtype=float) * 30.0 if times is None else np.asarray(times, dtype=float)
    xs = np.arange(nx, dtype=float) * 100.0 if xs is None else np.asarray(xs, dtype=float)
    T, X = np.meshgrid(times, xs, indexing="ij")
    return RawMeasurementTable(T.ravel(), X.ravel(), speed.ravel(), flow.ravel())


def test_uniform_data_normalizes_to_one():
    ds = normalize(_table(np.full((3, 4), 20.0), np.full((3, 4), 10.0)))
    for a in (ds.rho, ds.u, ds.q):
        assert np.allclose(a, 1.0)
    assert np.allclose(ds.positions, [0, 1 / 3, 2 / 3, 1])
    assert ds.times[1] == pytest.approx(30.0 / 3600.0)
    assert ds.rho_max_obs == pytest.approx(0.5)


@settings(max_examples=40)
@given(
    speed=arrays(np.float64, (4, 5), elements=st.floats(1.0, 40.0)),
    flow=arrays(np.float64, (4, 5), elements=st.floats(0.0, 3.0)),
)
def test_normalized_fields_are_consistent(speed, flow):
    ds = normalize(_table(speed, flow + 0.01))
    assert ds.rho.max() == pytest.approx(1.0) and ds.u.max() == pytest.approx(1.0)
    assert np.all((ds.rho >= 0) & (ds.rho <= 1)) and np.all((ds.u >= 0) & (ds.u <= 1))
    assert np.allclose(ds.q, ds.rho * ds.u)
    assert np.allclose(ds.physical_density(), (flow + 0.01) / speed)
    assert np.allclose(ds.physical_speed(), speed)


def test_zero_speed_is_imputed_from_nearest_time():
    speed = np.array([[10.0, 10.0], [0.0, 10.0], [10.0, 10.0], [10.0, 10.0]])
    flow = np.array([[2.0, 1.0], [0.0, 1.0], [4.0, 1.0], [8.0, 1.0]])
    ds = normalize(_table(speed, flow))
    assert ds.imputed.sum() == 1 and ds.imputed[1, 0]
    # equidistant neighbours at t=0 and t=2: the earlier one wins
    assert ds.physical_density()[1, 0] == pytest.approx(0.2)


def test_normalize_rejects_incomplete_grid():
    table = RawMeasurementTable(np.array([0.0, 0.0, 1.0]), np.array([0.0, 1.0, 0.0]),
                                np.ones(3), np.ones(3))
    with pytest.raises(DataFormatError):
        normalize(table)


def test_normalize_time_scales():
    table = _table(np.full((3, 2), 5.0), np.ones((3, 2)), times=[100.0, 160.0, 400.0])
    assert np.allclose(normalize(table, time_scale="seconds").times, [0, 60, 300])
    assert np.allclose(normalize(table, time_scale="unit").times, [0, 0.2, 1])
    with pytest.raises(ValueError):
        normalize(table, time_scale="fortnights")


def test_normalized_round_trip(tmp_path):
    ds = with_derivative(normalize(_table(np.linspace(5, 20, 12).reshape(3, 4), np.ones((3, 4)))))
    ds.boundary_left = np.array([0.1, 0.2, 0.3])
    ds.to_csv(tmp_path / "n.csv")
    back = load_normalized(tmp_path / "n.csv")
    for name in ("times", "positions", "rho", "u", "q", "drho", "boundary_left"):
        assert np.array_equal(getattr(back, name), getattr(ds, name))
    assert back.boundary_right is None
    assert back.factors() == ds.factors()


def test_dataset_shape_checks():
    with pytest.raises(ValueError):
        NormalizedDataset(np.arange(2), np.arange(3), np.zeros((3, 2)), np.zeros((3, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        NormalizedDataset(np.arange(2), np.arange(3), np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 3)),
                          boundary_left=np.zeros(3))


# --- derivatives and filters ---------------------------------------------------


@given(a=st.floats(-5, 5), b=st.floats(-5, 5))
def test_derivative_exact_for_linears(a, b):
    x = np.array([0.0, 0.1, 0.35, 0.4, 1.0])
    assert np.allclose(finite_diff_derivative(a * x + b, x), a, atol=1e-9)


def test_derivative_of_quadratic_and_constant():
    x = np.linspace(0.0, 1.0, 11)
    d = finite_diff_derivative(x**2, x)
    assert np.allclose(d[1:-1], 2 * x[1:-1], atol=1e-12)
    assert np.allclose(finite_diff_derivative(np.full(11, 0.3), x), 0.0)
    two_d = finite_diff_derivative(np.vstack([x, 2 * x]), x)
    assert np.allclose(two_d, [[1.0], [2.0]])


def test_box_filter_examples():
    assert np.allclose(box_filter(np.array([1.0, 4.0, 1.0])), [2.5, 2.0, 2.5])
    assert np.allclose(box_filter(np.full(6, 0.7)), 0.7)
    assert np.allclose(box_filter(np.array([1.0, 2.0]), radius=0), [1.0, 2.0])
    assert np.allclose(box_filter(np.arange(7.0), radius=2)[3], 3.0)
    with pytest.raises(ValueError):
        box_filter(np.array([1.0, 2.0]), radius=-1)


def test_smoothing_keeps_flow_identity():
    ds = normalize(_table(np.array([[10.0, 20.0, 10.0, 20.0]] * 2), np.array([[4.0, 2.0, 4.0, 1.0]] * 2)))
    sm = with_derivative(ds, smooth=True)
    assert np.allclose(sm.q, sm.rho * sm.u)
    assert np.allclose(sm.rho, box_filter(ds.rho))


# --- look-ahead convolution ------------------------------------------------------


def test_retained_mask_is_strict():
    x = np.linspace(0.0, 1.0, 11)
    assert list(np.nonzero(~retained_mask(x, 0.2))[0]) == [8, 9, 10]


def test_convolution_matrix_reproduces_constants_and_linears():
    x = np.linspace(0.0, 1.0, 41)
    for shape in ("linear", "quadratic", "exponential"):
        W, keep = convolution_matrix(x, Kernel(shape, 0.1))
        assert np.allclose(W[keep].sum(axis=1), 1.0)
        assert np.all(W[~keep] == 0)
    W, keep = convolution_matrix(x, Kernel("linear", 0.1))
    assert np.allclose((W @ (0.2 + 0.5 * x))[keep], (0.2 + 0.5 * x + 0.5 * 0.1 / 3)[keep], atol=1e-12)


def test_convolution_rejects_long_kernel():
    with pytest.raises(ValueError):
        convolution_matrix(np.linspace(0, 1, 5), Kernel("linear", 1.0))


def test_empirical_convolution_reductions():
    x = np.linspace(0.0, 1.0, 21)
    rho = np.vstack([np.full(21, 0.4), 0.3 + 0.2 * np.sin(3 * x)])
    ds = with_derivative(NormalizedDataset(np.array([0.0, 1.0]), x, rho, np.ones_like(rho), rho))
    R, keep = empirical_convolution(ds, 0.7, SaturationParams(), Kernel("quadratic", 0.15))
    assert np.allclose(R[0, keep], 0.4)
    assert np.all(np.isnan(R[:, ~keep]))
    R0, _ = empirical_convolution(ds, 0.0, SaturationParams(), Kernel("quadratic", 0.15))
    W, _ = convolution_matrix(x, Kernel("quadratic", 0.15))
    assert np.allclose(R0[1, keep], (W @ rho[1])[keep])
    with pytest.raises(ValueError):
        empirical_convolution(NormalizedDataset(np.array([0.0, 1.0]), x, rho, rho, rho), 0.1,
                              SaturationParams(), Kernel("linear", 0.1))


# --- bins ----------------------------------------------------------------------


def test_single_bin_statistics():
    s = bin_summaries(np.array([0.51, 0.52, 0.53]), np.array([1.0, 2.0, 3.0]), n_bins=4)
    assert list(s.count) == [0, 0, 3, 0]
    assert s.mu[2] == pytest.approx(2.0)
    assert s.sd[2] == pytest.approx(0.81649658092772603273, rel=1e-14)
    assert np.isnan(s.mu[0]) and np.isnan(s.sd[0])
    assert bin_summaries(np.array([0.51, 0.52, 0.53]), np.array([1.0, 2.0, 3.0]), 4, ddof=1).sd[2] == pytest.approx(1.0)


def test_regime_filter():
    rho = np.array([0.1, 0.15, 0.2, 0.6, 0.9])
    s = bin_summaries(rho, np.ones(5), n_bins=10, regime="congested", threshold=0.2)
    assert s.count.sum() == 3
    assert list(regime_mask(rho, "free")) == [True, True, False, False, False]
    with pytest.raises(ValueError):
        regime_mask(rho, "jammed")


def test_bin_index_edges():
    assert list(bin_index(np.array([0.0, 0.25, 0.999, 1.0, 1.01, -0.1, np.nan]), 4)) == [0, 1, 3, 3, -1, -1, -1]


@settings(max_examples=50)
@given(
    rho=arrays(np.float64, 60, elements=st.floats(0.0, 1.0)),
    flow=arrays(np.float64, 60, elements=st.floats(0.0, 1.0)),
    n_bins=st.integers(1, 12),
)
def test_bins_match_independent_recomputation(rho, flow, n_bins):
    s = bin_summaries(rho, flow, n_bins)
    assert s.count.sum() == rho.size
    for m in range(n_bins):
        lo, hi = s.edges[m], s.edges[m + 1]
        sel = (rho >= lo) & ((rho < hi) if m < n_bins - 1 else (rho <= hi))
        assert s.count[m] == sel.sum()
        if sel.any():
            assert s.mu[m] == pytest.approx(flow[sel].mean(), abs=1e-12)
            assert s.sd[m] == pytest.approx(flow[sel].std(), abs=1e-9)


def test_bin_mask_restricts_samples(tmp_path):
    rho = np.array([[0.1, 0.6], [0.1, 0.6]])
    flow = np.array([[1.0, 2.0], [3.0, 4.0]])
    s = bin_summaries(rho, flow, n_bins=2, mask=np.array([True, False]))
    assert list(s.count) == [2, 0]
    s.to_csv(tmp_path / "b.csv")
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "bin_lo,bin_hi,count,mu,sd"
    assert lines[2].endswith(",0,,")
    assert math.isclose(float(lines[1].split(",")[3]), 2.0)
