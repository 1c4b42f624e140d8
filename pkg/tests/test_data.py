import io
from datetime import date, datetime, timedelta

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowtransfer import data as D
from flowtransfer.errors import ContractError, FitError, IngestError, SpecificationError


def _dataset(values: np.ndarray, name="road") -> D.RoadDataset:
    """values: (n_slots, 9)"""
    start = datetime(2017, 1, 1)
    loops = [D.FlowSeries(f"L{k}", start, values[:, k].astype(float)) for k in range(9)]
    return D.RoadDataset(name, loops)


def _csv_text(n_slots=96, skip=None, negative_at=None):
    ids = [f"L{k}" for k in range(9)]
    lines = ["timestamp,loop_id,flow"]
    start = datetime(2017, 3, 1)
    for t in range(n_slots):
        ts = (start + timedelta(minutes=15 * t)).isoformat()
        for k, lid in enumerate(ids):
            if skip == (t, lid):
                continue
            flow = -3 if negative_at == (t, lid) else 10 * k + t
            lines.append(f"{ts},{lid},{flow}")
    return "\n".join(lines) + "\n", ids


def test_parse_minimal_day():
    text, ids = _csv_text()
    ds = D.parse_flow_csv(io.StringIO(text), ids, road_name="r")
    assert ds.n_slots == 96
    assert ds.loop_ids == ids
    assert ds.start == datetime(2017, 3, 1)
    assert ds.matrix[10, 2] == 20 + 10


def test_parse_gap_is_rejected_with_loop_and_timestamp():
    text, ids = _csv_text(skip=(40, "L6"))
    with pytest.raises(IngestError) as err:
        D.parse_flow_csv(io.StringIO(text), ids)
    msg = str(err.value)
    assert "L6" in msg and "2017-03-01T10:00:00" in msg


def test_parse_gap_repair_forward_fills():
    text, ids = _csv_text(skip=(40, "L6"))
    ds = D.parse_flow_csv(io.StringIO(text), ids, repair_gaps=4)
    assert ds.matrix[40, 6] == ds.matrix[39, 6]


@pytest.mark.parametrize(
    "mutate, fragment",
    [
        (lambda s: s.replace("2017-03-01T00:15:00,L3,31", "2017-03-01T00:15:00,L3,abc"), "row"),
        (lambda s: s.replace("timestamp,loop_id,flow", "time,loop,flow"), "header"),
        (lambda s: s.replace("2017-03-01T00:15:00,L3", "yesterday,L3"), "timestamp"),
        (lambda s: s.replace(",L8,", ",L99,", 1), "L99"),
    ],
)
def test_parse_errors(mutate, fragment):
    text, ids = _csv_text()
    with pytest.raises(IngestError) as err:
        D.parse_flow_csv(io.StringIO(mutate(text)), ids)
    assert fragment in str(err.value)


def test_parse_negative_flow_names_row():
    text, ids = _csv_text(negative_at=(0, "L0"))
    with pytest.raises(IngestError, match="row 2: negative"):
        D.parse_flow_csv(io.StringIO(text), ids)


def test_parse_missing_loop():
    text, ids = _csv_text()
    text = "\n".join(line for line in text.splitlines() if ",L5," not in line)
    with pytest.raises(IngestError, match="L5"):
        D.parse_flow_csv(io.StringIO(text), ids)


def test_manifest_must_have_nine_loops(tmp_path):
    p = tmp_path / "m.manifest"
    p.write_text("a\nb\n")
    with pytest.raises(IngestError):
        D.read_manifest(p)


def test_write_parse_round_trip(tmp_path):
    cfg = D.SyntheticConfig(days=8, seed=3, road_name="alpha",
                            special_events=[D.SpecialEvent(2, 3, scale=1.2, offset=5.0)])
    ds = D.generate_synthetic(cfg)
    path = tmp_path / "alpha.csv"
    D.write_flow_csv(ds, path)
    back = D.parse_flow_csv(path)
    assert back == ds
    lines = path.read_text().splitlines()
    assert lines[0] == "timestamp,loop_id,flow"
    assert len(lines) - 1 == 9 * 8 * 96
    assert (tmp_path / "alpha.manifest").read_text().splitlines() == ds.loop_ids


def test_write_two_days_row_count():
    ds = _dataset(np.ones((192, 9)))
    text, manifest = D.dataset_to_text(ds)
    assert len(text.splitlines()) == 1 + 9 * 192
    assert manifest.splitlines() == ds.loop_ids


def test_write_empty_dataset_is_header_only():
    ds = _dataset(np.ones((0, 9)))
    text, _ = D.dataset_to_text(ds)
    assert text == "timestamp,loop_id,flow\n"


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), lag=st.integers(0, 3), noise=st.floats(0, 20))
def test_ingest_totality(seed, lag, noise):
    ds = D.generate_synthetic(D.SyntheticConfig(days=8, seed=seed, propagation_lag=lag, noise_std=noise))
    text, manifest = D.dataset_to_text(ds)
    back = D.parse_flow_csv(io.StringIO(text), manifest.split(), road_name=ds.road_name)
    assert back == ds


# --------------------------------------------------------------------------- windows


def test_window_count():
    ds = _dataset(np.ones((100, 9)))
    assert len(D.build_windows(ds, (5, 100))) == 95
    assert len(D.build_windows(ds, range(5, 100))) == 95


def test_constant_series_windows():
    ds = _dataset(np.full((50, 9), 7.0))
    w = D.build_windows(ds, (5, 50))
    assert np.all(w.features == 7.0) and np.all(w.targets == 7.0)


def test_ramp_alignment():
    ramp = np.repeat(np.arange(200, dtype=float)[:, None], 9, axis=1)
    ds = _dataset(ramp)
    batch = D.build_windows(ds, (5, 200))
    for win in batch:
        t = win.slot_index
        assert win.features.shape == (5, 9)
        assert np.array_equal(win.features[:, 0], np.arange(t - 5, t))
        assert win.target == t
        assert win.features[-1, 4] + 1 == win.target


def test_features_read_every_loop():
    M = np.arange(60 * 9, dtype=float).reshape(60, 9)
    ds = _dataset(M)
    w = D.build_windows(ds, (10, 11))[0]
    np.testing.assert_array_equal(w.features, M[5:10])
    assert w.target == M[10, 4]


def test_window_range_underflow():
    ds = _dataset(np.ones((50, 9)))
    with pytest.raises(ContractError):
        D.build_windows(ds, (4, 50))
    with pytest.raises(ContractError):
        D.build_windows(ds, (5, 51))


# --------------------------------------------------------------------------- normalizer


def test_normalizer_midpoint_and_out_of_range():
    M = np.tile(np.linspace(0, 200, 11)[:, None], (1, 9))
    ds = _dataset(M)
    n = D.fit_normalizer(ds, (0, 11))
    assert n.apply(np.full(9, 100.0))[3] == 0.5
    assert n.apply_target(250.0) == 1.25


def test_normalizer_round_trip():
    rng = np.random.default_rng(0)
    M = rng.uniform(0, 300, (96, 9))
    n = D.fit_normalizer(_dataset(M), (0, 96))
    x = rng.uniform(-500, 1000, (1000, 9))
    np.testing.assert_allclose(n.invert(n.apply(x)), x, rtol=1e-9, atol=0)
    y = rng.uniform(0, 500, 1000)
    np.testing.assert_allclose(n.invert_target(n.apply_target(y)), y, rtol=1e-9)


def test_normalizer_strictly_monotone():
    rng = np.random.default_rng(1)
    n = D.fit_normalizer(_dataset(rng.uniform(0, 300, (96, 9))), (0, 96))
    x = np.sort(rng.uniform(0, 300, 500))
    for k in range(9):
        col = np.zeros((500, 9))
        col[:, k] = x
        assert np.all(np.diff(n.apply(col)[:, k]) > 0)


def test_normalizer_degenerate_loop_named():
    M = np.random.default_rng(0).uniform(0, 10, (20, 9))
    M[:, 7] = 3.0
    with pytest.raises(FitError, match="L7"):
        D.fit_normalizer(_dataset(M), (0, 20))


def test_normalizer_no_leakage():
    rng = np.random.default_rng(2)
    M = rng.uniform(0, 100, (300, 9))
    a = D.fit_normalizer(_dataset(M), (0, 150))
    M2 = M.copy()
    M2[150:] = rng.uniform(1000, 2000, (150, 9))
    b = D.fit_normalizer(_dataset(M2), (0, 150))
    assert np.array_equal(a.mins, b.mins) and np.array_equal(a.maxs, b.maxs)


def test_normalizer_dict_round_trip():
    n = D.Normalizer(np.arange(9.0), np.arange(9.0) + 10)
    m = D.Normalizer.from_dict(n.to_dict())
    assert np.array_equal(n.mins, m.mins) and np.array_equal(n.maxs, m.maxs)


# --------------------------------------------------------------------------- calendar


def test_split_by_calendar():
    ds = _dataset(np.ones((730 * 96, 9)))
    out = D.split_by_calendar(ds, {"year1": (0, 365), "january_year2": (365, 396), "nothing": (400, 400)})
    assert out["year1"] == (0, 35040)
    assert out["january_year2"] == (35040, 38016)
    assert out["january_year2"][1] - out["january_year2"][0] == 2976
    assert out["nothing"][0] == out["nothing"][1]


def test_split_accepts_dates():
    ds = _dataset(np.ones((730 * 96, 9)))
    out = D.split_by_calendar(ds, {"jan": (date(2018, 1, 1), "2018-02-01")})
    assert out["jan"] == (35040, 38016)


def test_split_errors():
    ds = _dataset(np.ones((10 * 96, 9)))
    with pytest.raises(ContractError):
        D.split_by_calendar(ds, {"late": (5, 11)})
    with pytest.raises(ContractError):
        D.split_by_calendar(ds, {"a": (0, 5), "b": (4, 8)})


def test_standard_ranges_scale():
    r = D.standard_ranges(365)
    assert r["january_year2"] == (365, 396)
    r = D.standard_ranges(28)
    assert r["year1"] == (0, 28) and r["january_year2"] == (28, 35)


# --------------------------------------------------------------------------- synthetic


def _plain(**kw):
    base = dict(days=21, seed=0, noise_std=0.0, propagation_lag=0, drift=0.0)
    base.update(kw)
    return D.SyntheticConfig(**base)


def test_synthetic_template_identical_and_weekly_periodic():
    ds = D.generate_synthetic(_plain())
    M = ds.matrix
    for k in range(1, 9):
        assert np.array_equal(M[:, k], M[:, 0])
    x = M[:, 0]
    assert np.array_equal(x[672:], x[:-672])
    # autocorrelation at one week is exactly 1 (series equals its shift)
    a, b = x[672:] - x[672:].mean(), x[:-672] - x[:-672].mean()
    assert np.dot(a, b) / np.sqrt(np.dot(a, a) * np.dot(b, b)) == pytest.approx(1.0, abs=1e-15)


def test_synthetic_weekend_scaled():
    ds = D.generate_synthetic(_plain(start=date(2018, 1, 1), weekend_scale=0.5))  # a Monday
    x = ds.matrix[:, 0]
    np.testing.assert_allclose(x[5 * 96 : 6 * 96], 0.5 * x[:96])


def test_synthetic_deterministic():
    cfg = D.SyntheticConfig(days=10, seed=9, noise_std=8.0)
    assert D.generate_synthetic(cfg) == D.generate_synthetic(cfg)
    other = D.generate_synthetic(D.SyntheticConfig(days=10, seed=10, noise_std=8.0))
    assert not np.array_equal(other.matrix, D.generate_synthetic(cfg).matrix)


@pytest.mark.parametrize("lag", [1, 2])
def test_synthetic_propagation_shift(lag):
    ds = D.generate_synthetic(D.SyntheticConfig(days=9, seed=1, noise_std=0.0, propagation_lag=lag, drift=0.3,
                                                 special_events=[D.SpecialEvent(3, 4, scale=1.5)]))
    M = ds.matrix
    for k in range(8):
        assert np.array_equal(M[lag:, k + 1], M[:-lag, k])


def test_synthetic_events_and_drift():
    base = D.generate_synthetic(_plain())
    prof = np.full(96, 4.0)
    ev = D.generate_synthetic(_plain(special_events=[D.SpecialEvent(7, 8, scale=2.0, offset=1.0, profile=prof)]))
    d = slice(7 * 96, 8 * 96)
    np.testing.assert_allclose(ev.matrix[d, 0], 2.0 * base.matrix[d, 0] + 5.0)
    assert np.array_equal(ev.matrix[:7 * 96], base.matrix[:7 * 96])
    drift = D.generate_synthetic(_plain(drift=0.365, days_per_year=365))
    # +0.1% per day of elapsed time
    assert drift.matrix[10 * 96, 0] == pytest.approx(base.matrix[10 * 96, 0] * 1.01)


def test_synthetic_nonnegative():
    ds = D.generate_synthetic(D.SyntheticConfig(days=8, seed=0, noise_std=200.0))
    assert ds.matrix.min() >= 0.0


@pytest.mark.parametrize("kw", [dict(days=7), dict(days=10, noise_std=-1.0), dict(days=10, base_profile=np.ones(5))])
def test_synthetic_invalid_config(kw):
    with pytest.raises(SpecificationError):
        D.generate_synthetic(D.SyntheticConfig(**kw))


def test_road_dataset_requires_nine_aligned_loops():
    start = datetime(2017, 1, 1)
    with pytest.raises(ContractError):
        D.RoadDataset("r", [D.FlowSeries(f"L{k}", start, np.ones(5)) for k in range(8)])
    loops = [D.FlowSeries(f"L{k}", start, np.ones(5)) for k in range(9)]
    loops[3] = D.FlowSeries("L3", start, np.ones(6))
    with pytest.raises(ContractError):
        D.RoadDataset("r", loops)
