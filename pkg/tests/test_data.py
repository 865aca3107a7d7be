import logging

import numpy as np
import pytest
from scipy import stats

from dost.data import (
    DataError,
    DatasetMeta,
    MissingFileError,
    NormStats,
    SeriesFrame,
    SyntheticSpec,
    fit_stats,
    generate_synthetic,
    load_dataset,
    save_dataset,
    split_phases,
    windows,
)


def _frame(values, interval=60):
    T, N, d = values.shape
    return SeriesFrame(values, DatasetMeta(N, d, interval, T))


def test_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    vals = rng.normal(size=(20, 3, 2)) * 1e3
    adj = rng.uniform(size=(3, 3))
    adj = (adj + adj.T) / 2
    save_dataset(_frame(vals), adj, tmp_path)
    frame, adj_back = load_dataset(tmp_path)
    assert np.max(np.abs(frame.values - vals)) <= 1e-12
    np.testing.assert_allclose(adj_back, adj, atol=1e-12)
    assert frame.meta.intervals_per_week == 168


def test_hand_written_fixture(tmp_path):
    (tmp_path / "meta.txt").write_text(
        "# demo\nn_locations=2\nn_features=1\ninterval_minutes=15\nn_steps=3\nfeature_names=demand\n"
    )
    (tmp_path / "series.csv").write_text("loc0_f0,loc1_f0\n1,10\n2,20\n3.5,30\n")
    (tmp_path / "adjacency.csv").write_text("0,1\n3,0\n")
    frame, adj = load_dataset(tmp_path)
    np.testing.assert_array_equal(frame.values[:, :, 0], [[1, 10], [2, 20], [3.5, 30]])
    np.testing.assert_array_equal(adj, [[0, 2], [2, 0]])
    assert frame.meta.feature_names == ["demand"] and frame.meta.intervals_per_week == 672


def _write_valid(tmp_path):
    save_dataset(_frame(np.ones((4, 2, 1))), np.zeros((2, 2)), tmp_path)


def test_missing_adjacency(tmp_path):
    _write_valid(tmp_path)
    (tmp_path / "adjacency.csv").unlink()
    with pytest.raises(MissingFileError, match="adjacency.csv"):
        load_dataset(tmp_path)


def test_parse_errors_name_location(tmp_path):
    _write_valid(tmp_path)
    (tmp_path / "series.csv").write_text("loc0_f0,loc1_f0\n1,1\n1,abc\n1,1\n1,1\n")
    with pytest.raises(DataError, match=r"row 3, column 2"):
        load_dataset(tmp_path)
    (tmp_path / "series.csv").write_text("loc0_f0,locX_f0\n1,1\n1,1\n1,1\n1,1\n")
    with pytest.raises(DataError, match="header mismatch at column 2"):
        load_dataset(tmp_path)
    (tmp_path / "series.csv").write_text("loc0_f0,loc1_f0\n1,1\n1\n1,1\n1,1\n")
    with pytest.raises(DataError, match="row 3"):
        load_dataset(tmp_path)


def test_meta_validation():
    with pytest.raises(DataError):
        DatasetMeta(2, 1, 11, 10)
    with pytest.raises(DataError):
        SeriesFrame(np.full((3, 2, 1), np.nan), DatasetMeta(2, 1, 60, 3))


def test_split_examples():
    s = split_phases(800)
    assert (len(s.warmup_train), len(s.warmup_val), len(s.online)) == (160, 40, 600)
    s = split_phases(8)
    assert len(s.warmup_train) + len(s.warmup_val) == 2 and len(s.online) == 6
    with pytest.raises(DataError):
        split_phases(7)


def test_split_partition_property():
    rng = np.random.default_rng(1)
    for T in rng.integers(8, 100_000, size=100):
        s = split_phases(int(T))
        assert s.warmup_train.start == 0
        assert s.warmup_train.stop == s.warmup_val.start
        assert s.warmup_val.stop == s.online.start
        assert s.online.stop == T


def test_normalization(caplog):
    rng = np.random.default_rng(2)
    x = rng.normal(5, 3, size=(50, 4, 2))
    st = NormStats.fit(x)
    assert np.max(np.abs(st.denormalize(st.normalize(x)) - x)) <= 1e-12

    const = np.concatenate([x[..., :1], np.full((50, 4, 1), 7.0)], axis=-1)
    with caplog.at_level(logging.WARNING):
        st = NormStats.fit(const)
    assert st.std[1] == 1.0 and "constant" in caplog.text
    np.testing.assert_array_equal(st.normalize(const)[..., 1], 0.0)


def test_stats_use_train_slice_only():
    ds = generate_synthetic(SyntheticSpec(n_locations=4, days=56, drift_rate=0.1, seed=3))
    split = split_phases(ds.frame.meta.n_steps)
    st = fit_stats(ds.frame, split)
    train = ds.frame.values[: split.warmup_train.stop]
    np.testing.assert_array_equal(st.mean, train.mean(axis=(0, 1)))
    full = ds.frame.values.mean(axis=(0, 1))
    assert not np.allclose(st.mean, full, rtol=1e-3)


def test_windows_are_contiguous():
    vals = np.arange(20.0).reshape(20, 1, 1)
    ws = list(windows(vals, 3, 2, range(5, 15)))
    assert len(ws) == 10 - 5 + 1
    for w in ws:
        assert w.y[0, 0, 0] == w.x[-1, 0, 0] + 1
        assert w.x[-1, 0, 0] == w.origin_time


def test_generator_deterministic():
    a = generate_synthetic(SyntheticSpec(n_locations=5, days=14, seed=7))
    b = generate_synthetic(SyntheticSpec(n_locations=5, days=14, seed=7))
    assert a.frame.values.tobytes() == b.frame.values.tobytes()
    assert a.adjacency.tobytes() == b.adjacency.tobytes()
    c = generate_synthetic(SyntheticSpec(n_locations=5, days=14, seed=8))
    assert c.frame.values.tobytes() != a.frame.values.tobytes()


def test_generator_adjacency_shape():
    ds = generate_synthetic(SyntheticSpec(n_locations=30, days=7, graph_degree=4, seed=1))
    A = ds.adjacency
    np.testing.assert_array_equal(A, A.T)
    assert np.all(np.diag(A) == 0) and np.all(A >= 0)
    assert 1.5 < (A > 0).sum(axis=1).mean() < 6


def _weekly_means(values, Lw=168):
    v = values[:, :, 0]
    return v[: (len(v) // Lw) * Lw].reshape(-1, Lw, v.shape[1]).mean(axis=1)


def test_stationary_weeks_exact_without_noise():
    ds = generate_synthetic(SyntheticSpec(drift_rate=0.0, noise_std=0.0, seed=7))
    weekly = _weekly_means(ds.frame.values)
    assert np.max(np.abs(weekly - weekly[0])) <= 1e-12


def test_stationary_weeks_constant_within_noise():
    # 3*sigma/sqrt(Lw) is ~2.1 standard deviations of a difference of two weekly
    # means, so a few of the 150 pairs exceed it by chance; bound the count.
    spec = SyntheticSpec(drift_rate=0.0, seed=7)
    Lw = 168
    diffs = np.diff(_weekly_means(generate_synthetic(spec).frame.values, Lw), axis=0)
    p_exceed = 2 * stats.norm.sf(3 / np.sqrt(2))
    allowed = stats.binom.ppf(0.999, diffs.size, p_exceed)
    assert (np.abs(diffs) >= 3 * spec.noise_std / np.sqrt(Lw)).sum() <= allowed
    z = diffs / (spec.noise_std * np.sqrt(2 / Lw))
    assert 0.8 < z.std() < 1.2


def test_drift_yields_location_specific_slopes():
    ds = generate_synthetic(SyntheticSpec(drift_rate=0.05, drift_heterogeneity=1.0, seed=7))
    Lw = 168
    vals = ds.frame.values[: 8 * Lw, :, 0].reshape(8, Lw, -1).mean(axis=1)
    slopes = np.polyfit(np.arange(8), vals, 1)[0]
    pos = slopes[slopes > 0]
    differs = (slopes.min() < 0 < slopes.max()) or (len(pos) >= 2 and pos.max() >= 2 * pos.min())
    assert differs, slopes
    assert np.all((ds.drift >= 0) & (ds.drift <= 0.1))


def test_expected_weekly_mean_monotone_under_positive_drift():
    spec = SyntheticSpec(n_locations=6, days=70, drift_rate=0.05, drift_heterogeneity=0.5, noise_std=0.0, seed=4)
    ds = generate_synthetic(spec)
    weekly = ds.frame.values[:, :, 0].reshape(10, 168, -1).mean(axis=1)
    assert np.all(np.diff(weekly, axis=0) > 0)
