"""Synthetic corpus: determinism, daily structure, and degenerate cases."""

import numpy as np

from stsan.config import GridConfig
from stsan.data import day_of_week, ingest_trips
from stsan.synthetic import generate_synthetic

MONDAY = 1451865600


def grid(**kw):
    base = dict(rows=8, cols=8, interval_minutes=30, intervals_per_day=48,
                num_intervals=48 * 7, aoi_rows=7, aoi_cols=7, history_days=2,
                period_window=1, start_timestamp=MONDAY)
    base.update(kw)
    return GridConfig(**base)


def test_same_seed_identical_stream():
    cfg = grid()
    a = generate_synthetic(cfg, seed=4, days=3, intensity_scale=0.3)
    b = generate_synthetic(cfg, seed=4, days=3, intensity_scale=0.3)
    np.testing.assert_array_equal(a, b)
    c = generate_synthetic(cfg, seed=5, days=3, intensity_scale=0.3)
    assert not np.array_equal(a, c)


def test_zero_intensity_empty_stream():
    arr = generate_synthetic(grid(), seed=1, days=3, intensity_scale=0.0)
    assert arr.shape == (0, 6)


def test_records_within_range_and_grid():
    cfg = grid()
    arr = generate_synthetic(cfg, seed=2, days=7, intensity_scale=0.3)
    sec = cfg.interval_minutes * 60
    assert np.all(arr[:, 0] >= cfg.start_timestamp)
    assert np.all(arr[:, 1] < cfg.start_timestamp + 7 * 48 * sec)
    assert np.all(arr[:, 0] <= arr[:, 1])
    for col in (2, 4):
        assert arr[:, col].min() >= 0 and arr[:, col].max() < cfg.rows
    for col in (3, 5):
        assert arr[:, col].min() >= 0 and arr[:, col].max() < cfg.cols
    # destinations always differ from sources
    assert np.all((arr[:, 2] != arr[:, 4]) | (arr[:, 3] != arr[:, 5]))


def test_hourly_inflow_shows_two_daily_peaks():
    cfg = grid()
    arr = generate_synthetic(cfg, seed=7, days=7, intensity_scale=1.0)
    flow, _, _ = ingest_trips(arr, cfg)
    by_interval = flow[..., 0].sum(axis=(0, 1)).reshape(7, 48).mean(axis=0)
    morning = by_interval[14:20].mean()     # 07:00-10:00
    midday = by_interval[24:30].mean()      # 12:00-15:00
    evening = by_interval[32:38].mean()     # 16:00-19:00
    night = by_interval[0:8].mean()         # 00:00-04:00
    assert morning > 2.0 * night
    assert evening > 2.0 * night
    assert morning > 1.2 * midday
    assert evening > 1.2 * midday


def test_weekend_quieter_than_weekdays():
    cfg = grid()
    arr = generate_synthetic(cfg, seed=8, days=7, intensity_scale=0.5)
    dows = np.array([day_of_week(int(ts)) for ts in arr[:, 0]])
    weekday_rate = (dows < 5).sum() / 5.0
    weekend_rate = (dows >= 5).sum() / 2.0
    assert weekend_rate < 0.8 * weekday_rate
