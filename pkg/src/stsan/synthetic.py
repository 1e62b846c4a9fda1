"""Deterministic synthetic trip corpus.

Per-node Poisson departure intensities with two Gaussian peaks per day
(node-dependent peak hours), weekday/weekend modulation, a slow day-to-day
amplitude drift, and a day-to-day peak-hour shift. Destinations follow a
distance-decaying choice over nearby nodes. The drift and shift are
deliberately misaligned with the weekly cycle so a historical-average
predictor cannot capture them while recent-history models can.
"""

from __future__ import annotations

import math

import numpy as np

from .config import GridConfig
from .data import day_of_week

# intensity shape constants
_FLOOR = 0.25
_AMP_MORNING = 2.4
_AMP_EVENING = 2.8
_SD_MORNING = 95.0     # minutes
_SD_EVENING = 110.0
_WEEKEND_FACTOR = 0.55
_DAY_AMP = 0.30
_DAY_AMP_PERIOD = 6.3  # days; deliberately not 7
_SHIFT_MINUTES = 40.0
_SHIFT_PERIOD = 4.7
_MAX_HOP = 4
_HOP_DECAY = 1.8
_MIN_DURATION_S = 120
_MEAN_EXTRA_S = 780.0
_MAX_DURATION_S = 5400


def _node_bases(cfg: GridConfig, intensity_scale: float) -> np.ndarray:
    # scaled so that at intensity 1.0, peak-hour volumes sit well above the
    # standard >=10 evaluation filter (keeps the Poisson noise floor small
    # relative to the day-to-day structure HA cannot capture)
    rows = np.arange(cfg.rows)[:, None]
    cols = np.arange(cfg.cols)[None, :]
    rc, cc = (cfg.rows - 1) / 2.0, (cfg.cols - 1) / 2.0
    sigma = 0.45 * max(cfg.rows, cfg.cols) / 2.0
    dist2 = (rows - rc) ** 2 + (cols - cc) ** 2
    base = 5.0 + 13.0 * np.exp(-dist2 / (2.0 * sigma ** 2))
    return (intensity_scale * base).ravel()


def _node_peaks(cfg: GridConfig) -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(cfg.grid_count)
    rows, cols = idx // cfg.cols, idx % cfg.cols
    morning = 450.0 + 30.0 * ((rows * cfg.cols + cols) % 4)   # 07:30..09:00
    evening = 1000.0 + 30.0 * ((rows + 2 * cols) % 4)         # 16:40..18:10
    return morning, evening


def _destination_tables(cfg: GridConfig):
    """Per-node in-grid destination offsets and cumulative choice weights."""
    offsets = [(dr, dc)
               for dr in range(-_MAX_HOP, _MAX_HOP + 1)
               for dc in range(-_MAX_HOP, _MAX_HOP + 1)
               if (dr, dc) != (0, 0)]
    weights = np.array([math.exp(-(abs(dr) + abs(dc)) / _HOP_DECAY)
                        for dr, dc in offsets])
    offsets = np.array(offsets, dtype=np.int64)
    dests, cums = [], []
    for node in range(cfg.grid_count):
        r, c = node // cfg.cols, node % cfg.cols
        er, ec = r + offsets[:, 0], c + offsets[:, 1]
        ok = (er >= 0) & (er < cfg.rows) & (ec >= 0) & (ec < cfg.cols)
        w = weights[ok]
        cum = np.cumsum(w)
        cum /= cum[-1]
        dests.append(np.stack([er[ok], ec[ok]], axis=1))
        cums.append(cum)
    return dests, cums


def generate_synthetic(cfg: GridConfig, seed: int, days: int,
                       intensity_scale: float = 1.0) -> np.ndarray:
    """Generate an (n, 6) int64 trip array in CSV column order.

    Deterministic for a fixed seed. Zero intensity yields an empty array.
    """
    rng = np.random.default_rng(seed)
    g = cfg.intervals_per_day
    sec = cfg.interval_minutes * 60
    n_intervals = days * g
    range_end = cfg.start_timestamp + n_intervals * sec

    bases = _node_bases(cfg, intensity_scale)
    morning, evening = _node_peaks(cfg)
    dests, cums = _destination_tables(cfg)

    chunks: list[np.ndarray] = []
    for t in range(n_intervals):
        day = t // g
        ts0 = cfg.start_timestamp + t * sec
        dow = day_of_week(ts0)
        day_factor = 1.0 + _DAY_AMP * math.sin(2.0 * math.pi * day / _DAY_AMP_PERIOD + 0.7)
        if dow >= 5:
            day_factor *= _WEEKEND_FACTOR
        shift = _SHIFT_MINUTES * math.sin(2.0 * math.pi * day / _SHIFT_PERIOD)
        minute = (t % g) * cfg.interval_minutes + cfg.interval_minutes / 2.0

        bump1 = np.exp(-0.5 * ((minute - morning - shift) / _SD_MORNING) ** 2)
        bump2 = np.exp(-0.5 * ((minute - evening - shift) / _SD_EVENING) ** 2)
        lam = bases * day_factor * (_FLOOR + _AMP_MORNING * bump1 + _AMP_EVENING * bump2)
        counts = rng.poisson(lam)
        for node in range(cfg.grid_count):
            n = int(counts[node])
            if n == 0:
                continue
            r, c = node // cfg.cols, node % cfg.cols
            pick = np.searchsorted(cums[node], rng.random(n))
            dest = dests[node][pick]
            start = ts0 + rng.integers(0, sec, size=n)
            dur = _MIN_DURATION_S + rng.exponential(_MEAN_EXTRA_S, size=n).astype(np.int64)
            end = np.minimum(start + np.minimum(dur, _MAX_DURATION_S), range_end - 1)
            rows = np.empty((n, 6), dtype=np.int64)
            rows[:, 0] = start
            rows[:, 1] = end
            rows[:, 2] = r
            rows[:, 3] = c
            rows[:, 4] = dest[:, 0]
            rows[:, 5] = dest[:, 1]
            chunks.append(rows)
    if not chunks:
        return np.empty((0, 6), dtype=np.int64)
    return np.concatenate(chunks, axis=0)
