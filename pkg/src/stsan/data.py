"""Trip-record ingestion, flow/transition tensor construction, min-max
normalization, sliding-window example sampling, and the binary dataset cache.

Axis conventions:
  flow        (rows, cols, T, w)            w: [inflow=0, outflow=1]
  transitions (rows, cols, a, b, T, w)      w: [arrive=0, depart=1]
Transition entry (i, j, p, q, t, d) counts movements between node (i, j) and
the node at AoI-relative offset (p - a//2, q - b//2), attributed to the
arrival interval. Only trips whose endpoints lie in each other's AoI and
whose interval gap is <= the configured threshold are counted.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .config import DataConfig, GridConfig
from .errors import (
    ConfigError, ContractError, DegenerateDataError, IngestError,
    InsufficientHistoryError,
)

CSV_HEADER = "start_ts,end_ts,start_row,start_col,end_row,end_col"
CACHE_MAGIC = b"STSN"
CACHE_VERSION = 1

# GridConfig serialization order for the binary cache
_CFG_FIELDS = (
    "rows", "cols", "interval_minutes", "intervals_per_day", "num_intervals",
    "flow_types", "transition_threshold", "aoi_rows", "aoi_cols",
    "history_days", "period_window", "start_timestamp",
)


@dataclass(frozen=True)
class TripRecord:
    start_ts: int
    end_ts: int
    start_row: int
    start_col: int
    end_row: int
    end_col: int


def trips_to_array(records) -> np.ndarray:
    """Normalize a record stream to an (n, 6) int64 array in CSV column order."""
    if isinstance(records, np.ndarray):
        arr = np.asarray(records, dtype=np.int64)
        if arr.ndim != 2 or arr.shape[1] != 6:
            raise ContractError(f"trip array must be (n, 6), got {arr.shape}")
        return arr
    rows = [(r.start_ts, r.end_ts, r.start_row, r.start_col, r.end_row, r.end_col)
            for r in records]
    return np.asarray(rows, dtype=np.int64).reshape(-1, 6)


def write_trips_csv(path: str, records):
    arr = trips_to_array(records)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(CSV_HEADER + "\n")
        for row in arr:
            fh.write(",".join(str(int(v)) for v in row) + "\n")
    return len(arr)


def read_trips_csv(path: str, max_malformed_fraction: float = 0.01) -> np.ndarray:
    """Parse a trip CSV; tolerates a bounded fraction of malformed lines."""
    rows = []
    n_malformed = 0
    samples: list[tuple[int, str]] = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise IngestError(f"bad trip CSV header: {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                if len(parts) != 6:
                    raise ValueError("wrong field count")
                rows.append([int(p) for p in parts])
            except ValueError:
                n_malformed += 1
                if len(samples) < 5:
                    samples.append((lineno, line))
    total = len(rows) + n_malformed
    if total == 0:
        raise IngestError(f"trip CSV {path} contains no records")
    if n_malformed / total > max_malformed_fraction:
        raise IngestError(
            f"{n_malformed}/{total} malformed rows in {path}; samples: {samples}")
    if not rows:
        raise IngestError(f"trip CSV {path} contains no parseable records")
    return np.asarray(rows, dtype=np.int64)


@dataclass
class IngestReport:
    total: int
    used: int
    skipped: int
    moving: int                 # used records with distinct endpoints
    transition_pairs: int       # moving records counted into the transition tensor
    excluded_by_threshold: int  # in-AoI pairs dropped for spanning > m intervals
    excluded_outside_aoi: int
    flow_total: float
    transition_total: float


def ingest_trips(records, cfg: GridConfig,
                 max_skip_fraction: float = 0.01) -> tuple[np.ndarray, np.ndarray, IngestReport]:
    """Accumulate trip records into flow and transition tensors.

    Each in-range trip with distinct endpoints adds one unit of outflow at its
    start node/interval and one unit of inflow at its end node/interval.
    Transitions are recorded at the arrival interval, restricted to pairs
    within each other's AoI and an interval gap <= transition_threshold.
    Out-of-range records are skipped; more than `max_skip_fraction` skipped
    raises IngestError.
    """
    arr = trips_to_array(records)
    total = len(arr)
    if total == 0:
        raise IngestError("no trip records to ingest")

    sec = cfg.interval_minutes * 60
    s_ts, e_ts = arr[:, 0], arr[:, 1]
    sr, sc, er, ec = arr[:, 2], arr[:, 3], arr[:, 4], arr[:, 5]
    i_s = (s_ts - cfg.start_timestamp) // sec
    i_e = (e_ts - cfg.start_timestamp) // sec

    ok = (
        (s_ts <= e_ts)
        & (sr >= 0) & (sr < cfg.rows) & (sc >= 0) & (sc < cfg.cols)
        & (er >= 0) & (er < cfg.rows) & (ec >= 0) & (ec < cfg.cols)
        & (i_s >= 0) & (i_s < cfg.num_intervals)
        & (i_e >= 0) & (i_e < cfg.num_intervals)
    )
    used = int(ok.sum())
    skipped = total - used
    if skipped / total > max_skip_fraction:
        raise IngestError(
            f"{skipped}/{total} records out of range (tolerance {max_skip_fraction:.1%})")

    sr, sc, er, ec = sr[ok], sc[ok], er[ok], ec[ok]
    i_s, i_e = i_s[ok], i_e[ok]
    moving = (sr != er) | (sc != ec)
    msr, msc, mer, mec = sr[moving], sc[moving], er[moving], ec[moving]
    mi_s, mi_e = i_s[moving], i_e[moving]

    flow = np.zeros((cfg.rows, cfg.cols, cfg.num_intervals, cfg.flow_types))
    np.add.at(flow, (mer, mec, mi_e, 0), 1.0)   # inflow at the end node
    np.add.at(flow, (msr, msc, mi_s, 1), 1.0)   # outflow at the start node

    a2, b2 = cfg.aoi_rows // 2, cfg.aoi_cols // 2
    in_aoi = (np.abs(mer - msr) <= a2) & (np.abs(mec - msc) <= b2)
    within_gap = (mi_e - mi_s) <= cfg.transition_threshold
    eligible = in_aoi & within_gap

    trans = np.zeros((cfg.rows, cfg.cols, cfg.aoi_rows, cfg.aoi_cols,
                      cfg.num_intervals, cfg.flow_types))
    tsr, tsc = msr[eligible], msc[eligible]
    ter, tec = mer[eligible], mec[eligible]
    ti = mi_e[eligible]
    # arrive entry at the end node, indexed by the start node's relative offset
    np.add.at(trans, (ter, tec, a2 + tsr - ter, b2 + tsc - tec, ti, 0), 1.0)
    # depart entry at the start node, indexed by the end node's relative offset
    np.add.at(trans, (tsr, tsc, a2 + ter - tsr, b2 + tec - tsc, ti, 1), 1.0)

    report = IngestReport(
        total=total,
        used=used,
        skipped=skipped,
        moving=int(moving.sum()),
        transition_pairs=int(eligible.sum()),
        excluded_by_threshold=int((in_aoi & ~within_gap).sum()),
        excluded_outside_aoi=int((~in_aoi).sum()),
        flow_total=float(flow.sum()),
        transition_total=float(trans.sum()),
    )
    return flow, trans, report


# --- normalization ----------------------------------------------------------

@dataclass(frozen=True)
class Normalizer:
    """Affine map sending the fitted [vmin, vmax] range onto [0, 1].

    Values outside the fitted range map outside [0, 1]; nothing clamps here.
    """

    vmin: float
    vmax: float

    def apply(self, x):
        return (x - self.vmin) / (self.vmax - self.vmin)

    def invert(self, x):
        return x * (self.vmax - self.vmin) + self.vmin


def fit_normalizer(values: np.ndarray, train_range: tuple[int, int],
                   time_axis: int = 2) -> Normalizer:
    """Fit on the [t0, t1) span of the time axis only."""
    t0, t1 = train_range
    if t1 <= t0:
        raise ConfigError(f"empty training range [{t0}, {t1})")
    span = np.take(values, np.arange(t0, t1), axis=time_axis)
    vmin, vmax = float(span.min()), float(span.max())
    if vmax <= vmin:
        raise DegenerateDataError(f"constant data over [{t0}, {t1}): min == max == {vmin}")
    return Normalizer(vmin, vmax)


# --- time features ----------------------------------------------------------

def interval_timestamp(cfg: GridConfig, t: int) -> int:
    return cfg.start_timestamp + t * cfg.interval_minutes * 60


def day_of_week(ts: int) -> int:
    """Monday=0; pure epoch arithmetic (1970-01-01 was a Thursday)."""
    return int((ts // 86400 + 3) % 7)


def interval_of_day(cfg: GridConfig, t: int) -> int:
    return int((interval_timestamp(cfg, t) % 86400) // (cfg.interval_minutes * 60))


def time_onehots(cfg: GridConfig, dtype=np.float64) -> np.ndarray:
    """(T, 7+g) table: weekday slot in the first 7, interval slot in the last g."""
    table = np.zeros((cfg.num_intervals, cfg.time_feature_dim), dtype=dtype)
    for t in range(cfg.num_intervals):
        ts = interval_timestamp(cfg, t)
        table[t, day_of_week(ts)] = 1.0
        table[t, 7 + interval_of_day(cfg, t)] = 1.0
    return table


# --- sliding-window sampling -------------------------------------------------

def window_intervals(target_t: int, cfg: GridConfig) -> np.ndarray:
    """The s sampled interval indices for one example, oldest first.

    Per previous day d in {c..1}: period_window slices centered on
    target_t - d*g; then the two preceding intervals of the current day.
    The final slice (target_t - 1) feeds the decoder.
    """
    half = cfg.period_window // 2
    g = cfg.intervals_per_day
    idx = []
    for d in range(cfg.history_days, 0, -1):
        center = target_t - d * g
        idx.extend(range(center - half, center + half + 1))
    idx.extend([target_t - 2, target_t - 1])
    out = np.asarray(idx, dtype=np.int64)
    if out[0] < 0 or target_t < cfg.min_target:
        raise InsufficientHistoryError(
            f"target {target_t} needs history back to interval {out[0]} "
            f"(minimum valid target is {cfg.min_target})")
    return out


def aoi_crop(values: np.ndarray, row: int, col: int, cfg: GridConfig) -> np.ndarray:
    """Zero-padded (a, b, ...) crop of a (rows, cols, ...) array around a node."""
    a, b = cfg.aoi_rows, cfg.aoi_cols
    a2, b2 = a // 2, b // 2
    out = np.zeros((a, b) + values.shape[2:], dtype=values.dtype)
    r0, r1 = max(0, row - a2), min(cfg.rows, row + a2 + 1)
    c0, c1 = max(0, col - b2), min(cfg.cols, col + b2 + 1)
    out[r0 - row + a2: r1 - row + a2, c0 - col + b2: c1 - col + b2] = \
        values[r0:r1, c0:c1]
    return out


@dataclass
class TrainingExample:
    """One (node, target interval) sample with encoder/decoder windows."""

    node: tuple[int, int]
    target_t: int
    enc_flow: np.ndarray     # (a, b, s-1, w)
    dec_flow: np.ndarray     # (a, b, 1, w)
    enc_trans: np.ndarray    # (a, b, s-1, w)
    dec_trans: np.ndarray    # (a, b, 1, w)
    enc_times: np.ndarray    # (s-1, 7+g)
    dec_times: np.ndarray    # (1, 7+g)
    target_flow: np.ndarray  # (w,)
    target_trans: np.ndarray  # (a, b, w)


def sample_example(flow: np.ndarray, trans: np.ndarray, node: tuple[int, int],
                   target_t: int, cfg: GridConfig) -> TrainingExample:
    """Materialize one training example from (optionally normalized) tensors."""
    row, col = node
    if not (0 <= row < cfg.rows and 0 <= col < cfg.cols):
        raise ContractError(f"node {node} outside {cfg.rows}x{cfg.cols} grid")
    if not 0 <= target_t < cfg.num_intervals:
        raise ContractError(f"target_t {target_t} outside [0, {cfg.num_intervals})")
    idx = window_intervals(target_t, cfg)

    flow_win = aoi_crop(flow, row, col, cfg)[:, :, idx, :]
    trans_win = trans[row, col][:, :, idx, :]
    times = np.zeros((len(idx), cfg.time_feature_dim))
    for i, t in enumerate(idx):
        ts = interval_timestamp(cfg, int(t))
        times[i, day_of_week(ts)] = 1.0
        times[i, 7 + interval_of_day(cfg, int(t))] = 1.0

    return TrainingExample(
        node=node,
        target_t=target_t,
        enc_flow=flow_win[:, :, :-1, :],
        dec_flow=flow_win[:, :, -1:, :],
        enc_trans=trans_win[:, :, :-1, :],
        dec_trans=trans_win[:, :, -1:, :],
        enc_times=times[:-1],
        dec_times=times[-1:],
        target_flow=flow[row, col, target_t, :].copy(),
        target_trans=trans[row, col, :, :, target_t, :].copy(),
    )


def split_dataset(pairs: Sequence[tuple[int, int, int]], test_start: int,
                  val_fraction: float = 0.2, seed: int = 0):
    """Chronological train+val/test split, then a seeded random val subset."""
    train_pool = [p for p in pairs if p[2] < test_start]
    test = [p for p in pairs if p[2] >= test_start]
    if not train_pool or not test:
        raise ConfigError(
            f"empty split: {len(train_pool)} train+val, {len(test)} test "
            f"(test_start={test_start})")
    perm = np.random.default_rng(seed).permutation(len(train_pool))
    n_val = int(val_fraction * len(train_pool))
    if n_val == 0 or n_val == len(train_pool):
        raise ConfigError(f"val_fraction {val_fraction} leaves an empty split")
    val = [train_pool[i] for i in perm[:n_val]]
    train = [train_pool[i] for i in perm[n_val:]]
    return train, val, test


# --- dataset container and binary cache --------------------------------------

@dataclass
class GriddedDataset:
    cfg: GridConfig
    flow: np.ndarray
    transitions: np.ndarray

    def save(self, path: str):
        cfgvals = [getattr(self.cfg, f) for f in _CFG_FIELDS]
        with open(path, "wb") as fh:
            fh.write(CACHE_MAGIC)
            fh.write(struct.pack("<H", CACHE_VERSION))
            fh.write(struct.pack(f"<{len(cfgvals)}q", *cfgvals))
            fh.write(np.ascontiguousarray(self.flow, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.transitions, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str) -> "GriddedDataset":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != CACHE_MAGIC:
                raise ContractError(f"{path} is not a dataset cache (magic {magic!r})")
            (version,) = struct.unpack("<H", fh.read(2))
            if version != CACHE_VERSION:
                raise ContractError(f"unsupported cache version {version}")
            raw = fh.read(len(_CFG_FIELDS) * 8)
            vals = struct.unpack(f"<{len(_CFG_FIELDS)}q", raw)
            cfg = GridConfig(**dict(zip(_CFG_FIELDS, vals)))
            flow_shape = (cfg.rows, cfg.cols, cfg.num_intervals, cfg.flow_types)
            trans_shape = (cfg.rows, cfg.cols, cfg.aoi_rows, cfg.aoi_cols,
                           cfg.num_intervals, cfg.flow_types)
            flow = np.frombuffer(fh.read(int(np.prod(flow_shape)) * 8), dtype="<f8")
            trans = np.frombuffer(fh.read(int(np.prod(trans_shape)) * 8), dtype="<f8")
            if flow.size != np.prod(flow_shape) or trans.size != np.prod(trans_shape):
                raise ContractError(f"{path} truncated")
        return cls(cfg=cfg,
                   flow=flow.reshape(flow_shape).copy(),
                   transitions=trans.reshape(trans_shape).copy())


@dataclass
class Batch:
    """Stacked examples ready for a model forward pass (leading batch axis)."""

    pairs: list[tuple[int, int, int]]
    enc_flow: np.ndarray
    dec_flow: np.ndarray
    enc_trans: np.ndarray
    dec_trans: np.ndarray
    enc_times: np.ndarray
    dec_times: np.ndarray
    target_flow: np.ndarray
    target_trans: np.ndarray

    def __len__(self):
        return len(self.pairs)


class PreparedDataset:
    """Normalized tensors plus the example index, split for one experiment.

    Normalizers are fit on the pre-test span only. Batches are assembled from
    a pre-padded flow array, so AoI crops at grid borders are zero-filled.
    """

    def __init__(self, dataset: GriddedDataset, data_cfg: DataConfig,
                 seed: int, dtype=np.float32):
        cfg = dataset.cfg
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.raw_flow = dataset.flow
        g = cfg.intervals_per_day
        self.test_start = cfg.num_intervals - data_cfg.test_days * g
        if self.test_start <= cfg.min_target:
            raise ConfigError(
                f"test span leaves no training targets: test_start={self.test_start}, "
                f"first valid target={cfg.min_target}")
        self.train_span = (0, self.test_start)

        self.flow_normalizer = fit_normalizer(dataset.flow, self.train_span, time_axis=2)
        self.trans_normalizer = fit_normalizer(dataset.transitions, self.train_span, time_axis=4)
        self.flow_norm = self.flow_normalizer.apply(dataset.flow).astype(self.dtype)
        self.trans_norm = self.trans_normalizer.apply(dataset.transitions).astype(self.dtype)
        a2, b2 = cfg.aoi_rows // 2, cfg.aoi_cols // 2
        self.flow_padded = np.pad(self.flow_norm, ((a2, a2), (b2, b2), (0, 0), (0, 0)))
        self.onehots = time_onehots(cfg, dtype=self.dtype)

        pairs = [(r, c, t)
                 for t in range(cfg.min_target, cfg.num_intervals)
                 for r in range(cfg.rows)
                 for c in range(cfg.cols)]
        self.train_pairs, self.val_pairs, self.test_pairs = split_dataset(
            pairs, self.test_start, data_cfg.val_fraction, seed)
        self._windows: dict[int, np.ndarray] = {}

    def window(self, target_t: int) -> np.ndarray:
        win = self._windows.get(target_t)
        if win is None:
            win = window_intervals(target_t, self.cfg)
            self._windows[target_t] = win
        return win

    def batch(self, pairs: Sequence[tuple[int, int, int]]) -> Batch:
        cfg = self.cfg
        n, a, b, w = len(pairs), cfg.aoi_rows, cfg.aoi_cols, cfg.flow_types
        s = cfg.window_slices
        flow_win = np.empty((n, a, b, s, w), dtype=self.dtype)
        trans_win = np.empty((n, a, b, s, w), dtype=self.dtype)
        times = np.empty((n, s, cfg.time_feature_dim), dtype=self.dtype)
        target_flow = np.empty((n, w), dtype=self.dtype)
        target_trans = np.empty((n, a, b, w), dtype=self.dtype)
        for i, (r, c, t) in enumerate(pairs):
            idx = self.window(t)
            flow_win[i] = self.flow_padded[r:r + a, c:c + b][:, :, idx, :]
            trans_win[i] = self.trans_norm[r, c][:, :, idx, :]
            times[i] = self.onehots[idx]
            target_flow[i] = self.flow_norm[r, c, t, :]
            target_trans[i] = self.trans_norm[r, c, :, :, t, :]
        return Batch(
            pairs=list(pairs),
            enc_flow=flow_win[:, :, :, :-1, :],
            dec_flow=flow_win[:, :, :, -1:, :],
            enc_trans=trans_win[:, :, :, :-1, :],
            dec_trans=trans_win[:, :, :, -1:, :],
            enc_times=times[:, :-1, :],
            dec_times=times[:, -1:, :],
            target_flow=target_flow,
            target_trans=target_trans,
        )
