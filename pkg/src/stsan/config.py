"""Configuration dataclasses and the JSON run-config format.

A run config is a JSON document with sections ``grid``, ``model``, ``train``,
``data``, ``eval``, ``paths`` plus a top-level ``seed``. Every field has a
default; unknown keys are rejected. The config hash covers everything that
affects numerical results (paths excluded) and is embedded in checkpoints,
reports and logs for provenance.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .errors import ConfigError

MINUTES_PER_DAY = 1440


@dataclass(frozen=True)
class GridConfig:
    """Static geometry of the gridded dataset and its sampling windows."""

    rows: int = 8
    cols: int = 8
    interval_minutes: int = 30
    intervals_per_day: int = 48
    num_intervals: int = 672
    flow_types: int = 2
    transition_threshold: int = 2   # max interval gap for a counted transition
    aoi_rows: int = 7
    aoi_cols: int = 7
    history_days: int = 7
    period_window: int = 3          # slices sampled per previous day (odd)
    start_timestamp: int = 1451865600  # 2016-01-04 00:00 UTC, a Monday

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0:
            raise ConfigError("grid dimensions must be positive")
        if self.intervals_per_day * self.interval_minutes != MINUTES_PER_DAY:
            raise ConfigError(
                f"intervals_per_day * interval_minutes must be {MINUTES_PER_DAY}, got "
                f"{self.intervals_per_day} * {self.interval_minutes}"
            )
        if self.aoi_rows % 2 == 0 or self.aoi_cols % 2 == 0:
            raise ConfigError("aoi_rows and aoi_cols must be odd so the AoI is centered")
        if self.aoi_rows <= 0 or self.aoi_cols <= 0:
            raise ConfigError("AoI dimensions must be positive")
        if self.period_window % 2 == 0 or self.period_window <= 0:
            raise ConfigError("period_window must be an odd positive integer")
        if self.period_window // 2 >= self.intervals_per_day:
            raise ConfigError("period_window wider than a day")
        if self.history_days <= 0:
            raise ConfigError("history_days must be positive")
        if self.flow_types <= 0:
            raise ConfigError("flow_types must be positive")
        if self.transition_threshold < 0:
            raise ConfigError("transition_threshold must be non-negative")
        if self.num_intervals < (self.history_days + 1) * self.intervals_per_day:
            raise ConfigError(
                "num_intervals too small: need at least (history_days + 1) full days"
            )

    @property
    def window_slices(self) -> int:
        """Total sampled slices per example: c * n_p + 2."""
        return self.history_days * self.period_window + 2

    @property
    def min_target(self) -> int:
        """Earliest interval with enough history for a full sample window."""
        return self.history_days * self.intervals_per_day + max(2, self.period_window // 2)

    @property
    def grid_count(self) -> int:
        return self.rows * self.cols

    @property
    def time_feature_dim(self) -> int:
        """Width of the per-slice time one-hot: 7 weekday slots + g interval slots."""
        return 7 + self.intervals_per_day


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters shared by both streams and the fusion head."""

    d_model: int = 64
    heads: int = 8
    num_layers: int = 4
    ff_dim: int = 128
    conv_layers: int = 3
    conv_kernel: int = 3
    pe_hidden: int | None = None        # None -> d_model
    fusion_layers: int = 2
    fusion_kernels: tuple[int, ...] = (3, 3)
    fusion_channels: int | None = None  # None -> d_model
    head_hidden: int = 128
    dropout_rate: float = 0.1
    attn_dropout: bool = False          # dropout on attention weights, off by default
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.d_model <= 0 or self.heads <= 0:
            raise ConfigError("d_model and heads must be positive")
        if self.d_model % self.heads != 0:
            raise ConfigError(
                f"d_model ({self.d_model}) must be divisible by heads ({self.heads})"
            )
        if len(self.fusion_kernels) != self.fusion_layers:
            raise ConfigError("fusion_kernels must list one kernel size per fusion layer")
        if any(k % 2 == 0 or k <= 0 for k in self.fusion_kernels):
            raise ConfigError("fusion kernel sizes must be odd and positive")
        if self.conv_kernel % 2 == 0 or self.conv_kernel <= 0:
            raise ConfigError("conv_kernel must be odd and positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.ln_eps <= 0:
            raise ConfigError("ln_eps must be positive")

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads

    @property
    def pe_hidden_dim(self) -> int:
        return self.d_model if self.pe_hidden is None else self.pe_hidden

    @property
    def fusion_channel_dim(self) -> int:
        return self.d_model if self.fusion_channels is None else self.fusion_channels

    def fused_spatial(self, aoi_rows: int, aoi_cols: int) -> tuple[int, int]:
        """Spatial dims after the valid-padded fusion convolutions."""
        r, c = aoi_rows, aoi_cols
        for k in self.fusion_kernels:
            r -= k - 1
            c -= k - 1
        if r < 1 or c < 1:
            raise ConfigError(
                f"AoI {aoi_rows}x{aoi_cols} too small for fusion kernels {self.fusion_kernels}"
            )
        return r, c

    def flat_dim(self, aoi_rows: int, aoi_cols: int) -> int:
        r, c = self.fused_spatial(aoi_rows, aoi_cols)
        return r * c * self.fusion_channel_dim


@dataclass(frozen=True)
class TrainConfig:
    """One training phase: stream_t pre-training or the fused stsan phase."""

    phase: str = "stream_t"             # "stream_t" | "stsan"
    max_steps: int = 1000
    batch_size: int = 32
    wu_steps: int = 400                 # desk-scale default; 4000 at full scale
    val_every: int = 50
    val_examples: int = 512             # cap on validation examples per evaluation
    lr_cap: float | None = None
    single_stream: bool = False         # ablation: Stream-F + fusion head only
    skip_pretrain: bool = False         # ablation: train both streams jointly

    def __post_init__(self):
        if self.phase not in ("stream_t", "stsan"):
            raise ConfigError(f"unknown phase {self.phase!r}")
        if self.wu_steps < 1:
            raise ConfigError("wu_steps must be >= 1")
        if self.max_steps < 1 or self.batch_size < 1:
            raise ConfigError("max_steps and batch_size must be positive")
        if self.val_every < 1:
            raise ConfigError("val_every must be >= 1")
        if self.single_stream and self.skip_pretrain:
            raise ConfigError("single_stream and skip_pretrain are mutually exclusive")


@dataclass(frozen=True)
class DataConfig:
    """Synthetic generation and split parameters."""

    synth_days: int = 14
    synth_intensity: float = 1.0
    test_days: int = 4
    val_fraction: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in (0, 1)")
        if self.test_days < 1:
            raise ConfigError("test_days must be >= 1")


@dataclass(frozen=True)
class EvalConfig:
    filter_threshold: float = 10.0


@dataclass(frozen=True)
class PathConfig:
    """Default artifact locations; CLI flags override these."""

    trips: str = "trips.csv"
    cache: str = "dataset.stsn"
    checkpoint_dir: str = "checkpoints"
    report_dir: str = "reports"


_SECTIONS = {
    "grid": GridConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "eval": EvalConfig,
    "paths": PathConfig,
}


@dataclass
class RunConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathConfig = field(default_factory=PathConfig)
    seed: int = 1234

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
        unknown = set(doc) - set(_SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for name, klass in _SECTIONS.items():
            section = doc.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            known = {f.name for f in dataclasses.fields(klass)}
            bad = set(section) - known
            if bad:
                raise ConfigError(f"unknown keys in section {name!r}: {sorted(bad)}")
            coerced = dict(section)
            if name == "model" and "fusion_kernels" in coerced:
                coerced["fusion_kernels"] = tuple(coerced["fusion_kernels"])
            kwargs[name] = klass(**coerced)
        seed = doc.get("seed", 1234)
        if not isinstance(seed, int):
            raise ConfigError("seed must be an integer")
        return cls(seed=seed, **kwargs)

    @classmethod
    def from_json(cls, path: str) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        doc = {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}
        doc["model"]["fusion_kernels"] = list(doc["model"]["fusion_kernels"])
        doc["seed"] = self.seed
        return doc

    def config_hash(self) -> str:
        """Hash of every result-affecting field; file paths excluded."""
        doc = self.to_dict()
        doc.pop("paths")
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()
