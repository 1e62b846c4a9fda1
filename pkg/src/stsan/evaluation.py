"""RMSE/MAE with the low-volume filter, the historical-average baseline, and
model-versus-baseline evaluation over the test span.

The filter keeps samples whose TRUE flow volume is at least the threshold;
because it depends on the truth only, model and HA metrics are always
computed over identical sample sets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore
from .config import GridConfig, ModelConfig
from .data import PreparedDataset, interval_of_day
from .errors import ContractError, EmptyEvaluationError
from .model import predict_map

INTERVAL_CSV_HEADER = "interval,flow_type,n,model_rmse,model_mae,ha_rmse,ha_mae"


def rmse_mae(pred, truth, filter_threshold: float = 10.0) -> tuple[float, float, int]:
    """Metrics over samples whose true volume is >= the threshold."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ContractError(f"pred/truth lengths differ: {pred.shape} vs {truth.shape}")
    mask = truth >= filter_threshold
    n = int(mask.sum())
    if n == 0:
        raise EmptyEvaluationError(
            f"no samples with true volume >= {filter_threshold}")
    diff = pred[mask] - truth[mask]
    rmse = float(np.sqrt(np.mean(diff * diff)))
    mae = float(np.mean(np.abs(diff)))
    return rmse, mae, n


def ha_table(flow: np.ndarray, train_span: tuple[int, int],
             cfg: GridConfig) -> np.ndarray:
    """(rows, cols, g, w) mean of training flows grouped by interval-of-day."""
    t0, t1 = train_span
    if t1 <= t0:
        raise ContractError(f"empty train span [{t0}, {t1})")
    iods = np.array([interval_of_day(cfg, t) for t in range(t0, t1)])
    table = np.full((cfg.rows, cfg.cols, cfg.intervals_per_day, cfg.flow_types), np.nan)
    span = flow[:, :, t0:t1, :]
    for k in range(cfg.intervals_per_day):
        sel = iods == k
        if sel.any():
            table[:, :, k, :] = span[:, :, sel, :].mean(axis=2)
    return table


def ha_baseline(flow: np.ndarray, train_span: tuple[int, int], target_t: int,
                node: tuple[int, int], flow_type: int, cfg: GridConfig) -> float:
    """Mean training flow at the same node, flow type, and interval-of-day."""
    t0, t1 = train_span
    iod = interval_of_day(cfg, target_t)
    values = [flow[node[0], node[1], t, flow_type]
              for t in range(t0, t1) if interval_of_day(cfg, t) == iod]
    if not values:
        raise EmptyEvaluationError(
            f"no training history at interval-of-day {iod} for target {target_t}")
    return float(np.mean(values))


def flow_type_names(w: int) -> list[str]:
    if w == 2:
        return ["inflow", "outflow"]
    return [f"flow{i}" for i in range(w)]


@dataclass
class MetricReport:
    flows: dict[str, dict]
    ha: dict[str, dict]
    meta: dict

    def to_json(self) -> str:
        return json.dumps({"model": self.flows, "ha": self.ha, "meta": self.meta},
                          indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"{'flow type':<10} {'n':>8} {'rmse':>10} {'mae':>10} "
                 f"{'ha_rmse':>10} {'ha_mae':>10}"]
        for name, m in self.flows.items():
            h = self.ha[name]
            lines.append(f"{name:<10} {m['n']:>8d} {m['rmse']:>10.4f} {m['mae']:>10.4f} "
                         f"{h['rmse']:>10.4f} {h['mae']:>10.4f}")
        for key in sorted(self.meta):
            lines.append(f"# {key}: {self.meta[key]}")
        return "\n".join(lines) + "\n"


def evaluate(store: ParamStore, prepared: PreparedDataset, model_cfg: ModelConfig,
             filter_threshold: float = 10.0, config_hash: str = "",
             seed: int | None = None) -> tuple[MetricReport, list[str]]:
    """Predict every test interval, compare against truth and the HA baseline.

    Returns the report plus per-interval CSV rows (intervals whose samples
    are all filtered out are omitted from the CSV).
    """
    cfg = prepared.cfg
    names = flow_type_names(cfg.flow_types)
    table = ha_table(prepared.raw_flow, prepared.train_span, cfg)

    test_ts = list(range(prepared.test_start, cfg.num_intervals))
    preds = np.empty((len(test_ts), cfg.rows, cfg.cols, cfg.flow_types))
    truths = np.empty_like(preds)
    has = np.empty_like(preds)
    csv_rows: list[str] = []
    for i, t in enumerate(test_ts):
        preds[i] = predict_map(store, prepared, t, model_cfg)
        truths[i] = prepared.raw_flow[:, :, t, :]
        has[i] = table[:, :, interval_of_day(cfg, t), :]
        for ft, name in enumerate(names):
            try:
                m_rmse, m_mae, n = rmse_mae(preds[i, :, :, ft], truths[i, :, :, ft],
                                            filter_threshold)
                h_rmse, h_mae, _ = rmse_mae(has[i, :, :, ft], truths[i, :, :, ft],
                                            filter_threshold)
            except EmptyEvaluationError:
                continue
            csv_rows.append(f"{t},{name},{n},{m_rmse:.6f},{m_mae:.6f},"
                            f"{h_rmse:.6f},{h_mae:.6f}")

    flows, ha = {}, {}
    for ft, name in enumerate(names):
        m_rmse, m_mae, n = rmse_mae(preds[..., ft], truths[..., ft], filter_threshold)
        h_rmse, h_mae, hn = rmse_mae(has[..., ft], truths[..., ft], filter_threshold)
        flows[name] = {"rmse": m_rmse, "mae": m_mae, "n": n}
        ha[name] = {"rmse": h_rmse, "mae": h_mae, "n": hn}

    meta = {
        "test_span": [prepared.test_start, cfg.num_intervals],
        "train_span": list(prepared.train_span),
        "filter_threshold": filter_threshold,
        "config_hash": config_hash,
    }
    if seed is not None:
        meta["seed"] = seed
    return MetricReport(flows=flows, ha=ha, meta=meta), csv_rows
