import time

import numpy as np

from stsan.config import DataConfig, GridConfig, ModelConfig, TrainConfig
from stsan.data import GriddedDataset, PreparedDataset, ingest_trips
from stsan.evaluation import evaluate
from stsan.synthetic import generate_synthetic
from stsan.training import train_stream_t, train_stsan

t0 = time.time()
grid = GridConfig(rows=8, cols=8, interval_minutes=30, intervals_per_day=48,
                  num_intervals=48 * 14, aoi_rows=7, aoi_cols=7, history_days=7,
                  period_window=1)
model = ModelConfig(d_model=16, heads=2, num_layers=2, ff_dim=64, head_hidden=64,
                    fusion_kernels=(3, 3), fusion_layers=2)
data_cfg = DataConfig(synth_days=14, synth_intensity=1.0, test_days=4)
seed = 1234

arr = generate_synthetic(grid, seed, days=14, intensity_scale=1.0)
print(f"trips: {len(arr)} ({time.time()-t0:.0f}s)")
flow, trans, rep = ingest_trips(arr, grid)
print("ingest:", rep.flow_total, rep.transition_total)
prep = PreparedDataset(GriddedDataset(grid, flow, trans), data_cfg, seed)
print(f"pairs: {len(prep.train_pairs)}/{len(prep.val_pairs)}/{len(prep.test_pairs)}"
      f" ({time.time()-t0:.0f}s)")

cfg1 = TrainConfig(phase="stream_t", max_steps=600, batch_size=32, wu_steps=400,
                   val_every=100, val_examples=256, lr_cap=1e-3)
r1 = train_stream_t(prep, grid, model, cfg1, seed)
print(f"phase1 history: {[(h['step'], round(h['val_loss'],6)) for h in r1.history]}")
print(f"phase1 done best={r1.best_val:.6f} final={r1.final_val:.6f} ({time.time()-t0:.0f}s)")

cfg2 = TrainConfig(phase="stsan", max_steps=2000, batch_size=32, wu_steps=400,
                   val_every=100, val_examples=256, lr_cap=1e-3)
r2 = train_stsan(prep, grid, model, cfg2, seed, stream_t_source=r1.store)
print(f"phase2 history: {[(h['step'], round(h['val_loss'],6)) for h in r2.history]}")
print(f"phase2 done best={r2.best_val:.6f} final={r2.final_val:.6f} ({time.time()-t0:.0f}s)")

report, _ = evaluate(r2.store, prep, model, filter_threshold=10.0)
for name in ("inflow", "outflow"):
    m, h = report.flows[name], report.ha[name]
    gain = 1.0 - m["rmse"] / h["rmse"]
    print(f"{name}: model rmse {m['rmse']:.3f} mae {m['mae']:.3f} | "
          f"HA rmse {h['rmse']:.3f} mae {h['mae']:.3f} | n={m['n']} | "
          f"rmse gain {gain:.1%}")
print(f"total: {time.time()-t0:.0f}s")
