"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s` to stream the lines; the
whole suite (dominated by the end-to-end learning runs) takes roughly
20-30 minutes on commodity hardware.
"""

import dataclasses
import json
import subprocess
import sys
import time

import numpy as np
import pytest
from conftest import make_batch, op_grad_check

from stsan.attention import FwdCtx, scaled_dot_product_attention
from stsan.autodiff import (
    ParamStore, Tape, add, concat, conv2d, dropout, grad_check, layer_norm,
    matmul, matmul_last2, mul, neg, permute, reduce_mean, reduce_sum, relu,
    reshape, sigmoid, softmax_last, sub, tanh, tensor,
)
from stsan.config import DataConfig, GridConfig, ModelConfig, TrainConfig
from stsan.data import GriddedDataset, PreparedDataset, ingest_trips
from stsan.evaluation import evaluate, ha_baseline, rmse_mae
from stsan.model import init_stsan_params, masked_fusion, stream_decoder_features, stsan_forward
from stsan.synthetic import generate_synthetic
from stsan.training import (
    _stream_t_loss, _stsan_loss, train_stream_t, train_stsan, warmup_lr,
)

MONDAY = 1451865600


def report(num: int, ok: bool, detail: str):
    print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {num}: {detail}")
    assert ok, f"criterion {num} failed: {detail}"


# --- shared end-to-end artifacts (criteria 6, 7, 8) -----------------------------

C6_GRID = GridConfig(rows=8, cols=8, interval_minutes=30, intervals_per_day=48,
                     num_intervals=48 * 14, aoi_rows=7, aoi_cols=7,
                     history_days=7, period_window=1, start_timestamp=MONDAY)
C6_MODEL = ModelConfig(d_model=16, heads=2, num_layers=2, ff_dim=64,
                       head_hidden=64, fusion_kernels=(3, 3), fusion_layers=2)
C6_SEED = 1234
C6_STEPS_T = 800
C6_STEPS_F = 1200


@pytest.fixture(scope="module")
def c6_prepared():
    arr = generate_synthetic(C6_GRID, C6_SEED, days=14, intensity_scale=1.0)
    flow, trans, _ = ingest_trips(arr, C6_GRID)
    return PreparedDataset(GriddedDataset(C6_GRID, flow, trans),
                           DataConfig(synth_days=14, test_days=4), C6_SEED)


@pytest.fixture(scope="module")
def c6_run(c6_prepared):
    """Two-phase training at the reduced configuration, timed end to end."""
    t0 = time.time()
    cfg_t = TrainConfig(phase="stream_t", max_steps=C6_STEPS_T, batch_size=32,
                        wu_steps=400, val_every=100, val_examples=256)
    r1 = train_stream_t(c6_prepared, C6_GRID, C6_MODEL, cfg_t, C6_SEED)
    cfg_f = TrainConfig(phase="stsan", max_steps=C6_STEPS_F, batch_size=32,
                        wu_steps=400, val_every=100, val_examples=256)
    r2 = train_stsan(c6_prepared, C6_GRID, C6_MODEL, cfg_f, C6_SEED,
                     stream_t_source=r1.store)
    metrics, _ = evaluate(r2.store, c6_prepared, C6_MODEL, filter_threshold=10.0)
    elapsed = time.time() - t0
    return {"r1": r1, "r2": r2, "metrics": metrics, "elapsed": elapsed}


# --- criterion 1: gradient fidelity ------------------------------------------------


def test_criterion_1_gradient_fidelity():
    t0 = time.time()
    rng = np.random.default_rng(7)
    tol = 1e-4
    refine = dict(h=1e-5, refine_h=(1e-6, 1e-4))

    # every differentiable op, finite-difference-checked
    op_cases = [
        ("add", lambda a, b: add(a, b), [(3, 4), (4,)]),
        ("sub", lambda a, b: sub(a, b), [(3, 4), (3, 4)]),
        ("mul", lambda a, b: mul(a, b), [(3, 4), (3, 1)]),
        ("neg", lambda a: neg(a), [(5,)]),
        ("matmul", lambda a, b: matmul(a, b), [(2, 3, 5), (5, 4)]),
        ("matmul_last2", lambda a, b: matmul_last2(a, b), [(2, 4, 3), (2, 3, 4)]),
        ("permute", lambda a: permute(a, (1, 2, 0)), [(2, 3, 4)]),
        ("reshape", lambda a: reshape(a, (12,)), [(3, 4)]),
        ("concat", lambda a, b: concat([a, b], axis=-1), [(3, 2), (3, 3)]),
        ("reduce_sum", lambda a: reduce_sum(a, axis=0), [(3, 4)]),
        ("reduce_mean", lambda a: reduce_mean(a), [(3, 4)]),
        ("softmax_last", lambda a: softmax_last(a), [(4, 6)]),
        ("sigmoid", lambda a: sigmoid(a), [(4, 4)]),
        ("tanh", lambda a: tanh(a), [(4, 4)]),
        ("layer_norm", lambda a, g, b: layer_norm(a, g, b, 1e-6), [(4, 6), (6,), (6,)]),
        ("conv2d same", lambda a, k: conv2d(a, k, "same"), [(2, 5, 5, 2), (3, 3, 2, 2)]),
        ("conv2d valid", lambda a, k: conv2d(a, k, "valid"), [(2, 5, 5, 2), (3, 3, 2, 2)]),
        ("attention", lambda q, k, v: scaled_dot_product_attention(q, k, v),
         [(2, 3, 4), (2, 5, 4), (2, 5, 4)]),
    ]
    worst_ops = 0.0
    for name, build, shapes in op_cases:
        arrays = [rng.uniform(-1.5, 1.5, s) for s in shapes]
        if name.startswith("relu"):
            for a in arrays:
                a[np.abs(a) < 0.05] += 0.1
        err = op_grad_check(build, arrays)
        worst_ops = max(worst_ops, err)
        assert err < tol, f"{name}: {err:.3e}"
    relu_x = rng.uniform(-1.5, 1.5, (4, 4))
    relu_x[np.abs(relu_x) < 0.05] += 0.1
    worst_ops = max(worst_ops, op_grad_check(lambda a: relu(a), [relu_x]))
    drop_err = op_grad_check(
        lambda a: dropout(a, 0.3, training=True, rng=np.random.default_rng(3)),
        [rng.uniform(0.5, 1.5, (5, 5))])
    worst_ops = max(worst_ops, drop_err)

    # full micro-scale model: a=b=5, d_model=8, u=2, N=1, L=2 (3x3 then 1x1)
    grid = GridConfig(rows=6, cols=6, interval_minutes=360, intervals_per_day=4,
                      num_intervals=16, aoi_rows=5, aoi_cols=5, history_days=2,
                      period_window=1, start_timestamp=MONDAY)
    model = ModelConfig(d_model=8, heads=2, num_layers=1, ff_dim=16,
                        head_hidden=16, fusion_kernels=(3, 1), fusion_layers=2)
    batch = make_batch(np.random.default_rng(42), grid)

    stsan_store = ParamStore(np.float64)
    init_stsan_params(stsan_store, grid, model, np.random.default_rng(5))
    err_full = grad_check(lambda p: _stsan_loss(batch, p, model, FwdCtx()),
                          stsan_store, **refine)

    from stsan.model import init_stream_t_params
    t_store = ParamStore(np.float64)
    init_stream_t_params(t_store, grid, model, np.random.default_rng(6))
    err_stream_t = grad_check(lambda p: _stream_t_loss(batch, p, model, FwdCtx()),
                              t_store, **refine)

    elapsed = time.time() - t0
    ok = worst_ops < tol and err_full < tol and err_stream_t < tol and elapsed < 300
    report(1, ok, f"op max err {worst_ops:.2e}, full model {err_full:.2e}, "
                  f"transition stream {err_stream_t:.2e} (< {tol}); {elapsed:.0f}s < 300s")


# --- criterion 2: attention normalization ------------------------------------------

def test_criterion_2_softmax_normalization():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        x = tensor(rng.uniform(-50, 50, rng.integers(1, 16)), dtype=np.float64)
        worst = max(worst, abs(softmax_last(x).data.sum() - 1.0))
    ok = worst < 1e-12
    report(2, ok, f"softmax slice sums within {worst:.2e} of 1 over 1000 inputs (< 1e-12)")


# --- criterion 3: warm-up schedule ---------------------------------------------------

def test_criterion_3_warmup_schedule():
    peak = warmup_lr(4000, 64, 4000)
    ramp = 4000 * 4000.0 ** -1.5
    decay = 4000.0 ** -0.5
    branch_gap = abs(ramp - decay) / decay
    ok = abs(peak - 1.9764e-3) <= 1e-7 and branch_gap <= 1e-12
    report(3, ok, f"warmup_lr(4000;64;4000) = {peak:.6e} (=1.9764e-3 +- 1e-7), "
                  f"branch agreement {branch_gap:.1e} (< 1e-12)")


# --- criterion 4: ingestion oracle ----------------------------------------------------

def test_criterion_4_ingestion_oracle():
    from test_data import brute_force_ingest
    cfg = GridConfig(rows=8, cols=8, interval_minutes=30, intervals_per_day=48,
                     num_intervals=48 * 3, aoi_rows=7, aoi_cols=7, history_days=2,
                     period_window=1, start_timestamp=MONDAY)
    arr = generate_synthetic(cfg, seed=404, days=3, intensity_scale=0.5)
    assert len(arr) >= 10_000, f"need 10^4 trips, generated {len(arr)}"
    arr = arr[:10_000]
    flow, trans, rep = ingest_trips(arr, cfg)
    oflow, otrans, _ = brute_force_ingest(arr, cfg)

    flows_equal = np.array_equal(flow, oflow)
    trans_equal = np.array_equal(trans, otrans)
    bounded = trans.sum() <= flow.sum()

    # threshold-m exclusions: recount gap > m pairs that were otherwise in-AoI
    sec = cfg.interval_minutes * 60
    a2, b2 = cfg.aoi_rows // 2, cfg.aoi_cols // 2
    excluded = 0
    for s_ts, e_ts, sr, sc, er, ec in arr.tolist():
        if (sr, sc) == (er, ec):
            continue
        gap = (e_ts - cfg.start_timestamp) // sec - (s_ts - cfg.start_timestamp) // sec
        if abs(er - sr) <= a2 and abs(ec - sc) <= b2 and gap > cfg.transition_threshold:
            excluded += 1
    exclusions_exact = excluded == rep.excluded_by_threshold and excluded > 0

    ok = flows_equal and trans_equal and bounded and exclusions_exact
    report(4, ok, f"10^4 trips: flow/transition tensors equal brute-force recount "
                  f"exactly; transition total {trans.sum():.0f} <= flow total "
                  f"{flow.sum():.0f}; {excluded} threshold exclusions exact")


# --- criterion 5: shape/fusion arithmetic at paper scale --------------------------------

def test_criterion_5_paper_scale_shapes_and_speed():
    grid = GridConfig(rows=8, cols=8, interval_minutes=30, intervals_per_day=48,
                      num_intervals=48 * 9, aoi_rows=7, aoi_cols=7, history_days=7,
                      period_window=1, start_timestamp=MONDAY)
    model = ModelConfig()   # d_model=64, u=8, N=4, L=2, ff 128
    assert grid.window_slices == 9
    flat = model.flat_dim(7, 7)

    store = ParamStore(np.float32)
    init_stsan_params(store, grid, model, np.random.default_rng(1))
    batch = make_batch(np.random.default_rng(2), grid, dtype=np.float32)

    t0 = time.time()
    with Tape() as tape:
        loss = _stsan_loss(batch, store, model, FwdCtx())
    grads = tape.gradients(loss, store)
    elapsed = time.time() - t0

    y = stsan_forward(batch, store, model)
    f0 = stream_decoder_features(batch, store, "stream_f", model)
    t0f = stream_decoder_features(batch, store, "stream_t", model)
    fused = masked_fusion(t0f, f0, store, model)

    ok = (y.shape == (1, 2) and flat == 576 and fused.shape == (1, 576)
          and elapsed < 10 and len(grads) == len(store))
    report(5, ok, f"paper config: prediction shape {y.shape[1:]} per node, fusion "
                  f"flatten length {fused.shape[1]} (= 576), forward+backward "
                  f"{elapsed:.2f}s < 10s")


# --- criterion 6: end-to-end learning beats HA ------------------------------------------

def test_criterion_6_beats_historical_average(c6_run):
    m = c6_run["metrics"].flows["inflow"]
    h = c6_run["metrics"].ha["inflow"]
    gain = 1.0 - m["rmse"] / h["rmse"]
    elapsed = c6_run["elapsed"]
    steps_ok = C6_STEPS_T <= 2000 and C6_STEPS_F <= 2000
    ok = gain >= 0.15 and elapsed <= 1800 and steps_ok
    report(6, ok, f"inflow RMSE {m['rmse']:.3f} vs HA {h['rmse']:.3f} "
                  f"(-{gain:.1%}, needs >= 15%), n={m['n']}, "
                  f"{C6_STEPS_T}+{C6_STEPS_F} steps, runtime {elapsed / 60:.1f} min <= 30")


# --- criterion 7: independent-training ablation -------------------------------------------

def test_criterion_7_independent_training_ablation(c6_prepared, c6_run):
    steps = 300
    wins = 0
    details = []
    for seed in (1, 2, 3, 4, 5):
        cfg_frozen = TrainConfig(phase="stsan", max_steps=steps, batch_size=24,
                                 wu_steps=150, val_every=steps, val_examples=192)
        frozen = train_stsan(c6_prepared, C6_GRID, C6_MODEL, cfg_frozen, seed,
                             stream_t_source=c6_run["r1"].store)
        cfg_joint = dataclasses.replace(cfg_frozen, skip_pretrain=True)
        joint = train_stsan(c6_prepared, C6_GRID, C6_MODEL, cfg_joint, seed)
        wins += frozen.final_val <= joint.final_val
        details.append(f"seed {seed}: IT {frozen.final_val:.5f} vs "
                       f"joint {joint.final_val:.5f}")
    ok = wins >= 3
    report(7, ok, f"pre-trained frozen Stream-T matches or beats joint training "
                  f"in {wins}/5 seeds (needs >= 3); " + "; ".join(details))


# --- criterion 8: freeze integrity ----------------------------------------------------------

def test_criterion_8_freeze_integrity(c6_run):
    before = c6_run["r1"].store.payload_hash("stream_t.")
    after = c6_run["r2"].store.payload_hash("stream_t.")
    ok = before == after and len(before) == 64
    report(8, ok, f"sha256(stream_t.*) before {before[:16]}... == after "
                  f"{after[:16]}... (bitwise)")


# --- criterion 9: command determinism --------------------------------------------------------

def test_criterion_9_cli_determinism(tmp_path):
    cfg = {
        "grid": {"rows": 6, "cols": 6, "interval_minutes": 60,
                 "intervals_per_day": 24, "num_intervals": 24 * 5,
                 "aoi_rows": 5, "aoi_cols": 5, "history_days": 2,
                 "period_window": 1, "start_timestamp": MONDAY},
        "model": {"d_model": 8, "heads": 2, "num_layers": 1, "ff_dim": 16,
                  "head_hidden": 16, "fusion_kernels": [3, 1], "fusion_layers": 2},
        "train": {"max_steps": 20, "batch_size": 8, "wu_steps": 10,
                  "val_every": 10, "val_examples": 32},
        "data": {"synth_days": 5, "synth_intensity": 0.5, "test_days": 1},
        "eval": {"filter_threshold": 5.0},
        "seed": 99,
    }
    (tmp_path / "config.json").write_text(json.dumps(cfg))

    def run(args):
        out = subprocess.run(
            [sys.executable, "-m", "stsan", "--threads", "1", *map(str, args)],
            capture_output=True, text=True, cwd=tmp_path)
        assert out.returncode == 0, out.stderr
        return out

    artifacts = {}
    for tag in ("a", "b"):
        run(["synth", "--config", "config.json", "--out", f"trips_{tag}.csv"])
        run(["ingest", "--config", "config.json", "--trips", f"trips_{tag}.csv",
             "--out", f"data_{tag}.stsn"])
        run(["train", "--config", "config.json", "--phase", "stream-t",
             "--data", f"data_{tag}.stsn", "--out", f"t_{tag}.stck",
             "--log", f"tlog_{tag}.csv"])
        run(["train", "--config", "config.json", "--phase", "stsan",
             "--from-checkpoint", f"t_{tag}.stck", "--data", f"data_{tag}.stsn",
             "--out", f"s_{tag}.stck", "--log", f"slog_{tag}.csv"])
        run(["eval", "--config", "config.json", "--checkpoint", f"s_{tag}.stck",
             "--data", f"data_{tag}.stsn", "--report", f"rep_{tag}"])
        run(["predict", "--config", "config.json", "--checkpoint", f"s_{tag}.stck",
             "--data", f"data_{tag}.stsn", "--at", 24 * 5 - 1,
             "--out", f"pred_{tag}.csv"])
        artifacts[tag] = [
            (tmp_path / f"trips_{tag}.csv").read_bytes(),
            (tmp_path / f"data_{tag}.stsn").read_bytes(),
            (tmp_path / f"t_{tag}.stck").read_bytes(),
            (tmp_path / f"tlog_{tag}.csv").read_bytes(),
            (tmp_path / f"s_{tag}.stck").read_bytes(),
            (tmp_path / f"slog_{tag}.csv").read_bytes(),
            (tmp_path / f"rep_{tag}.json").read_bytes(),
            (tmp_path / f"rep_{tag}.csv").read_bytes(),
            (tmp_path / f"pred_{tag}.csv").read_bytes(),
        ]
    same = [x == y for x, y in zip(artifacts["a"], artifacts["b"])]
    ok = all(same)
    report(9, ok, f"synth/ingest/train x2/eval/predict byte-identical across two "
                  f"seeded --threads 1 runs ({sum(same)}/{len(same)} artifacts)")


# --- criterion 10: metric unit tests -----------------------------------------------------------

def test_criterion_10_metric_exactness():
    rmse, mae, n = rmse_mae([12.0, 14.0], [10.0, 10.0])
    sqrt10_ok = abs(rmse - np.sqrt(10.0)) <= 1e-12 and abs(mae - 3.0) <= 1e-12 and n == 2

    frmse, fmae, fn = rmse_mae([0.0, 25.0], [5.0, 20.0])
    filter_ok = frmse == 5.0 and fmae == 5.0 and fn == 1

    cfg = GridConfig(rows=4, cols=4, interval_minutes=720, intervals_per_day=2,
                     num_intervals=16, aoi_rows=3, aoi_cols=3, history_days=2,
                     period_window=1, start_timestamp=MONDAY)
    flow = np.zeros((4, 4, 16, 2))
    flow[1, 1, [0, 2, 4], 0] = [10.0, 20.0, 30.0]
    ha_ok = ha_baseline(flow, (0, 6), 6, (1, 1), 0, cfg) == 20.0

    ok = sqrt10_ok and filter_ok and ha_ok
    report(10, ok, f"rmse=sqrt(10) and filter cases exact to 1e-12; "
                   f"HA mean of [10,20,30] = 20 exact")
