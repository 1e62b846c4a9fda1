"""Two-stream assembly: stream heads, masked fusion, whole-map prediction,
freeze semantics, and the checkpoint format."""

import numpy as np
import pytest
from conftest import make_batch

from stsan.attention import FwdCtx
from stsan.autodiff import ParamStore, Tape, grad_check, tensor
from stsan.config import DataConfig, GridConfig, ModelConfig
from stsan.data import GriddedDataset, PreparedDataset, ingest_trips
from stsan.errors import CheckpointError, ContractError
from stsan.model import (
    init_fusion, init_stream_t_params, init_stsan_params, load_checkpoint,
    masked_fusion, predict_map, save_checkpoint, stream_decoder_features,
    stream_t_forward, stsan_forward,
)
from stsan.synthetic import generate_synthetic
from stsan.training import _stsan_loss, mse_loss_flow

F64 = np.float64


@pytest.fixture
def paper_like_grid():
    return GridConfig(rows=6, cols=6, interval_minutes=60, intervals_per_day=24,
                      num_intervals=24 * 4, aoi_rows=7, aoi_cols=7,
                      history_days=2, period_window=1)


@pytest.fixture
def small_model():
    return ModelConfig(d_model=8, heads=2, num_layers=1, ff_dim=16,
                       head_hidden=16, fusion_kernels=(3, 3), fusion_layers=2)


def test_stream_t_output_shape_and_range(paper_like_grid, small_model, rng):
    store = ParamStore(F64)
    init_stream_t_params(store, paper_like_grid, small_model, rng)
    batch = make_batch(rng, paper_like_grid, batch_size=3)
    out = stream_t_forward(batch, store, small_model)
    assert out.shape == (3, 7, 7, 2)
    assert np.all(np.abs(out.data) < 1.0)


def test_stream_t_zero_head_outputs_tanh_bias(paper_like_grid, small_model, rng):
    store = ParamStore(F64)
    init_stream_t_params(store, paper_like_grid, small_model, rng)
    store["stream_t.head.w"].data[:] = 0.0
    store["stream_t.head.b"].data[:] = [0.3, -0.2]
    batch = make_batch(rng, paper_like_grid, batch_size=2)
    out = stream_t_forward(batch, store, small_model)
    np.testing.assert_allclose(out.data[..., 0], np.tanh(0.3), atol=1e-12)
    np.testing.assert_allclose(out.data[..., 1], np.tanh(-0.2), atol=1e-12)


# --- masked fusion ------------------------------------------------------------

def fusion_store(grid, model, rng, single_stream=False):
    store = ParamStore(F64)
    init_fusion(store, grid, model, rng, single_stream=single_stream)
    return store


def test_fusion_shapes_7_to_576(paper_like_grid, rng):
    model = ModelConfig(d_model=64, heads=8, num_layers=1)
    store = fusion_store(paper_like_grid, model, rng)
    t0 = tensor(rng.standard_normal((2, 7, 7, 64)), dtype=F64)
    f0 = tensor(rng.standard_normal((2, 7, 7, 64)), dtype=F64)
    out = masked_fusion(t0, f0, store, model)
    assert out.shape == (2, 576)


def test_fusion_zero_mask_halves_features(paper_like_grid, small_model, rng):
    store = fusion_store(paper_like_grid, small_model, rng)
    for j in range(2):
        store[f"fusion.l{j}.mask.kernel"].data[:] = 0.0
        store[f"fusion.l{j}.mask.bias"].data[:] = 0.0
    t0 = tensor(rng.standard_normal((1, 7, 7, 8)), dtype=F64)
    f0 = tensor(rng.standard_normal((1, 7, 7, 8)), dtype=F64)
    gated = masked_fusion(t0, f0, store, small_model).data

    # reference: per layer e_j = conv(f) + b, f_j = 0.5 * e_j
    from stsan.autodiff import add, conv2d
    f = f0
    for j in range(2):
        e = add(conv2d(f, store[f"fusion.l{j}.feat.kernel"], padding="valid"),
                store[f"fusion.l{j}.feat.bias"])
        f = tensor(0.5 * e.data, dtype=F64)
    np.testing.assert_allclose(gated, f.data.reshape(1, -1), atol=1e-12)


def test_fusion_saturated_negative_mask_closes_gate(paper_like_grid, small_model, rng):
    store = fusion_store(paper_like_grid, small_model, rng)
    for j in range(2):
        store[f"fusion.l{j}.mask.kernel"].data[:] = 0.0
        store[f"fusion.l{j}.mask.bias"].data[:] = -60.0
    t0 = tensor(rng.standard_normal((1, 7, 7, 8)), dtype=F64)
    f0 = tensor(rng.standard_normal((1, 7, 7, 8)), dtype=F64)
    out = masked_fusion(t0, f0, store, small_model).data
    np.testing.assert_allclose(out, 0.0, atol=1e-12)


def test_fusion_gate_bound(paper_like_grid, small_model, rng):
    # |f_1| <= |e_1| elementwise after the first hybrid layer
    from stsan.autodiff import add, conv2d, mul, sigmoid
    store = fusion_store(paper_like_grid, small_model, rng)
    t0 = tensor(rng.standard_normal((1, 7, 7, 8)), dtype=F64)
    f0 = tensor(rng.standard_normal((1, 7, 7, 8)), dtype=F64)
    e1 = add(conv2d(f0, store["fusion.l0.feat.kernel"], padding="valid"),
             store["fusion.l0.feat.bias"])
    m1 = add(conv2d(t0, store["fusion.l0.mask.kernel"], padding="valid"),
             store["fusion.l0.mask.bias"])
    f1 = mul(sigmoid(m1), e1)
    assert np.all(np.abs(f1.data) <= np.abs(e1.data) + 1e-15)


def test_fusion_requires_t0_unless_single_stream(paper_like_grid, small_model, rng):
    store = fusion_store(paper_like_grid, small_model, rng)
    f0 = tensor(rng.standard_normal((1, 7, 7, 8)), dtype=F64)
    with pytest.raises(ContractError):
        masked_fusion(None, f0, store, small_model)
    store_ss = fusion_store(paper_like_grid, small_model, rng, single_stream=True)
    out = masked_fusion(None, f0, store_ss, small_model, single_stream=True)
    assert out.shape == (1, 3 * 3 * 8)


# --- full model -----------------------------------------------------------------

def test_stsan_forward_shape_and_range(paper_like_grid, small_model, rng):
    store = ParamStore(F64)
    init_stsan_params(store, paper_like_grid, small_model, rng)
    batch = make_batch(rng, paper_like_grid, batch_size=4)
    out = stsan_forward(batch, store, small_model)
    assert out.shape == (4, 2)
    assert np.all(np.abs(out.data) < 1.0)


def test_stsan_single_stream_ablation(paper_like_grid, small_model, rng):
    store = ParamStore(F64)
    init_stsan_params(store, paper_like_grid, small_model, rng, single_stream=True)
    assert not store.has_prefix("stream_t.")
    batch = make_batch(rng, paper_like_grid, batch_size=2)
    out = stsan_forward(batch, store, small_model)
    assert out.shape == (2, 2)
    assert np.all(np.isfinite(out.data))


def test_frozen_stream_t_gets_no_gradients(paper_like_grid, small_model, rng):
    store = ParamStore(F64)
    init_stream_t_params(store, paper_like_grid, small_model, rng)
    pretrained = {n: store[n].data.copy() for n in store.names()}
    fused = ParamStore(F64)
    for name, arr in pretrained.items():
        fused.add(name, arr)
    fused.freeze_prefix("stream_t.")
    init_stsan_params(fused, paper_like_grid, small_model, rng, with_stream_t=False)

    batch = make_batch(rng, paper_like_grid, batch_size=2)
    with Tape() as tape:
        loss = _stsan_loss(batch, fused, small_model, FwdCtx())
    grads = tape.gradients(loss, fused)
    assert not any(name.startswith("stream_t.") for name in grads)
    assert any(name.startswith("stream_f.") for name in grads)
    assert any(name.startswith("fusion.") for name in grads)


def test_stream_t_features_feed_fusion(paper_like_grid, small_model, rng):
    # changing transition inputs changes the fused output (gate is live)
    store = ParamStore(F64)
    init_stsan_params(store, paper_like_grid, small_model, rng)
    batch = make_batch(rng, paper_like_grid, batch_size=1)
    base = stsan_forward(batch, store, small_model).data.copy()
    batch.enc_trans = batch.enc_trans + 0.5
    out = stsan_forward(batch, store, small_model).data
    assert not np.allclose(base, out)


# --- predict_map -------------------------------------------------------------------

@pytest.fixture(scope="module")
def prepared_tiny():
    cfg = GridConfig(rows=6, cols=6, interval_minutes=60, intervals_per_day=24,
                     num_intervals=24 * 5, aoi_rows=5, aoi_cols=5,
                     history_days=2, period_window=1)
    arr = generate_synthetic(cfg, seed=13, days=5, intensity_scale=0.5)
    flow, trans, _ = ingest_trips(arr, cfg)
    ds = GriddedDataset(cfg, flow, trans)
    return PreparedDataset(ds, DataConfig(synth_days=5, test_days=1), seed=2)


def micro_model():
    return ModelConfig(d_model=8, heads=2, num_layers=1, ff_dim=16,
                       head_hidden=16, fusion_kernels=(3, 1), fusion_layers=2)


def test_predict_map_shape_nonneg_and_nodewise(prepared_tiny, rng):
    model = micro_model()
    store = ParamStore(np.float32)
    init_stsan_params(store, prepared_tiny.cfg, model, rng)
    t = prepared_tiny.test_start + 1
    grid = predict_map(store, prepared_tiny, t, model)
    cfg = prepared_tiny.cfg
    assert grid.shape == (cfg.rows, cfg.cols, cfg.flow_types)
    assert np.all(grid >= 0.0)

    # node-wise equality with an individually computed forward
    batch = prepared_tiny.batch([(3, 4, t)])
    y = stsan_forward(batch, store, model).data[0].astype(np.float64)
    expected = np.maximum(prepared_tiny.flow_normalizer.invert(y), 0.0)
    np.testing.assert_allclose(grid[3, 4], expected, rtol=1e-6, atol=1e-6)


def test_predict_map_taxi_grid_shape(rng):
    # 16 x 12 grid exercises non-square maps
    cfg = GridConfig(rows=16, cols=12, interval_minutes=60, intervals_per_day=24,
                     num_intervals=24 * 4, aoi_rows=5, aoi_cols=5,
                     history_days=2, period_window=1)
    arr = generate_synthetic(cfg, seed=3, days=4, intensity_scale=0.3)
    flow, trans, _ = ingest_trips(arr, cfg)
    prep = PreparedDataset(GriddedDataset(cfg, flow, trans),
                           DataConfig(synth_days=4, test_days=1), seed=0)
    model = micro_model()
    store = ParamStore(np.float32)
    init_stsan_params(store, cfg, model, rng)
    grid = predict_map(store, prep, prep.test_start, model)
    assert grid.shape == (16, 12, 2)


def test_predict_map_deterministic(prepared_tiny, rng):
    model = micro_model()
    store = ParamStore(np.float32)
    init_stsan_params(store, prepared_tiny.cfg, model, rng)
    t = prepared_tiny.test_start
    a = predict_map(store, prepared_tiny, t, model)
    b = predict_map(store, prepared_tiny, t, model)
    np.testing.assert_array_equal(a, b)


# --- checkpoints --------------------------------------------------------------------

def test_checkpoint_roundtrip_bit_exact(tmp_path, paper_like_grid, small_model, rng):
    store = ParamStore(np.float32)
    init_stream_t_params(store, paper_like_grid, small_model, rng)
    store.freeze(["stream_t.head.b"])
    path = tmp_path / "model.stck"
    save_checkpoint(path, store, "cafe1234")
    back, chash = load_checkpoint(path)
    assert chash == "cafe1234"
    assert back.names() == store.names()
    assert back.frozen == store.frozen
    assert back.dtype == np.float32
    for name in store.names():
        np.testing.assert_array_equal(back[name].data, store[name].data)
    # identical bytes on re-save
    path2 = tmp_path / "model2.stck"
    save_checkpoint(path2, back, chash)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_hash_mismatch(tmp_path, paper_like_grid, small_model, rng):
    store = ParamStore(np.float32)
    init_stream_t_params(store, paper_like_grid, small_model, rng)
    path = tmp_path / "model.stck"
    save_checkpoint(path, store, "aaaa")
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expected_config_hash="bbbb")
    load_checkpoint(path, expected_config_hash="aaaa")


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.stck")


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.stck"
    path.write_bytes(b"JUNKJUNKJUNK")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


# --- full-model micro gradient check ------------------------------------------------

def test_full_model_gradient_micro(rng):
    grid = GridConfig(rows=6, cols=6, interval_minutes=360, intervals_per_day=4,
                      num_intervals=16, aoi_rows=5, aoi_cols=5, history_days=2,
                      period_window=1)
    model = micro_model()
    store = ParamStore(F64)
    # tiny d_model keeps this under a few seconds
    tiny = ModelConfig(d_model=4, heads=2, num_layers=1, ff_dim=8, head_hidden=8,
                       fusion_kernels=(3, 1), fusion_layers=2, fusion_channels=4)
    init_stsan_params(store, grid, tiny, rng)
    batch = make_batch(rng, grid, batch_size=1)
    err = grad_check(lambda p: _stsan_loss(batch, p, tiny, FwdCtx()), store,
                     h=1e-5, refine_h=(1e-6, 1e-4))
    assert err < 1e-4
