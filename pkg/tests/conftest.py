"""Shared fixtures: micro configs small enough for finite-difference checks
and quick training runs, plus batch builders for model-level tests."""

import numpy as np
import pytest

from stsan.autodiff import ParamStore, grad_check, mul, reduce_sum, tensor
from stsan.config import DataConfig, GridConfig, ModelConfig
from stsan.data import Batch


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_grid():
    """a=b=5 AoI, 4 intervals/day, 2-day history: s = 4 window slices."""
    return GridConfig(rows=6, cols=6, interval_minutes=360, intervals_per_day=4,
                      num_intervals=16, aoi_rows=5, aoi_cols=5, history_days=2,
                      period_window=1)


@pytest.fixture
def micro_model():
    """d_model=8, u=2, N=1; fusion 3x3 then 1x1 so the 5x5 AoI shrinks to 3x3."""
    return ModelConfig(d_model=8, heads=2, num_layers=1, ff_dim=16,
                       head_hidden=16, fusion_kernels=(3, 1), fusion_layers=2)


@pytest.fixture
def tiny_grid():
    """6x6 grid, hourly intervals, 6 days: fast end-to-end pipeline runs."""
    return GridConfig(rows=6, cols=6, interval_minutes=60, intervals_per_day=24,
                      num_intervals=24 * 6, aoi_rows=5, aoi_cols=5,
                      history_days=2, period_window=1)


@pytest.fixture
def tiny_data_cfg():
    return DataConfig(synth_days=6, synth_intensity=0.5, test_days=1)


def random_onehots(rng, n, grid):
    out = np.zeros((n, grid.time_feature_dim))
    for i in range(n):
        out[i, rng.integers(0, 7)] = 1.0
        out[i, 7 + rng.integers(0, grid.intervals_per_day)] = 1.0
    return out


def make_batch(rng, grid, batch_size=1, dtype=np.float64):
    """Random, well-formed Batch for direct model-forward tests."""
    s = grid.window_slices
    a, b, w = grid.aoi_rows, grid.aoi_cols, grid.flow_types

    def u(shape):
        return rng.uniform(0.0, 1.0, shape).astype(dtype)

    return Batch(
        pairs=[(0, 0, grid.min_target)] * batch_size,
        enc_flow=u((batch_size, a, b, s - 1, w)),
        dec_flow=u((batch_size, a, b, 1, w)),
        enc_trans=u((batch_size, a, b, s - 1, w)),
        dec_trans=u((batch_size, a, b, 1, w)),
        enc_times=np.stack([random_onehots(rng, s - 1, grid) for _ in range(batch_size)]),
        dec_times=np.stack([random_onehots(rng, 1, grid) for _ in range(batch_size)]),
        target_flow=u((batch_size, w)),
        target_trans=u((batch_size, a, b, w)),
    )


def op_grad_check(build, arrays, h=1e-6, rng=None):
    """Finite-difference check for an op: `build(*tensors) -> Tensor` of any
    shape; the output is contracted with a fixed random projection so every
    output element contributes to the scalar."""
    ps = ParamStore(np.float64)
    ts = [ps.add(f"x{i}", a) for i, a in enumerate(arrays)]
    probe_rng = rng or np.random.default_rng(99)
    probe = {}

    def f(p):
        out = build(*[p[f"x{i}"] for i in range(len(ts))])
        if "r" not in probe:
            probe["r"] = tensor(probe_rng.standard_normal(out.shape), dtype=np.float64)
        return reduce_sum(mul(out, probe["r"]))

    return grad_check(f, ps, h=h)
