#!/usr/bin/env python3
"""Benchmark the compiled kernel core against the pure-numpy fallback.

Runs each kernel on shapes representative of desk-scale training (the
reduced 16-dim model, batch 32) and of the full-size 64-dim configuration,
then times one full forward+backward model step under each backend.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from stsan.kernels import numpy_backend

try:
    from stsan.kernels import _core as compiled
except ImportError:
    compiled = None


def timeit(fn, repeats):
    fn()  # warm-up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(repeats):
    rng = np.random.default_rng(0)
    cases = []

    for label, (n, h, w, c, k) in [
        ("conv 16ch (train step)", (288, 7, 7, 16, 3)),
        ("conv 64ch (full size)", (288, 7, 7, 64, 3)),
        ("conv 2ch (input layer)", (288, 7, 7, 2, 3)),
    ]:
        x = np.ascontiguousarray(rng.standard_normal((n, h, w, c)), dtype=np.float32)
        ho, wo = h - k + 1, w - k + 1
        g = np.ascontiguousarray(
            rng.standard_normal((n * ho * wo, k * k * c)), dtype=np.float32)
        cases.append((f"im2col  {label}", lambda b, x=x, k=k: b.im2col(x, k, k)))
        cases.append((f"col2im  {label}",
                      lambda b, g=g, n=n, h=h, w=w, c=c, k=k: b.col2im(g, n, h, w, c, k, k)))

    x_sm = np.ascontiguousarray(rng.standard_normal((32 * 49 * 2, 9)), dtype=np.float32)
    y_sm = numpy_backend.softmax_forward(x_sm)
    g_sm = np.ascontiguousarray(rng.standard_normal(x_sm.shape), dtype=np.float32)
    cases.append(("softmax fwd (32x7x7x2, s=9)", lambda b: b.softmax_forward(x_sm)))
    cases.append(("softmax bwd", lambda b: b.softmax_backward(g_sm, y_sm)))

    x_ln = np.ascontiguousarray(rng.standard_normal((32 * 49 * 9, 16)), dtype=np.float32)
    gamma = np.ones(16, dtype=np.float32)
    beta = np.zeros(16, dtype=np.float32)
    _, xhat, inv_std = numpy_backend.layer_norm_forward(x_ln, gamma, beta, 1e-6)
    g_ln = np.ascontiguousarray(rng.standard_normal(x_ln.shape), dtype=np.float32)
    cases.append(("layernorm fwd (14112x16)",
                  lambda b: b.layer_norm_forward(x_ln, gamma, beta, 1e-6)))
    cases.append(("layernorm bwd",
                  lambda b: b.layer_norm_backward(g_ln, xhat, inv_std, gamma)))

    print(f"{'kernel':<34} {'numpy':>10} {'compiled':>10} {'speedup':>8}")
    for label, fn in cases:
        t_np = timeit(lambda: fn(numpy_backend), repeats)
        if compiled is None:
            print(f"{label:<34} {t_np * 1e3:9.3f}ms {'n/a':>10} {'':>8}")
            continue
        t_c = timeit(lambda: fn(compiled), repeats)
        print(f"{label:<34} {t_np * 1e3:9.3f}ms {t_c * 1e3:9.3f}ms {t_np / t_c:7.2f}x")


def bench_model_step(repeats):
    """One forward+backward training step under each backend selection."""
    import importlib
    import os
    import subprocess
    import sys

    code = r"""
import time
import numpy as np
from stsan.config import GridConfig, ModelConfig
from stsan.data import Batch
from stsan.autodiff import ParamStore, Tape
from stsan.attention import FwdCtx
from stsan import kernels, model as M, training as T

grid = GridConfig(period_window=1)
mc = ModelConfig(d_model=16, heads=2, num_layers=2, ff_dim=64, head_hidden=64)
rng = np.random.default_rng(0)
s, a, b, w = grid.window_slices, 7, 7, 2
def onehots(n):
    out = np.zeros((n, grid.time_feature_dim))
    for i in range(n):
        out[i, rng.integers(0, 7)] = 1; out[i, 7 + rng.integers(0, 48)] = 1
    return out
batch = Batch(pairs=[(0, 0, 400)] * 32,
    enc_flow=rng.uniform(0, 1, (32, a, b, s - 1, w)).astype(np.float32),
    dec_flow=rng.uniform(0, 1, (32, a, b, 1, w)).astype(np.float32),
    enc_trans=rng.uniform(0, 1, (32, a, b, s - 1, w)).astype(np.float32),
    dec_trans=rng.uniform(0, 1, (32, a, b, 1, w)).astype(np.float32),
    enc_times=np.stack([onehots(s - 1)] * 32), dec_times=np.stack([onehots(1)] * 32),
    target_flow=rng.uniform(0, 1, (32, w)).astype(np.float32),
    target_trans=rng.uniform(0, 1, (32, a, b, w)).astype(np.float32))
store = ParamStore(np.float32)
M.init_stsan_params(store, grid, mc, np.random.default_rng(1))
ctx = FwdCtx(training=True, dropout_rate=0.1, rng=np.random.default_rng(2))
def step():
    with Tape() as tape:
        loss = T._stsan_loss(batch, store, mc, ctx)
    tape.gradients(loss, store)
step()
best = min(
    (lambda t0: (step(), time.perf_counter() - t0)[1])(time.perf_counter())
    for _ in range(%d))
print(f"{kernels.BACKEND}: {best * 1e3:.1f} ms / training step")
"""
    for backend in ("numpy", "compiled"):
        env = dict(os.environ, STSAN_BACKEND=backend)
        out = subprocess.run([sys.executable, "-c", code % repeats],
                             capture_output=True, text=True, env=env)
        print(out.stdout.strip() or out.stderr.strip())


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()
    if compiled is None:
        print("compiled core not built; showing numpy-only timings")
    bench_kernels(args.repeats)
    print()
    bench_model_step(max(3, args.repeats // 4))


if __name__ == "__main__":
    main()
