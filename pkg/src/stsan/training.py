"""Losses, Adam with warm-up, and the two-phase training protocol.

Phase 1 trains Stream-T alone against next-interval AoI transitions; phase 2
loads those weights, freezes them, and trains Stream-F plus the fusion head
against next-interval flows. Ablations: `skip_pretrain` trains both streams
jointly from scratch, `single_stream` drops the transition stream entirely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import FwdCtx
from .autodiff import ParamStore, Tape, Tensor, reduce_mean, sub
from .config import GridConfig, ModelConfig, TrainConfig
from .data import PreparedDataset
from .errors import CheckpointError, ConfigError, ContractError, TrainingDivergedError
from .model import (
    init_stream_t_params, init_stsan_params, load_checkpoint, merge_params,
    save_checkpoint, stream_t_forward, stsan_forward,
)

LOG_HEADER = "step,lr,train_loss,val_loss"


# --- losses -------------------------------------------------------------------

def _mse(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ContractError(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = sub(pred, target)
    return reduce_mean(diff * diff)


def mse_loss_transition(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over every predicted transition element in the batch."""
    return _mse(pred, target)


def mse_loss_flow(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over the (batch, w) flow predictions."""
    return _mse(pred, target)


# --- optimizer ------------------------------------------------------------------

def warmup_lr(step: int, d_model: int, wu_steps: int) -> float:
    """Linear ramp for wu_steps, then inverse-square-root decay; the two
    branches meet exactly at step == wu_steps."""
    if step < 1:
        raise ContractError(f"step must be >= 1, got {step}")
    return d_model ** -0.5 * min(step ** -0.5, step * wu_steps ** -1.5)


@dataclass
class OptimState:
    """Adam moments per parameter plus the shared step counter."""

    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamStore, grads: dict[str, np.ndarray],
              state: OptimState, lr: float):
    """One bias-corrected Adam update; frozen parameters are untouched."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, tensor in params.items():
        if params.is_frozen(name):
            continue
        g = grads.get(name)
        if g is None:
            raise ContractError(f"missing gradient for non-frozen parameter {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(tensor.data)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(tensor.data)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        tensor.data -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(tensor.data.dtype)


# --- training loops --------------------------------------------------------------

@dataclass
class TrainResult:
    store: ParamStore            # parameters at the best validation loss
    history: list[dict]
    best_val: float
    best_step: int
    final_val: float
    steps: int


def _val_loss(prepared: PreparedDataset, store: ParamStore, model: ModelConfig,
              loss_fn, val_pairs, batch_size: int) -> float:
    total, count = 0.0, 0
    for i in range(0, len(val_pairs), batch_size):
        chunk = val_pairs[i:i + batch_size]
        batch = prepared.batch(chunk)
        loss = loss_fn(batch, store, model, FwdCtx())
        total += loss.item() * len(chunk)
        count += len(chunk)
    return total / count


def _stream_t_loss(batch, store, model, ctx):
    pred = stream_t_forward(batch, store, model, ctx)
    return mse_loss_transition(pred, Tensor(batch.target_trans, dtype=store.dtype))


def _stsan_loss(batch, store, model, ctx):
    pred = stsan_forward(batch, store, model, ctx)
    return mse_loss_flow(pred, Tensor(batch.target_flow, dtype=store.dtype))


def _run_training(prepared: PreparedDataset, store: ParamStore,
                  model: ModelConfig, cfg: TrainConfig, seed: int, loss_fn,
                  checkpoint_path: str | None, log_path: str | None,
                  config_hash: str) -> TrainResult:
    if not prepared.train_pairs:
        raise ConfigError("empty training set")
    ss = np.random.SeedSequence([seed, 1 if cfg.phase == "stream_t" else 2])
    shuffle_rng, dropout_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    ctx = FwdCtx(training=True, dropout_rate=model.dropout_rate,
                 rng=dropout_rng, attn_dropout=model.attn_dropout)
    state = OptimState()
    val_pairs = prepared.val_pairs[:cfg.val_examples]

    history: list[dict] = []
    best_val = math.inf
    best_step = 0
    best_snapshot = store.snapshot()
    val = _val_loss(prepared, store, model, loss_fn, val_pairs, cfg.batch_size)
    history.append({"step": 0, "lr": 0.0, "train_loss": None, "val_loss": val})
    if val < best_val:
        best_val, best_step = val, 0

    order = shuffle_rng.permutation(len(prepared.train_pairs))
    cursor = 0
    window_losses: list[float] = []
    for step in range(1, cfg.max_steps + 1):
        if cursor + cfg.batch_size > len(order):
            order = shuffle_rng.permutation(len(prepared.train_pairs))
            cursor = 0
        picked = [prepared.train_pairs[i] for i in order[cursor:cursor + cfg.batch_size]]
        cursor += cfg.batch_size

        batch = prepared.batch(picked)
        lr = warmup_lr(step, model.d_model, cfg.wu_steps)
        if cfg.lr_cap is not None:
            lr = min(lr, cfg.lr_cap)
        with Tape() as tape:
            loss = loss_fn(batch, store, model, ctx)
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            raise TrainingDivergedError(step, loss_val)
        grads = tape.gradients(loss, store)
        adam_step(store, grads, state, lr)
        window_losses.append(loss_val)

        if step % cfg.val_every == 0 or step == cfg.max_steps:
            val = _val_loss(prepared, store, model, loss_fn, val_pairs, cfg.batch_size)
            history.append({
                "step": step, "lr": lr,
                "train_loss": sum(window_losses) / len(window_losses),
                "val_loss": val,
            })
            window_losses.clear()
            if val < best_val:
                best_val, best_step = val, step
                best_snapshot = store.snapshot()

    final_val = history[-1]["val_loss"]
    store.restore(best_snapshot)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, store, config_hash)
    if log_path is not None:
        write_training_log(log_path, history)
    return TrainResult(store=store, history=history, best_val=best_val,
                       best_step=best_step, final_val=final_val, steps=cfg.max_steps)


def write_training_log(path: str, history: list[dict]):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(LOG_HEADER + "\n")
        for row in history:
            train = "" if row["train_loss"] is None else f"{row['train_loss']:.10g}"
            fh.write(f"{row['step']},{row['lr']:.10g},{train},{row['val_loss']:.10g}\n")


def train_stream_t(prepared: PreparedDataset, grid: GridConfig, model: ModelConfig,
                   cfg: TrainConfig, seed: int, *, checkpoint_path: str | None = None,
                   log_path: str | None = None, config_hash: str = "") -> TrainResult:
    """Phase 1: minimize transition MSE with a fresh Stream-T."""
    if cfg.phase != "stream_t":
        raise ConfigError(f"train_stream_t called with phase {cfg.phase!r}")
    store = ParamStore(np.float32)
    init_rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    init_stream_t_params(store, grid, model, init_rng)
    return _run_training(prepared, store, model, cfg, seed, _stream_t_loss,
                         checkpoint_path, log_path, config_hash)


def train_stsan(prepared: PreparedDataset, grid: GridConfig, model: ModelConfig,
                cfg: TrainConfig, seed: int, stream_t_source=None, *,
                checkpoint_path: str | None = None, log_path: str | None = None,
                config_hash: str = "") -> TrainResult:
    """Phase 2: minimize flow MSE with Stream-T loaded and frozen.

    `stream_t_source` is a checkpoint path or ParamStore; it is required
    unless an ablation flag removes the need for pre-trained weights.
    """
    if cfg.phase != "stsan":
        raise ConfigError(f"train_stsan called with phase {cfg.phase!r}")
    store = ParamStore(np.float32)
    init_rng = np.random.default_rng(np.random.SeedSequence([seed, 12]))

    if cfg.single_stream:
        init_stsan_params(store, grid, model, init_rng, single_stream=True)
    elif cfg.skip_pretrain:
        init_stsan_params(store, grid, model, init_rng, with_stream_t=True)
    else:
        if stream_t_source is None:
            raise CheckpointError("stsan phase requires a Stream-T checkpoint "
                                  "(or the skip_pretrain/single_stream ablation)")
        if isinstance(stream_t_source, ParamStore):
            pretrained = stream_t_source
        else:
            pretrained, _ = load_checkpoint(stream_t_source)
        if not pretrained.has_prefix("stream_t."):
            raise CheckpointError("checkpoint contains no stream_t.* parameters")
        merge_params(store, pretrained,
                     [n for n in pretrained.names() if n.startswith("stream_t.")])
        store.freeze_prefix("stream_t.")
        init_stsan_params(store, grid, model, init_rng, with_stream_t=False)
    return _run_training(prepared, store, model, cfg, seed, _stsan_loss,
                         checkpoint_path, log_path, config_hash)
