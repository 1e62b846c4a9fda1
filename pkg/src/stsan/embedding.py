"""Input embedding: local convolution stack over each AoI time slice plus a
learned positional encoding from (weekday, interval-of-day) one-hots.

Kernels and the encoding perceptron are shared across nodes and slices
(standard weight tying); slices pass through the convolution stack
independently, so the stack commutes with any permutation of the time axis.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    ParamStore, Tensor, add, conv2d, elementwise, glorot_uniform, matmul,
    permute, reshape,
)
from .config import ModelConfig
from .errors import ContractError, DimensionError


def init_conv_stack(store: ParamStore, prefix: str, in_channels: int,
                    cfg: ModelConfig, rng: np.random.Generator):
    k = cfg.conv_kernel
    ch_in = in_channels
    for layer in range(cfg.conv_layers):
        fan_in = k * k * ch_in
        fan_out = k * k * cfg.d_model
        store.add(f"{prefix}.conv{layer}.kernel",
                  glorot_uniform(rng, (k, k, ch_in, cfg.d_model), fan_in, fan_out, store.dtype))
        store.add(f"{prefix}.conv{layer}.bias", np.zeros(cfg.d_model))
        ch_in = cfg.d_model


def init_positional_encoding(store: ParamStore, prefix: str, time_dim: int,
                             cfg: ModelConfig, rng: np.random.Generator):
    hidden = cfg.pe_hidden_dim
    store.add(f"{prefix}.pe.w0", glorot_uniform(rng, (time_dim, hidden), time_dim, hidden, store.dtype))
    store.add(f"{prefix}.pe.b0", np.zeros(hidden))
    store.add(f"{prefix}.pe.w1", glorot_uniform(rng, (hidden, cfg.d_model), hidden, cfg.d_model, store.dtype))
    store.add(f"{prefix}.pe.b1", np.zeros(cfg.d_model))


def init_embedding(store: ParamStore, prefix: str, in_channels: int,
                   time_dim: int, cfg: ModelConfig, rng: np.random.Generator):
    init_conv_stack(store, prefix, in_channels, cfg, rng)
    init_positional_encoding(store, prefix, time_dim, cfg, rng)


def _batched(x: Tensor, ndim: int) -> tuple[Tensor, bool]:
    if x.ndim == ndim:
        return x, True
    if x.ndim == ndim - 1:
        return reshape(x, (1,) + x.shape), False
    raise DimensionError(f"expected {ndim - 1}- or {ndim}-D input, got shape {x.shape}")


def local_conv_stack(r: Tensor, store: ParamStore, prefix: str,
                     cfg: ModelConfig) -> Tensor:
    """Project (.., a, b, s, w) windows to (.., a, b, s, d_model).

    Each of the stacked same-padded convolutions runs per time slice and is
    followed by ReLU.
    """
    x, batched = _batched(r, 5)
    # conv2d convolves the trailing (H, W, C) axes, so move time ahead of space
    x = permute(x, (0, 3, 1, 2, 4))        # (B, s, a, b, ch)
    for layer in range(cfg.conv_layers):
        kernel = store[f"{prefix}.conv{layer}.kernel"]
        bias = store[f"{prefix}.conv{layer}.bias"]
        x = elementwise(add(conv2d(x, kernel, padding="same"), bias), "relu")
    x = permute(x, (0, 2, 3, 1, 4))        # (B, a, b, s, d_model)
    return x if batched else reshape(x, x.shape[1:])


def _check_onehot(z: np.ndarray, time_dim: int):
    if z.shape[-1] != time_dim:
        raise ContractError(f"time one-hot width must be {time_dim}, got {z.shape[-1]}")
    if not np.all((z == 0.0) | (z == 1.0)):
        raise ContractError("time one-hot entries must be 0 or 1")
    day = z[..., :7].sum(axis=-1)
    slot = z[..., 7:].sum(axis=-1)
    if not (np.all(day == 1) and np.all(slot == 1)):
        raise ContractError(
            "each time one-hot row needs exactly one weekday and one interval slot")


def positional_encoding(z: Tensor, store: ParamStore, prefix: str,
                        cfg: ModelConfig) -> Tensor:
    """Two-layer perceptron (ReLU then sigmoid) from a time one-hot to (0,1)^d_model."""
    time_dim = store[f"{prefix}.pe.w0"].shape[0]
    _check_onehot(z.data, time_dim)
    single = z.ndim == 1
    x = reshape(z, (1, time_dim)) if single else z
    h = elementwise(add(matmul(x, store[f"{prefix}.pe.w0"]), store[f"{prefix}.pe.b0"]), "relu")
    out = elementwise(add(matmul(h, store[f"{prefix}.pe.w1"]), store[f"{prefix}.pe.b1"]), "sigmoid")
    return reshape(out, (cfg.d_model,)) if single else out


def embed_input(r: Tensor, times: Tensor, store: ParamStore, prefix: str,
                cfg: ModelConfig) -> Tensor:
    """Convolution-stack features plus per-slice positional encodings.

    times has one one-hot row per slice; its encoding is broadcast over the
    spatial axes of the matching slice.
    """
    x, batched = _batched(r, 5)
    t, _ = _batched(times, 3)
    if t.shape[1] != x.shape[3]:
        raise ContractError(
            f"times rows ({t.shape[1]}) must match window slices ({x.shape[3]})")
    if t.shape[0] != x.shape[0]:
        raise ContractError(
            f"times batch ({t.shape[0]}) must match window batch ({x.shape[0]})")
    h = local_conv_stack(x, store, prefix, cfg)
    pe = positional_encoding(t, store, prefix, cfg)              # (B, s, d_model)
    pe = reshape(pe, (pe.shape[0], 1, 1) + pe.shape[1:])         # broadcast over (a, b)
    out = add(h, pe)
    return out if batched else reshape(out, out.shape[1:])
