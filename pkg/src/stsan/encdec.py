"""Encoder and decoder stacks: identical layers of spatial-temporal
multi-head self-attention and position-wise feed-forward sub-layers, each
wrapped post-norm as LayerNorm(x + Dropout(Sublayer(x))). Decoder layers
insert an extra attention sub-layer over the encoder output."""

from __future__ import annotations

import numpy as np

from .attention import EVAL_CTX, FwdCtx, init_mha, st_multi_head_attention
from .autodiff import (
    ParamStore, Tensor, add, dropout, elementwise, glorot_uniform,
    layer_norm, matmul,
)
from .config import ModelConfig
from .errors import DimensionError


def init_feed_forward(store: ParamStore, prefix: str, cfg: ModelConfig,
                      rng: np.random.Generator):
    d, ff = cfg.d_model, cfg.ff_dim
    store.add(f"{prefix}.w1", glorot_uniform(rng, (d, ff), d, ff, store.dtype))
    store.add(f"{prefix}.b1", np.zeros(ff))
    store.add(f"{prefix}.w2", glorot_uniform(rng, (ff, d), ff, d, store.dtype))
    store.add(f"{prefix}.b2", np.zeros(d))


def init_layer_norm(store: ParamStore, prefix: str, d: int):
    store.add(f"{prefix}.gamma", np.ones(d))
    store.add(f"{prefix}.beta", np.zeros(d))


def init_encoder(store: ParamStore, prefix: str, cfg: ModelConfig,
                 rng: np.random.Generator):
    for layer in range(cfg.num_layers):
        base = f"{prefix}.l{layer}"
        init_mha(store, f"{base}.mha", cfg.d_model, cfg.heads, rng)
        init_layer_norm(store, f"{base}.ln1", cfg.d_model)
        init_feed_forward(store, f"{base}.ff", cfg, rng)
        init_layer_norm(store, f"{base}.ln2", cfg.d_model)


def init_decoder(store: ParamStore, prefix: str, cfg: ModelConfig,
                 rng: np.random.Generator):
    for layer in range(cfg.num_layers):
        base = f"{prefix}.l{layer}"
        init_mha(store, f"{base}.self", cfg.d_model, cfg.heads, rng)
        init_layer_norm(store, f"{base}.ln1", cfg.d_model)
        init_mha(store, f"{base}.cross", cfg.d_model, cfg.heads, rng)
        init_layer_norm(store, f"{base}.ln2", cfg.d_model)
        init_feed_forward(store, f"{base}.ff", cfg, rng)
        init_layer_norm(store, f"{base}.ln3", cfg.d_model)


def feed_forward(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    """linear -> ReLU -> linear, applied identically at every position."""
    h = elementwise(add(matmul(x, store[f"{prefix}.w1"]), store[f"{prefix}.b1"]), "relu")
    return add(matmul(h, store[f"{prefix}.w2"]), store[f"{prefix}.b2"])


def _sublayer(x: Tensor, sub_out: Tensor, store: ParamStore, ln_prefix: str,
              cfg: ModelConfig, ctx: FwdCtx) -> Tensor:
    dropped = dropout(sub_out, ctx.dropout_rate, ctx.training, ctx.rng)
    return layer_norm(add(x, dropped), store[f"{ln_prefix}.gamma"],
                      store[f"{ln_prefix}.beta"], cfg.ln_eps)


def encoder_forward(x: Tensor, store: ParamStore, prefix: str,
                    cfg: ModelConfig, ctx: FwdCtx = EVAL_CTX) -> Tensor:
    """Run the N-layer encoder stack; shape (.., a, b, s, d_model) is preserved."""
    if x.shape[-1] != cfg.d_model:
        raise DimensionError(f"encoder input feature dim {x.shape[-1]} != d_model {cfg.d_model}")
    for layer in range(cfg.num_layers):
        base = f"{prefix}.l{layer}"
        attn = st_multi_head_attention(x, x, x, store, f"{base}.mha", cfg.heads, ctx)
        x = _sublayer(x, attn, store, f"{base}.ln1", cfg, ctx)
        ff = feed_forward(x, store, f"{base}.ff")
        x = _sublayer(x, ff, store, f"{base}.ln2", cfg, ctx)
    return x


def decoder_forward(x: Tensor, z: Tensor, store: ParamStore, prefix: str,
                    cfg: ModelConfig, ctx: FwdCtx = EVAL_CTX) -> Tensor:
    """Run the N-layer decoder stack over the current slice, attending to z."""
    if x.shape[-1] != cfg.d_model or z.shape[-1] != cfg.d_model:
        raise DimensionError(
            f"decoder inputs must end in d_model={cfg.d_model}, got {x.shape} and {z.shape}")
    for layer in range(cfg.num_layers):
        base = f"{prefix}.l{layer}"
        attn = st_multi_head_attention(x, x, x, store, f"{base}.self", cfg.heads, ctx)
        x = _sublayer(x, attn, store, f"{base}.ln1", cfg, ctx)
        cross = st_multi_head_attention(x, z, z, store, f"{base}.cross", cfg.heads, ctx)
        x = _sublayer(x, cross, store, f"{base}.ln2", cfg, ctx)
        ff = feed_forward(x, store, f"{base}.ff")
        x = _sublayer(x, ff, store, f"{base}.ln3", cfg, ctx)
    return x
