"""Spatial-temporal scaled dot-product attention and its multi-head wrapper.

Tensors carry two leading spatial axes in addition to the usual
(sequence, feature) pair, so attention mixes time steps independently at
every grid cell of the area of interest. Projections are position-wise:
one (d_model, d_k) matrix per head, shared across all spatial/sequence
positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ParamStore, Tensor, concat, dropout, glorot_uniform, matmul,
    matmul_last2, mul, softmax_last, transpose_last2,
)
from .errors import DimensionError


@dataclass
class FwdCtx:
    """Per-call forward-pass context: training mode and the dropout source.

    The rng is threaded explicitly; evaluation mode never draws from it.
    `attn_dropout` additionally drops attention weights (off by default;
    sub-layer outputs are always dropout-wrapped by the encoder/decoder).
    """

    training: bool = False
    dropout_rate: float = 0.0
    rng: np.random.Generator | None = None
    attn_dropout: bool = False


EVAL_CTX = FwdCtx()


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor,
                                 ctx: FwdCtx = EVAL_CTX) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V over the trailing two axes.

    Q: (..., s_q, d), K/V: (..., s_k, d) with identical leading axes.
    """
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(
            f"query/key feature dims differ: {q.shape} vs {k.shape}")
    if q.shape[:-2] != k.shape[:-2] or k.shape[:-1] != v.shape[:-1]:
        raise DimensionError(
            f"attention operands misaligned: Q {q.shape}, K {k.shape}, V {v.shape}")
    d_k = q.shape[-1]
    scores = mul(matmul_last2(q, transpose_last2(k)), 1.0 / math.sqrt(d_k))
    weights = softmax_last(scores)
    if ctx.attn_dropout and ctx.training:
        weights = dropout(weights, ctx.dropout_rate, True, ctx.rng)
    return matmul_last2(weights, v)


def init_mha(store: ParamStore, prefix: str, d_model: int, heads: int,
             rng: np.random.Generator):
    """Register per-head Q/K/V projections and the shared output matrix."""
    d_k = d_model // heads
    for i in range(heads):
        for proj in ("wq", "wk", "wv"):
            store.add(f"{prefix}.h{i}.{proj}",
                      glorot_uniform(rng, (d_model, d_k), d_model, d_k, store.dtype))
    store.add(f"{prefix}.wo",
              glorot_uniform(rng, (heads * d_k, d_model), heads * d_k, d_model, store.dtype))


def st_multi_head_attention(q: Tensor, k: Tensor, v: Tensor, store: ParamStore,
                            prefix: str, heads: int, ctx: FwdCtx = EVAL_CTX) -> Tensor:
    """Concat of per-head attentions on projected inputs, then output projection."""
    head_outs = []
    for i in range(heads):
        qi = matmul(q, store[f"{prefix}.h{i}.wq"])
        ki = matmul(k, store[f"{prefix}.h{i}.wk"])
        vi = matmul(v, store[f"{prefix}.h{i}.wv"])
        head_outs.append(scaled_dot_product_attention(qi, ki, vi, ctx))
    joined = head_outs[0] if heads == 1 else concat(head_outs, axis=-1)
    return matmul(joined, store[f"{prefix}.wo"])
