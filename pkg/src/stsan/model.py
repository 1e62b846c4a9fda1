"""The two-stream network: Stream-T over transition windows, Stream-F over
flow windows, a masked fusion of their decoder features, and the prediction
heads. Also owns the binary checkpoint format.

Parameter namespaces: ``stream_t.*``, ``stream_f.*``, ``fusion.*``. The
single-stream ablation simply has no ``stream_t.*`` entries and no mask
branch; forward passes dispatch on the store contents, so a loaded
checkpoint fully determines the architecture variant.
"""

from __future__ import annotations

import struct
from typing import Sequence

import numpy as np

from .attention import EVAL_CTX, FwdCtx
from .autodiff import (
    ParamStore, Tensor, add, conv2d, elementwise, glorot_uniform, matmul,
    mul, reshape, sigmoid, tanh,
)
from .config import GridConfig, ModelConfig
from .data import Batch, PreparedDataset
from .encdec import decoder_forward, encoder_forward, init_decoder, init_encoder
from .embedding import embed_input, init_embedding
from .errors import CheckpointError, ContractError, DimensionError

CKPT_MAGIC = b"STCK"
CKPT_VERSION = 1

STREAM_T = "stream_t"
STREAM_F = "stream_f"


# --- parameter initialization ------------------------------------------------

def init_stream(store: ParamStore, prefix: str, grid: GridConfig,
                model: ModelConfig, rng: np.random.Generator,
                with_head: bool = False):
    """One stream: embedding, encoder, decoder, and (Stream-T only) the
    transition prediction head."""
    init_embedding(store, f"{prefix}.embed", grid.flow_types,
                   grid.time_feature_dim, model, rng)
    init_encoder(store, f"{prefix}.enc", model, rng)
    init_decoder(store, f"{prefix}.dec", model, rng)
    if with_head:
        store.add(f"{prefix}.head.w",
                  glorot_uniform(rng, (model.d_model, grid.flow_types),
                                 model.d_model, grid.flow_types, store.dtype))
        store.add(f"{prefix}.head.b", np.zeros(grid.flow_types))


def init_fusion(store: ParamStore, grid: GridConfig, model: ModelConfig,
                rng: np.random.Generator, single_stream: bool = False):
    """Hybrid conv layers (valid padding) plus the flatten head."""
    ch = model.fusion_channel_dim
    in_ch = model.d_model
    for j, k in enumerate(model.fusion_kernels):
        branches = ("feat",) if single_stream else ("mask", "feat")
        for branch in branches:
            fan_in, fan_out = k * k * in_ch, k * k * ch
            store.add(f"fusion.l{j}.{branch}.kernel",
                      glorot_uniform(rng, (k, k, in_ch, ch), fan_in, fan_out, store.dtype))
            store.add(f"fusion.l{j}.{branch}.bias", np.zeros(ch))
        in_ch = ch
    flat = model.flat_dim(grid.aoi_rows, grid.aoi_cols)
    store.add("fusion.head.w1",
              glorot_uniform(rng, (flat, model.head_hidden), flat, model.head_hidden, store.dtype))
    store.add("fusion.head.b1", np.zeros(model.head_hidden))
    store.add("fusion.head.w2",
              glorot_uniform(rng, (model.head_hidden, grid.flow_types),
                             model.head_hidden, grid.flow_types, store.dtype))
    store.add("fusion.head.b2", np.zeros(grid.flow_types))


def init_stream_t_params(store: ParamStore, grid: GridConfig, model: ModelConfig,
                         rng: np.random.Generator):
    init_stream(store, STREAM_T, grid, model, rng, with_head=True)


def init_stsan_params(store: ParamStore, grid: GridConfig, model: ModelConfig,
                      rng: np.random.Generator, single_stream: bool = False,
                      with_stream_t: bool = True):
    """Parameters for the fused network.

    `with_stream_t=False` leaves the transition stream out entirely (it is
    loaded from a pre-training checkpoint instead); the joint-training
    ablation initializes it fresh, without the pre-training head.
    """
    if single_stream:
        init_stream(store, STREAM_F, grid, model, rng)
        init_fusion(store, grid, model, rng, single_stream=True)
        return
    if with_stream_t:
        init_stream(store, STREAM_T, grid, model, rng, with_head=False)
    init_stream(store, STREAM_F, grid, model, rng)
    init_fusion(store, grid, model, rng)


# --- forward passes ----------------------------------------------------------

def _as_input(arr: np.ndarray, store: ParamStore) -> Tensor:
    return Tensor(np.ascontiguousarray(arr, dtype=store.dtype))


def stream_decoder_features(batch: Batch, store: ParamStore, prefix: str,
                            model: ModelConfig, ctx: FwdCtx = EVAL_CTX) -> Tensor:
    """Embed -> encode -> decode one stream; returns (B, a, b, d_model)."""
    if prefix == STREAM_T:
        enc_win, dec_win = batch.enc_trans, batch.dec_trans
    else:
        enc_win, dec_win = batch.enc_flow, batch.dec_flow
    enc_in = embed_input(_as_input(enc_win, store), _as_input(batch.enc_times, store),
                         store, f"{prefix}.embed", model)
    z = encoder_forward(enc_in, store, f"{prefix}.enc", model, ctx)
    dec_in = embed_input(_as_input(dec_win, store), _as_input(batch.dec_times, store),
                         store, f"{prefix}.embed", model)
    dec_out = decoder_forward(dec_in, z, store, f"{prefix}.dec", model, ctx)
    b, a, w_sp, _, d = dec_out.shape
    return reshape(dec_out, (b, a, w_sp, d))   # squeeze the length-1 time axis


def stream_t_forward(batch: Batch, store: ParamStore, model: ModelConfig,
                     ctx: FwdCtx = EVAL_CTX) -> Tensor:
    """Transition prediction: per-position linear head then tanh, (B, a, b, w)."""
    feats = stream_decoder_features(batch, store, STREAM_T, model, ctx)
    out = add(matmul(feats, store["stream_t.head.w"]), store["stream_t.head.b"])
    return tanh(out)


def masked_fusion(t0: Tensor | None, f0: Tensor, store: ParamStore,
                  model: ModelConfig, single_stream: bool = False) -> Tensor:
    """Gate flow features by sigmoid(transition features) through the hybrid
    conv stack, then flatten row-major to (B, flat).

    With `single_stream` the gate is identically open (no mask branch).
    """
    if not single_stream and t0 is None:
        raise ContractError("masked_fusion requires transition features unless single_stream")
    if f0.ndim != 4:
        raise DimensionError(f"fusion inputs must be (B, a, b, d), got {f0.shape}")
    m, f = t0, f0
    for j, k in enumerate(model.fusion_kernels):
        if f.shape[1] < k or f.shape[2] < k:
            raise DimensionError(
                f"fusion layer {j}: spatial dims {f.shape[1]}x{f.shape[2]} "
                f"smaller than kernel {k}")
        e = add(conv2d(f, store[f"fusion.l{j}.feat.kernel"], padding="valid"),
                store[f"fusion.l{j}.feat.bias"])
        if single_stream:
            f = e
        else:
            m = add(conv2d(m, store[f"fusion.l{j}.mask.kernel"], padding="valid"),
                    store[f"fusion.l{j}.mask.bias"])
            f = mul(sigmoid(m), e)
    b = f.shape[0]
    return reshape(f, (b, f.shape[1] * f.shape[2] * f.shape[3]))


def stsan_forward(batch: Batch, store: ParamStore, model: ModelConfig,
                  ctx: FwdCtx = EVAL_CTX) -> Tensor:
    """Both streams to decoder features, masked fusion, then the flow head.

    Output is (B, w) in (-1, 1); the architecture variant (single-stream or
    two-stream) is inferred from the store's parameter namespaces.
    """
    single_stream = not store.has_prefix(f"{STREAM_T}.")
    f0 = stream_decoder_features(batch, store, STREAM_F, model, ctx)
    t0 = None
    if not single_stream:
        t0 = stream_decoder_features(batch, store, STREAM_T, model, ctx)
    flat = masked_fusion(t0, f0, store, model, single_stream=single_stream)
    h = elementwise(add(matmul(flat, store["fusion.head.w1"]), store["fusion.head.b1"]),
                    "relu")
    return tanh(add(matmul(h, store["fusion.head.w2"]), store["fusion.head.b2"]))


def predict_map(store: ParamStore, prepared: PreparedDataset, target_t: int,
                model: ModelConfig, node_chunk: int = 256) -> np.ndarray:
    """Whole-map prediction (rows, cols, w): per-node forward in eval mode,
    denormalized and clamped at zero."""
    cfg = prepared.cfg
    pairs = [(r, c, target_t) for r in range(cfg.rows) for c in range(cfg.cols)]
    rows = []
    for i in range(0, len(pairs), node_chunk):
        chunk = pairs[i:i + node_chunk]
        pred = stsan_forward(prepared.batch(chunk), store, model, EVAL_CTX)
        rows.append(pred.data)
    flat = np.concatenate(rows, axis=0)
    denorm = prepared.flow_normalizer.invert(flat.astype(np.float64))
    return np.maximum(denorm, 0.0).reshape(cfg.rows, cfg.cols, cfg.flow_types)


# --- checkpoints --------------------------------------------------------------

def save_checkpoint(path: str, store: ParamStore, config_hash: str = ""):
    """magic STCK, version, dtype code, config hash, ordered (name, shape,
    payload) entries, then the frozen-name listing; all little-endian."""
    dtype_code = store.dtype.itemsize
    hash_bytes = config_hash.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<H", CKPT_VERSION))
        fh.write(struct.pack("<B", dtype_code))
        fh.write(struct.pack("<H", len(hash_bytes)))
        fh.write(hash_bytes)
        fh.write(struct.pack("<I", len(store)))
        for name, t in store.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape) if t.ndim else b"")
            fh.write(np.ascontiguousarray(t.data, dtype=f"<f{dtype_code}").tobytes())
        frozen = sorted(store.frozen)
        fh.write(struct.pack("<I", len(frozen)))
        for name in frozen:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)


def load_checkpoint(path: str, expected_config_hash: str | None = None
                    ) -> tuple[ParamStore, str]:
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from exc
    with fh:
        if fh.read(4) != CKPT_MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (dtype_code,) = struct.unpack("<B", fh.read(1))
        if dtype_code not in (4, 8):
            raise CheckpointError(f"bad dtype code {dtype_code}")
        (hash_len,) = struct.unpack("<H", fh.read(2))
        config_hash = fh.read(hash_len).decode("utf-8")
        if expected_config_hash is not None and config_hash != expected_config_hash:
            raise CheckpointError(
                f"checkpoint config hash {config_hash[:12]}... does not match "
                f"run config {expected_config_hash[:12]}...")
        store = ParamStore(np.float32 if dtype_code == 4 else np.float64)
        (n_params,) = struct.unpack("<I", fh.read(4))
        for _ in range(n_params):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            count = int(np.prod(shape)) if shape else 1
            payload = fh.read(count * dtype_code)
            if len(payload) != count * dtype_code:
                raise CheckpointError(f"{path} truncated at parameter {name!r}")
            store.add(name, np.frombuffer(payload, dtype=f"<f{dtype_code}").reshape(shape))
        (n_frozen,) = struct.unpack("<I", fh.read(4))
        frozen = []
        for _ in range(n_frozen):
            (name_len,) = struct.unpack("<H", fh.read(2))
            frozen.append(fh.read(name_len).decode("utf-8"))
        if frozen:
            store.freeze(frozen)
    return store, config_hash


def merge_params(target: ParamStore, source: ParamStore, names: Sequence[str] | None = None):
    """Copy entries of `source` into `target` (used to splice a pre-trained
    stream into a fresh fused store)."""
    for name, t in source.items():
        if names is not None and name not in names:
            continue
        target.add(name, t.data)
