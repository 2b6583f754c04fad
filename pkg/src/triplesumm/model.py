"""Trimodal frame-importance network.

Layout of one forward pass::

    X_v, X_t, X_a --Linear+LN--> E_v, E_t, E_a --Agg--> E_f
    H = [E_f, E_v, E_t, E_a] + sinusoidal position + per-stream embedding
    repeat L times:
        P windowed self-attention blocks over all four streams
        Q per-frame cross-attention blocks: fusion token queries (v, t, a)
    head(H_f) -> scores in (0, 1)

Parameters live in a flat ``dict[str, Tensor]`` so that the optimizer and the
checkpoint code can treat them uniformly.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

GLOBAL = "global"
MODALITIES = ("v", "t", "a")
STREAMS = ("f", "v", "t", "a")
FUSION_MODES = ("dynamic", "global", "static")
AGG_MODES = ("average", "learnable", "no_fusion")


def default_ffn_hidden(dim: int) -> int:
    """SwiGLU width for a 2x expansion: 2/3 * 2 * dim, rounded to a multiple of 8."""
    return max(8, int(round(2 * dim * 2 / 3 / 8)) * 8)


@dataclass
class ModelConfig:
    dim: int = 128
    heads: int = 4
    layers: int = 2
    mst_blocks: int = 2
    cmf_blocks: int = 2
    window_schedule: list = field(default_factory=lambda: [5, 15, 45, GLOBAL])
    ffn_hidden: int | None = None
    head_hidden: int = 192
    dropout: float = 0.1
    fusion_mode: str = "dynamic"
    agg_mode: str = "average"
    share_mst_params: bool = True
    input_dims: tuple = (768, 768, 768)
    max_len: int = 4096
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.ffn_hidden is None:
            self.ffn_hidden = default_ffn_hidden(self.dim)
        self.input_dims = tuple(int(d) for d in self.input_dims)
        self.window_schedule = [parse_window(w) for w in self.window_schedule]
        self.validate()

    def validate(self) -> None:
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide dim ({self.dim})")
        if min(self.layers, self.mst_blocks, self.cmf_blocks) < 0 or self.layers < 1:
            raise ValueError("layer counts must be nonnegative with at least one layer")
        if len(self.window_schedule) != self.layers * self.mst_blocks:
            raise ValueError(
                f"window_schedule needs {self.layers * self.mst_blocks} entries, got {len(self.window_schedule)}")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion_mode {self.fusion_mode!r}")
        if self.agg_mode not in AGG_MODES:
            raise ValueError(f"unknown agg_mode {self.agg_mode!r}")
        if len(self.input_dims) != 3 or min(self.input_dims) < 1:
            raise ValueError("input_dims must hold three positive extents")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_dims"] = list(self.input_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def parse_window(w):
    if isinstance(w, str):
        if w.strip().lower() == GLOBAL:
            return GLOBAL
        w = int(w)
    w = int(w)
    if w < 1 or w % 2 == 0:
        raise ValueError(f"window sizes must be odd positive integers or 'global', got {w}")
    return w


# ---------------------------------------------------------------------------
# parameters


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    D, H = config.dim, config.ffn_hidden
    params: dict[str, np.ndarray] = {}

    def dense(name, fan_in, fan_out, lead=()):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-limit, limit, size=lead + (fan_in, fan_out))

    def zeros(name, shape):
        params[name] = np.zeros(shape)

    def ln(prefix, lead=()):
        params[prefix + ".g"] = np.ones(lead + (D,))
        params[prefix + ".b"] = np.zeros(lead + (D,))

    for m, dm in zip(MODALITIES, config.input_dims):
        dense(f"proj.{m}.w", dm, D)
        zeros(f"proj.{m}.b", (D,))
        ln(f"proj.{m}.ln")
        zeros(f"missing.{m}", (D,))
    for s in STREAMS:
        params[f"lme.{s}"] = rng.normal(0.0, 0.02, size=(D,))
    if config.agg_mode == "learnable":
        dense("agg.w1", 3 * D, D)
        zeros("agg.b1", (D,))
        dense("agg.w2", D, D)
        zeros("agg.b2", (D,))

    # unshared temporal blocks carry a leading stream axis that broadcasts
    # against the stacked [4, N, D] activations
    lead = () if config.share_mst_params else (len(STREAMS),)
    vec = () if config.share_mst_params else (len(STREAMS), 1)
    for k in range(config.layers * config.mst_blocks):
        p = f"mst.{k}"
        for name in ("ln1", "ln2"):
            params[f"{p}.{name}.g"] = np.ones(vec + (D,))
            params[f"{p}.{name}.b"] = np.zeros(vec + (D,))
        dense(f"{p}.attn.wqkv", D, 3 * D, lead)
        zeros(f"{p}.attn.bqkv", vec + (3 * D,))
        dense(f"{p}.attn.wo", D, D, lead)
        zeros(f"{p}.attn.bo", vec + (D,))
        dense(f"{p}.ffn.w1", D, H, lead)
        dense(f"{p}.ffn.w3", D, H, lead)
        dense(f"{p}.ffn.w2", H, D, lead)

    for k in range(config.layers * config.cmf_blocks):
        p = f"cmf.{k}"
        for name in ("lnq", "lnkv", "ln2"):
            ln(f"{p}.{name}")
        for name in ("wq", "wk", "wv", "wo"):
            dense(f"{p}.attn.{name}", D, D)
            zeros(f"{p}.attn.b{name[1]}", (D,))
        dense(f"{p}.ffn.w1", D, H)
        dense(f"{p}.ffn.w3", D, H)
        dense(f"{p}.ffn.w2", H, D)

    dense("head.w1", D, config.head_hidden)
    zeros("head.b1", (config.head_hidden,))
    params["head.ln.g"] = np.ones(config.head_hidden)
    params["head.ln.b"] = np.zeros(config.head_hidden)
    dense("head.w2", config.head_hidden, 1)
    zeros("head.b2", (1,))

    return {k: ad.parameter(v, name=k, dtype=dtype) for k, v in params.items()}


def count_parameters(config: ModelConfig) -> int:
    """Total learnable scalars, computed from shapes without allocating."""
    D, H, Hh = config.dim, config.ffn_hidden, config.head_hidden
    copies = 1 if config.share_mst_params else len(STREAMS)
    total = sum(dm * D + D + 2 * D + D for dm in config.input_dims)  # proj + LN + missing default
    total += len(STREAMS) * D
    if config.agg_mode == "learnable":
        total += 3 * D * D + D + D * D + D
    attn_self = D * 3 * D + 3 * D + D * D + D
    ffn = 3 * D * H
    total += config.layers * config.mst_blocks * copies * (attn_self + ffn + 4 * D)
    attn_cross = 4 * (D * D + D)
    total += config.layers * config.cmf_blocks * (attn_cross + ffn + 6 * D)
    total += D * Hh + Hh + 2 * Hh + Hh + 1
    return total


def params_to(params: dict[str, Tensor], dtype) -> dict[str, Tensor]:
    return {k: ad.parameter(v.data, name=k, dtype=dtype) for k, v in params.items()}


def _ln(x: Tensor, params, prefix: str, eps: float) -> Tensor:
    return ad.layer_norm(x, params[prefix + ".g"], params[prefix + ".b"], eps)


# ---------------------------------------------------------------------------
# input representation


def embed_project(x_v, x_t, x_a, params, config: ModelConfig, presence=None) -> list[Tensor]:
    """Per-modality LN(Linear(X)); absent frames take the learned default token."""
    dtype = params["proj.v.w"].dtype
    out = []
    for idx, (m, x) in enumerate(zip(MODALITIES, (x_v, x_t, x_a))):
        x = ad.Tensor(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=dtype))
        if x.ndim != 2 or x.shape[1] != config.input_dims[idx]:
            raise ValueError(f"modality {m}: expected [N, {config.input_dims[idx]}], got {x.shape}")
        if x.shape[0] < 1:
            raise ValueError("sequence must contain at least one frame")
        e = _ln(ad.linear(x, params[f"proj.{m}.w"], params[f"proj.{m}.b"]), params, f"proj.{m}.ln", config.ln_eps)
        if presence is not None:
            present = np.asarray(presence, dtype=bool)[:, idx]
            if not present.all():
                e = ad.where(present[:, None], e, params[f"missing.{m}"])
        out.append(e)
    n = {e.shape[0] for e in out}
    if len(n) != 1:
        raise ValueError(f"modalities disagree on sequence length: {sorted(n)}")
    return out


def aggregate_fusion_token(e_v: Tensor, e_t: Tensor, e_a: Tensor, mode: str, params=None) -> Tensor:
    if not e_v.shape == e_t.shape == e_a.shape:
        raise ValueError("modality embeddings must share a shape")
    if mode == "average":
        return (e_v + e_t + e_a) * (1.0 / 3.0)
    if mode == "no_fusion":
        return e_v
    if mode == "learnable":
        h = ad.gelu(ad.linear(ad.concat([e_v, e_t, e_a], axis=-1), params["agg.w1"], params["agg.b1"]))
        return ad.linear(h, params["agg.w2"], params["agg.b2"])
    raise ValueError(f"unknown aggregation mode {mode!r}")


def sinusoidal_encoding(n: int, dim: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(0, dim, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i / dim)
    pe = np.zeros((n, dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : dim // 2])
    return pe.astype(dtype)


def apply_tpe_lme(streams: Tensor, params, config: ModelConfig) -> Tensor:
    """streams: [4, N, D] ordered (f, v, t, a)."""
    n = streams.shape[1]
    if n > config.max_len:
        raise ValueError(f"sequence length {n} exceeds max_len {config.max_len}")
    tpe = sinusoidal_encoding(n, config.dim, streams.dtype)
    lme = ad.reshape(ad.stack([params[f"lme.{s}"] for s in STREAMS]), (len(STREAMS), 1, config.dim))
    return streams + tpe + lme


# ---------------------------------------------------------------------------
# blocks


def window_mask(n: int, window) -> np.ndarray | None:
    """Boolean [n, n] mask, key j visible to query i iff |i - j| <= (w - 1) / 2."""
    if window == GLOBAL or window >= 2 * n - 1:
        return None
    radius = (window - 1) // 2
    idx = np.arange(n)
    return np.abs(idx[:, None] - idx[None, :]) <= radius


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # [..., N, D] -> [..., heads, N, dk]
    *lead, n, d = x.shape
    x = ad.reshape(x, tuple(lead) + (n, heads, d // heads))
    nd = x.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return ad.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dk = x.shape
    nd = x.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return ad.reshape(ad.transpose(x, axes), tuple(lead) + (n, h * dk))


def mst_block(x: Tensor, window, params, prefix: str, config: ModelConfig,
              rng: np.random.Generator | None = None) -> Tensor:
    """Pre-LN windowed self-attention + SwiGLU, each with a residual.

    ``x`` is [N, D] or stacked streams [S, N, D]; stream-specific weights
    (unshared mode) broadcast over the leading axis.
    """
    D, heads = config.dim, config.heads
    p = prefix
    rate = config.dropout
    h = _ln(x, params, f"{p}.ln1", config.ln_eps)
    qkv = ad.linear(h, params[f"{p}.attn.wqkv"], params[f"{p}.attn.bqkv"])
    q = _split_heads(qkv[..., :D], heads)
    k = _split_heads(qkv[..., D:2 * D], heads)
    v = _split_heads(qkv[..., 2 * D:], heads)
    mask = window_mask(x.shape[-2], window)
    att, _ = ad.scaled_masked_attention(q, k, v, mask, rate, rng)
    x = x + ad.linear(_merge_heads(att), params[f"{p}.attn.wo"], params[f"{p}.attn.bo"])
    h = _ln(x, params, f"{p}.ln2", config.ln_eps)
    return x + ad.swiglu_ffn(h, params[f"{p}.ffn.w1"], params[f"{p}.ffn.w3"], params[f"{p}.ffn.w2"], rate, rng)


def cmf_block(fusion: Tensor, context: Tensor, params, prefix: str, config: ModelConfig,
              mode: str | None = None, keep=None, rng: np.random.Generator | None = None):
    """Per-frame cross-attention of the fusion token over its three modality tokens.

    fusion: [N, D]; context: [N, 3, D] ordered (v, t, a); keep: optional
    boolean [N, 3] restricting which modalities each frame may attend to.
    Returns the updated fusion stream and the [N, heads, 3] weights used.
    """
    mode = mode or config.fusion_mode
    D, heads = config.dim, config.heads
    dk = D // heads
    n = fusion.shape[0]
    p = prefix
    rate = config.dropout
    qn = _ln(fusion, params, f"{p}.lnq", config.ln_eps)
    kvn = _ln(context, params, f"{p}.lnkv", config.ln_eps)
    v = ad.transpose(ad.reshape(ad.linear(kvn, params[f"{p}.attn.wv"], params[f"{p}.attn.bv"]),
                                (n, 3, heads, dk)), (0, 2, 1, 3))          # [N, h, 3, dk]
    mask = None if keep is None else np.asarray(keep, dtype=bool).reshape(n, 1, 1, 3)

    if mode == "static":
        w = np.ones((n, 1, 1, 3), dtype=fusion.dtype) if mask is None else mask.astype(fusion.dtype)
        w = np.broadcast_to(w / w.sum(axis=-1, keepdims=True), (n, heads, 1, 3))
        weights = Tensor(np.ascontiguousarray(w))
        att = ad.matmul(ad.dropout(weights, rate, rng), v)
    else:
        q = ad.transpose(ad.reshape(ad.linear(qn, params[f"{p}.attn.wq"], params[f"{p}.attn.bq"]),
                                    (n, 1, heads, dk)), (0, 2, 1, 3))      # [N, h, 1, dk]
        k = ad.transpose(ad.reshape(ad.linear(kvn, params[f"{p}.attn.wk"], params[f"{p}.attn.bk"]),
                                    (n, 3, heads, dk)), (0, 2, 1, 3))
        if mode == "dynamic":
            att, weights = ad.scaled_masked_attention(q, k, v, mask, rate, rng)
        elif mode == "global":
            _, dyn = ad.scaled_masked_attention(q, k, v, None)
            weights = ad.mean(dyn, axis=0, keepdims=True)                   # [1, h, 1, 3]
            if mask is not None:
                weights = weights * mask.astype(fusion.dtype)
                weights = weights / ad.tsum(weights, axis=-1, keepdims=True)
            else:
                weights = weights * np.ones((n, 1, 1, 1), dtype=fusion.dtype)
            att = ad.matmul(ad.dropout(weights, rate, rng), v)
        else:
            raise ValueError(f"unknown fusion mode {mode!r}")

    att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (n, D))
    x = fusion + ad.linear(att, params[f"{p}.attn.wo"], params[f"{p}.attn.bo"])
    h = _ln(x, params, f"{p}.ln2", config.ln_eps)
    x = x + ad.swiglu_ffn(h, params[f"{p}.ffn.w1"], params[f"{p}.ffn.w3"], params[f"{p}.ffn.w2"], rate, rng)
    return x, weights.data.reshape(n, heads, 3)


def prediction_head(fusion: Tensor, params, config: ModelConfig) -> Tensor:
    h = ad.gelu(ad.linear(fusion, params["head.w1"], params["head.b1"]))
    h = _ln(h, params, "head.ln", config.ln_eps)
    logits = ad.linear(h, params["head.w2"], params["head.b2"])
    return ad.reshape(ad.sigmoid(logits), (fusion.shape[0],))


# ---------------------------------------------------------------------------
# full model


@dataclass
class AttentionTrace:
    """Fusion-token attention over (v, t, a): one [N, heads, 3] array per CMF block."""

    blocks: list

    def head_averaged(self) -> list:
        return [w.mean(axis=1) for w in self.blocks]

    def to_json(self) -> dict:
        return {
            "modalities": list(MODALITIES),
            "blocks": [
                {"index": i, "per_head": w.tolist(), "head_mean": w.mean(axis=1).tolist()}
                for i, w in enumerate(self.blocks)
            ],
        }


@dataclass
class ForwardResult:
    scores: Tensor
    trace: AttentionTrace
    fused: np.ndarray


def forward(config: ModelConfig, params, x_v, x_t, x_a, presence=None, training: bool = False,
            rng: np.random.Generator | None = None, keep=None) -> ForwardResult:
    """Score every frame of one video.

    ``training`` enables dropout drawn from ``rng``. ``keep`` ([N, 3] bool)
    removes modalities from every cross-modal attention.
    """
    if training and rng is None:
        rng = np.random.default_rng(0)
    drop_rng = rng if training else None
    e_v, e_t, e_a = embed_project(x_v, x_t, x_a, params, config, presence)
    e_f = aggregate_fusion_token(e_v, e_t, e_a, config.agg_mode, params)
    h = apply_tpe_lme(ad.stack([e_f, e_v, e_t, e_a]), params, config)

    traces = []
    for layer in range(config.layers):
        for j in range(config.mst_blocks):
            k = layer * config.mst_blocks + j
            h = mst_block(h, config.window_schedule[k], params, f"mst.{k}", config, drop_rng)
        if config.cmf_blocks:
            fusion = h[0]
            context = ad.transpose(h[1:], (1, 0, 2))                         # [N, 3, D]
            for j in range(config.cmf_blocks):
                k = layer * config.cmf_blocks + j
                fusion, w = cmf_block(fusion, context, params, f"cmf.{k}", config, keep=keep, rng=drop_rng)
                traces.append(w)
            h = ad.concat([ad.reshape(fusion, (1,) + fusion.shape), h[1:]], axis=0)

    fusion = h[0]
    scores = prediction_head(fusion, params, config)
    return ForwardResult(scores, AttentionTrace(traces), fusion.data)


def forward_record(config: ModelConfig, params, record, **kwargs) -> ForwardResult:
    return forward(config, params, record.v, record.t, record.a, record.presence, **kwargs)


def compute_loss(scores: Tensor, gt) -> Tensor:
    """Squared L2 distance between predicted and target score vectors."""
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=scores.dtype)
    if gt.shape != scores.shape:
        raise ValueError(f"length mismatch: scores {scores.shape}, gt {gt.shape}")
    return ad.tsum(ad.square(scores - gt))


def predict(config: ModelConfig, params, record, keep=None) -> np.ndarray:
    with ad.no_grad():
        return forward_record(config, params, record, keep=keep).scores.data.copy()


def extract_attention_trace(config: ModelConfig, params, record) -> AttentionTrace:
    with ad.no_grad():
        return forward_record(config, params, record).trace


def modality_ranks(trace: AttentionTrace) -> np.ndarray:
    """[N, 3] rank (1 = highest weight) of each modality in the first CMF block.

    Ties resolve in fixed modality order v < t < a.
    """
    w = trace.head_averaged()[0]
    order = np.argsort(-w, axis=1, kind="stable")
    ranks = np.empty_like(order)
    rows = np.arange(w.shape[0])[:, None]
    ranks[rows, order] = np.arange(1, 4)[None, :]
    return ranks


def masked_forward(config: ModelConfig, params, record, keep_ranks) -> np.ndarray:
    """Inference restricted to the modalities whose per-frame rank is in ``keep_ranks``."""
    keep_ranks = set(int(r) for r in keep_ranks)
    if not keep_ranks:
        raise ValueError("keep_ranks must not be empty")
    if not keep_ranks <= {1, 2, 3}:
        raise ValueError(f"ranks must be drawn from {{1, 2, 3}}, got {sorted(keep_ranks)}")
    if config.cmf_blocks == 0:
        raise ValueError("rank masking needs at least one cross-modal block")
    ranks = modality_ranks(extract_attention_trace(config, params, record))
    keep = np.isin(ranks, sorted(keep_ranks))
    return predict(config, params, record, keep=None if keep.all() else keep)
