"""Plain 64-bit numpy re-statements of the model, used as oracles.

Nothing here touches the autodiff graph; parameters are read as arrays.
"""
import math

import numpy as np
from scipy.special import erf


def arr(params, name):
    return np.asarray(params[name].data, dtype=np.float64)


def ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def silu(x):
    return x / (1.0 + np.exp(-x))


def softmax(z, allowed=None):
    if allowed is not None:
        z = np.where(allowed, z, -np.inf)
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def mha(xq, xkv, wq, bq, wk, bk, wv, bv, wo, bo, heads, allowed=None):
    """Textbook multi-head attention with an explicit loop over heads."""
    d = wq.shape[1]
    dk = d // heads
    q, k, v = xq @ wq + bq, xkv @ wk + bk, xkv @ wv + bv
    outs = []
    for h in range(heads):
        sl = slice(h * dk, (h + 1) * dk)
        w = softmax(q[:, sl] @ k[:, sl].T / math.sqrt(dk), allowed)
        outs.append(w @ v[:, sl])
    return np.concatenate(outs, axis=1) @ wo + bo


def transformer_block(x, params, prefix, heads, allowed=None, stream=None):
    """Pre-LN self-attention + SwiGLU block; ``stream`` picks a slice of unshared weights."""
    def g(name):
        a = arr(params, f"{prefix}.{name}")
        if stream is not None:
            a = a[stream]
        return a.reshape(a.shape[-2:]) if a.ndim > 2 else a.reshape(-1) if a.ndim == 2 and a.shape[0] == 1 else a

    d = x.shape[-1]
    wqkv, bqkv = g("attn.wqkv"), g("attn.bqkv")
    h = ln(x, g("ln1.g"), g("ln1.b"))
    x = x + mha(h, h, wqkv[:, :d], bqkv[:d], wqkv[:, d:2 * d], bqkv[d:2 * d], wqkv[:, 2 * d:], bqkv[2 * d:],
                g("attn.wo"), g("attn.bo"), heads, allowed)
    h = ln(x, g("ln2.g"), g("ln2.b"))
    return x + (silu(h @ g("ffn.w1")) * (h @ g("ffn.w3"))) @ g("ffn.w2")


def cross_block(fusion, context, params, prefix, heads, mode="dynamic", keep=None):
    """Frame-by-frame cross-attention of the fusion token over its three modality tokens."""
    p = lambda name: arr(params, f"{prefix}.{name}")  # noqa: E731
    n, d = fusion.shape
    dk = d // heads
    out = np.zeros_like(fusion)
    all_w = np.zeros((n, heads, 3))
    qn = ln(fusion, p("lnq.g"), p("lnq.b"))
    kvn = ln(context, p("lnkv.g"), p("lnkv.b"))
    q = qn @ p("attn.wq") + p("attn.bq")
    k = kvn @ p("attn.wk") + p("attn.bk")
    v = kvn @ p("attn.wv") + p("attn.bv")
    for i in range(n):
        heads_out = []
        for h in range(heads):
            sl = slice(h * dk, (h + 1) * dk)
            allowed = None if keep is None else keep[i]
            if mode == "static":
                w = np.ones(3) if allowed is None else allowed.astype(float)
                w = w / w.sum()
            else:
                w = softmax(k[i, :, sl] @ q[i, sl] / math.sqrt(dk), allowed)
            all_w[i, h] = w
            heads_out.append(w @ v[i, :, sl])
        out[i] = np.concatenate(heads_out) @ p("attn.wo") + p("attn.bo")
    if mode == "global":
        # rebuild with the time-averaged dynamic weights
        gw = all_w.mean(axis=0)
        for i in range(n):
            heads_out = []
            for h in range(heads):
                sl = slice(h * dk, (h + 1) * dk)
                w = gw[h] if keep is None else gw[h] * keep[i] / (gw[h] * keep[i]).sum()
                all_w[i, h] = w
                heads_out.append(w @ v[i, :, sl])
            out[i] = np.concatenate(heads_out) @ p("attn.wo") + p("attn.bo")
    x = fusion + out
    h = ln(x, p("ln2.g"), p("ln2.b"))
    return x + (silu(h @ p("ffn.w1")) * (h @ p("ffn.w3"))) @ p("ffn.w2"), all_w


def sinusoid(n, d):
    pe = np.zeros((n, d))
    for pos in range(n):
        for i in range(0, d, 2):
            angle = pos / 10000 ** (i / d)
            pe[pos, i] = math.sin(angle)
            if i + 1 < d:
                pe[pos, i + 1] = math.cos(angle)
    return pe


def full_forward(config, params, xs, keep=None):
    """Score one video; returns (scores, list of per-block [N, heads, 3] weights)."""
    embs = []
    for m, x in zip("vta", xs):
        e = np.asarray(x, float) @ arr(params, f"proj.{m}.w") + arr(params, f"proj.{m}.b")
        embs.append(ln(e, arr(params, f"proj.{m}.ln.g"), arr(params, f"proj.{m}.ln.b")))
    if config.agg_mode == "average":
        fuse = (embs[0] + embs[1] + embs[2]) / 3
    elif config.agg_mode == "no_fusion":
        fuse = embs[0]
    else:
        h = gelu(np.concatenate(embs, 1) @ arr(params, "agg.w1") + arr(params, "agg.b1"))
        fuse = h @ arr(params, "agg.w2") + arr(params, "agg.b2")
    n = fuse.shape[0]
    pe = sinusoid(n, config.dim)
    streams = [s + pe + arr(params, f"lme.{name}") for s, name in zip([fuse] + embs, "fvta")]
    traces = []
    for layer in range(config.layers):
        for j in range(config.mst_blocks):
            k = layer * config.mst_blocks + j
            w = config.window_schedule[k]
            idx = np.arange(n)
            allowed = None if w == "global" else np.abs(idx[:, None] - idx[None, :]) <= (w - 1) // 2
            streams = [transformer_block(s, params, f"mst.{k}", config.heads, allowed,
                                         None if config.share_mst_params else si)
                       for si, s in enumerate(streams)]
        context = np.stack(streams[1:], axis=1)
        fusion = streams[0]
        for j in range(config.cmf_blocks):
            k = layer * config.cmf_blocks + j
            fusion, w = cross_block(fusion, context, params, f"cmf.{k}", config.heads, config.fusion_mode, keep)
            traces.append(w)
        streams[0] = fusion
    h = gelu(streams[0] @ arr(params, "head.w1") + arr(params, "head.b1"))
    h = ln(h, arr(params, "head.ln.g"), arr(params, "head.ln.b"))
    logit = h @ arr(params, "head.w2") + arr(params, "head.b2")
    return 1.0 / (1.0 + np.exp(-logit[:, 0])), traces
