"""Spatio-temporal memory decoder and the query-driven segmentation head.

Blocks are pre-norm:

    h      = S + MHA(LN1(S), M) W_o
    S_next = h + GELU(LN2(h) W_1 + b_1) W_2 + b_2

Attention over the memory is dense multi-head cross-attention.  Keys and
values are projected from the raw memory tokens (no norm on the memory).
"""

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ShapeError
from .features import ScaleSpec, load_tensor, save_tensor, synth_text_prior
from .numerics import bilinear_resize, check_row_stochastic, gelu, layer_norm, matmul, softmax_rows
from .queries import LayerParams, bias_queries, init_layer_params, query_conditioned_features


@dataclass
class MemoryTokens:
    tokens: np.ndarray  # (N, d)
    tags: np.ndarray  # (N, 2) int: (relative frame, position in the scale spec)

    @property
    def size(self):
        return self.tokens.shape[0]


@dataclass
class EmbeddingTables:
    temporal: np.ndarray  # (T_max, d)
    scale: np.ndarray  # (num_scales, d)


@dataclass
class BlockParams:
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    w_1: np.ndarray  # (d, d_ff)
    b_1: np.ndarray
    w_2: np.ndarray  # (d_ff, d)
    b_2: np.ndarray


@dataclass
class FuseParams:
    proj_w: list  # per scale (d, d)
    proj_b: list  # per scale (d,)
    ln_gain: np.ndarray
    ln_bias: np.ndarray


@dataclass
class HeadParams:
    class_proj: np.ndarray  # (d, K)
    mask_scale: np.ndarray  # (Q,)


@dataclass
class DecoderParams:
    blocks: list
    heads: int
    fuse: FuseParams
    head: HeadParams


def build_memory(grids, emb):
    """Flatten and concatenate query-conditioned maps across time and scale.

    ``grids[t][j]`` is the (H, W, d) map for relative frame ``t`` at the
    ``j``-th scale.  Order: frame-major, then scale, then row-major pixels.
    """
    if not grids:
        raise ShapeError("memory needs at least one frame")
    n_scales = len(grids[0])
    if n_scales == 0:
        raise ShapeError("memory needs at least one scale")
    if len(grids) > emb.temporal.shape[0] or n_scales > emb.scale.shape[0]:
        raise ShapeError("clip exceeds the embedding tables")
    tokens, tags = [], []
    for t, per_scale in enumerate(grids):
        if len(per_scale) != n_scales or any(g is None for g in per_scale):
            raise ShapeError(f"frame {t} is missing a scale")
        for j, g in enumerate(per_scale):
            if g.ndim != 3 or g.shape[2] != emb.temporal.shape[1]:
                raise ShapeError(f"grid at frame {t}, scale {j} has shape {g.shape}")
            flat = g.reshape(-1, g.shape[2])
            tokens.append(flat + emb.temporal[t] + emb.scale[j])
            tags.append(np.tile([t, j], (flat.shape[0], 1)))
    return MemoryTokens(np.concatenate(tokens), np.concatenate(tags))


def cross_attention(s, memory, blk, heads):
    """Multi-head attention of queries ``s`` over memory tokens.

    Returns the output after ``W_o`` and the per-head attention weights
    ``(heads, Q, N)``.
    """
    m = memory.tokens if isinstance(memory, MemoryTokens) else memory
    q_len, d = s.shape
    if d % heads:
        raise ShapeError(f"width {d} is not divisible by {heads} heads")
    dh = d // heads
    q = matmul(s, blk.w_q)
    k = matmul(m, blk.w_k)
    v = matmul(m, blk.w_v)
    outs, weights = [], []
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        a = softmax_rows(matmul(q[:, sl], k[:, sl].T), np.sqrt(dh))
        check_row_stochastic(a)
        weights.append(a)
        outs.append(matmul(a, v[:, sl]))
    return matmul(np.concatenate(outs, axis=1), blk.w_o), np.stack(weights)


def decoder_block(s, memory, blk, heads):
    attn, weights = cross_attention(layer_norm(s, blk.ln1_gain, blk.ln1_bias), memory, blk, heads)
    h = s + attn
    hidden = gelu(matmul(layer_norm(h, blk.ln2_gain, blk.ln2_bias), blk.w_1) + blk.b_1)
    return h + matmul(hidden, blk.w_2) + blk.b_2, weights


def decode_queries(s, memory, p, return_attention=False):
    if s.shape[1] != memory.tokens.shape[1]:
        raise ShapeError(f"query width {s.shape[1]} != memory width {memory.tokens.shape[1]}")
    weights = []
    for blk in p.blocks:
        s, w = decoder_block(s, memory, blk, p.heads)
        weights.append(w)
    return (s, weights) if return_attention else s


def fuse_scales(grids_t, fuse):
    """Project each scale, resize to the finest grid, sum and normalize."""
    if not grids_t:
        raise ShapeError("fusion needs at least one scale")
    sizes = [g.shape[0] * g.shape[1] for g in grids_t]
    h, w = grids_t[int(np.argmax(sizes))].shape[:2]
    total = 0.0
    for g, pw, pb in zip(grids_t, fuse.proj_w, fuse.proj_b):
        gh, gw, d = g.shape
        projected = (matmul(g.reshape(gh * gw, d), pw) + pb).reshape(gh, gw, -1)
        total = total + bilinear_resize(projected, h, w)
    return layer_norm(total, fuse.ln_gain, fuse.ln_bias)


def predict_logits(p_t, s_bar, head):
    """Class logits ``(K, H, W)`` from pixel features and decoded queries.

    Mask logit of query q at pixel u is ``mask_scale[q] * <s_q, P(u)>``;
    class weights are ``softmax(s_q class_proj)``; the logit of class k is
    the class-weighted sum of mask logits over queries.
    """
    h, w, d = p_t.shape
    if s_bar.shape[1] != d or head.class_proj.shape[0] != d or head.mask_scale.shape != (s_bar.shape[0],):
        raise ShapeError("pixel features, queries and head parameters disagree")
    masks = matmul(p_t.reshape(h * w, d), s_bar.T) * head.mask_scale  # (HW, Q)
    class_weights = softmax_rows(matmul(s_bar, head.class_proj))  # (Q, K)
    return matmul(masks, class_weights).T.reshape(-1, h, w)


# full model -----------------------------------------------------------------


@dataclass
class ModelParams:
    spec: ScaleSpec
    queries: np.ndarray  # (Q, d)
    context: np.ndarray  # (d,)
    alpha_txt: float
    layers: list  # LayerParams per scale, in spec order
    embeddings: EmbeddingTables
    decoder: DecoderParams
    class_embeddings: np.ndarray = field(default=None)  # (K, d); carried, not used

    @property
    def dim(self):
        return self.queries.shape[1]

    @property
    def num_classes(self):
        return self.decoder.head.class_proj.shape[1]


def init_model(seed, spec, num_queries=8, dim=32, num_classes=5, n_dec=2, heads=4, d_ff=None, t_max=16):
    """Randomly initialised parameters, reproducible from ``seed``."""
    d_ff = 4 * dim if d_ff is None else d_ff
    rng = np.random.default_rng(seed)

    def proj(fan_in, fan_out):
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))

    layers = [init_layer_params(rng, s.channels, dim) for s in spec]
    blocks = [
        BlockParams(
            ln1_gain=np.ones(dim), ln1_bias=np.zeros(dim),
            w_q=proj(dim, dim), w_k=proj(dim, dim), w_v=proj(dim, dim), w_o=proj(dim, dim),
            ln2_gain=np.ones(dim), ln2_bias=np.zeros(dim),
            w_1=proj(dim, d_ff), b_1=np.zeros(d_ff), w_2=proj(d_ff, dim), b_2=np.zeros(dim),
        )
        for _ in range(n_dec)
    ]
    fuse = FuseParams(
        proj_w=[proj(dim, dim) for _ in spec],
        proj_b=[np.zeros(dim) for _ in spec],
        ln_gain=np.ones(dim),
        ln_bias=np.zeros(dim),
    )
    head = HeadParams(class_proj=proj(dim, num_classes), mask_scale=np.ones(num_queries))
    emb = EmbeddingTables(
        temporal=rng.normal(0.0, 0.02, size=(t_max, dim)),
        scale=rng.normal(0.0, 0.02, size=(len(spec), dim)),
    )
    prior = synth_text_prior(seed, num_classes, dim)
    return ModelParams(
        spec=spec,
        queries=rng.normal(0.0, 1.0, size=(num_queries, dim)),
        context=prior.context,
        alpha_txt=0.0,
        layers=layers,
        embeddings=emb,
        decoder=DecoderParams(blocks, heads, fuse, head),
        class_embeddings=prior.class_embeddings,
    )


def frame_features(model, s_tilde, rgb_grids, dep_grids):
    out = []
    for p, rgb, dep in zip(model.layers, rgb_grids, dep_grids):
        u, _ = query_conditioned_features(s_tilde, rgb, dep, p)
        out.append(u)
    return out


def run_clip(frames, model, out_size=None, return_internals=False):
    """Logits ``(T, K, H, W)`` for one clip.

    ``frames`` is a list over the clip of ``(rgb_grids, depth_grids)``, each
    a list of TokenGrids in scale-spec order.  All frames share one decoded
    query set.
    """
    if not frames:
        raise ShapeError("empty clip")
    s_tilde = bias_queries(model.queries, model.context, model.alpha_txt)
    per_frame = [frame_features(model, s_tilde, rgb, dep) for rgb, dep in frames]
    memory = build_memory(per_frame, model.embeddings)
    s_bar = decode_queries(s_tilde, memory, model.decoder)
    logits, fused = [], []
    for grids_t in per_frame:
        p_t = fuse_scales(grids_t, model.decoder.fuse)
        fused.append(p_t)
        y = predict_logits(p_t, s_bar, model.decoder.head)
        if out_size is not None and tuple(out_size) != y.shape[1:]:
            y = bilinear_resize(y.transpose(1, 2, 0), *out_size).transpose(2, 0, 1)
        logits.append(y)
    logits = np.stack(logits)
    if return_internals:
        return logits, {"s_bar": s_bar, "memory": memory, "pixel_features": fused}
    return logits


# serialization --------------------------------------------------------------


def _flatten(model):
    out = {"queries": model.queries, "context": model.context,
           "embeddings.temporal": model.embeddings.temporal,
           "embeddings.scale": model.embeddings.scale,
           "head.class_proj": model.decoder.head.class_proj,
           "head.mask_scale": model.decoder.head.mask_scale,
           "fuse.ln_gain": model.decoder.fuse.ln_gain,
           "fuse.ln_bias": model.decoder.fuse.ln_bias}
    if model.class_embeddings is not None:
        out["class_embeddings"] = model.class_embeddings
    for j, (pw, pb) in enumerate(zip(model.decoder.fuse.proj_w, model.decoder.fuse.proj_b)):
        out[f"fuse.{j}.proj_w"] = pw
        out[f"fuse.{j}.proj_b"] = pb
    for j, lp in enumerate(model.layers):
        for f in fields(LayerParams):
            if f.name != "gate_logit":
                out[f"layers.{j}.{f.name}"] = getattr(lp, f.name)
    for i, blk in enumerate(model.decoder.blocks):
        for f in fields(BlockParams):
            out[f"blocks.{i}.{f.name}"] = getattr(blk, f.name)
    return out


def save_model(directory, model):
    """Write every parameter as a float64 tensor file plus ``params.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = _flatten(model)
    for name, arr in tensors.items():
        save_tensor(directory / f"{name}.t2g", np.asarray(arr, dtype=np.float64))
    manifest = {
        "scales": model.spec.to_list(),
        "heads": model.decoder.heads,
        "num_blocks": len(model.decoder.blocks),
        "alpha_txt": model.alpha_txt,
        "gate_logits": [lp.gate_logit for lp in model.layers],
        "tensors": {name: f"{name}.t2g" for name in sorted(tensors)},
    }
    (directory / "params.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_model(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "params.json").read_text())
    t = {name: load_tensor(directory / fname) for name, fname in manifest["tensors"].items()}
    spec = ScaleSpec(tuple(tuple(s) for s in manifest["scales"]))
    layers = [
        LayerParams(**{f.name: t[f"layers.{j}.{f.name}"] for f in fields(LayerParams) if f.name != "gate_logit"},
                    gate_logit=g)
        for j, g in enumerate(manifest["gate_logits"])
    ]
    blocks = [
        BlockParams(**{f.name: t[f"blocks.{i}.{f.name}"] for f in fields(BlockParams)})
        for i in range(manifest["num_blocks"])
    ]
    fuse = FuseParams(
        proj_w=[t[f"fuse.{j}.proj_w"] for j in range(len(spec))],
        proj_b=[t[f"fuse.{j}.proj_b"] for j in range(len(spec))],
        ln_gain=t["fuse.ln_gain"],
        ln_bias=t["fuse.ln_bias"],
    )
    return ModelParams(
        spec=spec,
        queries=t["queries"],
        context=t["context"],
        alpha_txt=manifest["alpha_txt"],
        layers=layers,
        embeddings=EmbeddingTables(t["embeddings.temporal"], t["embeddings.scale"]),
        decoder=DecoderParams(blocks, manifest["heads"], fuse,
                              HeadParams(t["head.class_proj"], t["head.mask_scale"])),
        class_embeddings=t.get("class_embeddings"),
    )
