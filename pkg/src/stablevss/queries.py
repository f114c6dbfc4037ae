"""Stability-query aggregation over frozen backbone tokens.

Per frame and scale: the text-biased queries attend to the tokens of each
branch, the resulting query summaries are projected back onto the pixels
with the same attention weights, the rgb and depth modulations are mixed
by a sigmoid gate, and the mix is added to a 1x1 projection of the rgb
features before a per-pixel LayerNorm.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .features import check_branch_pair
from .numerics import check_row_stochastic, layer_norm, matmul, sigmoid, softmax_rows


@dataclass
class LayerParams:
    w_q: np.ndarray  # (d, d)
    w_k: np.ndarray  # (C, d)
    w_v: np.ndarray  # (C, d)
    phi_w: np.ndarray  # (C, d)
    phi_b: np.ndarray  # (d,)
    ln_gain: np.ndarray  # (d,)
    ln_bias: np.ndarray  # (d,)
    gate_logit: float = 0.0

    @property
    def beta(self):
        return float(sigmoid(self.gate_logit))

    @property
    def dim(self):
        return self.w_q.shape[1]


def init_layer_params(rng, channels, dim):
    def proj(fan_in, fan_out):
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))

    return LayerParams(
        w_q=proj(dim, dim),
        w_k=proj(channels, dim),
        w_v=proj(channels, dim),
        phi_w=proj(channels, dim),
        phi_b=np.zeros(dim),
        ln_gain=np.ones(dim),
        ln_bias=np.zeros(dim),
        gate_logit=0.0,
    )


def bias_queries(s, context, alpha_txt):
    """Add ``alpha_txt * context`` to every query row."""
    s = np.asarray(s)
    context = np.asarray(context)
    if context.shape != (s.shape[1],):
        raise ShapeError(f"context vector {context.shape} does not match query width {s.shape[1]}")
    return s + alpha_txt * context[None, :]


def attend(s_tilde, tokens, p):
    """Cross-attention from queries to one token grid.

    Returns the ``(Q, N)`` attention map and the ``(Q, d)`` summaries.
    """
    x = tokens.tokens if hasattr(tokens, "tokens") else np.asarray(tokens)
    if x.shape[1] != p.w_k.shape[0] or x.shape[1] != p.w_v.shape[0]:
        raise ShapeError(f"tokens have {x.shape[1]} channels, projections expect {p.w_k.shape[0]}")
    if s_tilde.shape[1] != p.w_q.shape[0]:
        raise ShapeError("query width does not match W_q")
    q = matmul(s_tilde, p.w_q)
    k = matmul(x, p.w_k)
    v = matmul(x, p.w_v)
    a = softmax_rows(matmul(q, k.T), np.sqrt(p.dim))
    check_row_stochastic(a)
    return a, matmul(a, v)


def modulate_pixels(a, summaries, height, width):
    """Project summaries back to pixels: ``Unflat(A^T U)`` as an (H, W, d) grid."""
    if a.shape[1] != height * width:
        raise ShapeError(f"attention has {a.shape[1]} columns, grid has {height * width} pixels")
    return matmul(a.T, summaries).reshape(height, width, summaries.shape[1])


def fuse_branches(z_rgb, z_dep, beta):
    if z_rgb.shape != z_dep.shape:
        raise ShapeError(f"branch grids differ: {z_rgb.shape} vs {z_dep.shape}")
    if not 0.0 < beta < 1.0:
        raise ValueError(f"gate must lie in (0, 1), got {beta}")
    return beta * z_rgb + (1.0 - beta) * z_dep


def condition_features(features, z, p):
    """``LN(phi(F) + Z)`` per pixel; ``features`` is an (H, W, C) grid."""
    f = features.grid if hasattr(features, "grid") else np.asarray(features)
    if f.shape[:2] != z.shape[:2] or p.phi_w.shape != (f.shape[2], z.shape[2]):
        raise ShapeError(f"feature grid {f.shape} / modulation {z.shape} / phi {p.phi_w.shape} disagree")
    h, w, c = f.shape
    projected = (matmul(f.reshape(h * w, c), p.phi_w) + p.phi_b).reshape(h, w, -1)
    return layer_norm(projected + z, p.ln_gain, p.ln_bias)


def branch_modulation(s_tilde, grid, p):
    a, summaries = attend(s_tilde, grid, p)
    return modulate_pixels(a, summaries, grid.height, grid.width), a


def query_conditioned_features(s_tilde, rgb, dep, p):
    """Full per-(frame, scale) stage: returns U and the two attention maps."""
    check_branch_pair(rgb, dep)
    z_rgb, a_rgb = branch_modulation(s_tilde, rgb, p)
    z_dep, a_dep = branch_modulation(s_tilde, dep, p)
    z = fuse_branches(z_rgb, z_dep, p.beta)
    return condition_features(rgb, z, p), (a_rgb, a_dep)
