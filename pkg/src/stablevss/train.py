"""Toy training of a linear head on frozen pixel features.

Logits are ``x(u) = W P(u) + b``.  The objective is cross-entropy over
valid pixels plus ``lambda_mtc`` times the masked temporal consistency loss
on clips drawn with randomized strides.  Gradients are analytic.
"""

from dataclasses import dataclass, field

import numpy as np

from .decoder import frame_features, fuse_scales
from .queries import bias_queries
from .errors import StableVSSError
from .metrics import mvc, vc_dense
from .mtc import MtcConfig, mtc_grad, mtc_loss, prob_from_logits
from .numerics import bilinear_resize
from .sampling import sample_clip


class TrainingDiverged(StableVSSError):
    def __init__(self, step):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


@dataclass
class ToyTrainState:
    weight: np.ndarray  # (K, d)
    bias: np.ndarray  # (K,)
    lr: float
    history: list = field(default_factory=list)  # dicts with ce, mtc, total

    def logits(self, p):
        """``p`` is ``(..., H, W, d)``; returns ``(..., K, H, W)``."""
        x = p @ self.weight.T + self.bias
        return np.moveaxis(x, -1, -3)

    def predict(self, p):
        return self.logits(p).argmax(axis=-3)

    def to_dict(self):
        return {
            "lr": self.lr,
            "steps": len(self.history),
            "initial": self.history[0] if self.history else None,
            "final": self.history[-1] if self.history else None,
            "history": self.history,
        }


def pixel_features(model, video_frames, frame_size):
    """Per-frame fused pixel features ``(T, H, W, d)``; independent of the clip."""
    s_tilde = bias_queries(model.queries, model.context, model.alpha_txt)
    out = []
    for rgb, dep in video_frames:
        p = fuse_scales(frame_features(model, s_tilde, rgb, dep), model.decoder.fuse)
        if p.shape[:2] != tuple(frame_size):
            p = bilinear_resize(p, *frame_size)
        out.append(p)
    return np.stack(out)


def cross_entropy(x, y, ignore):
    """Mean CE over valid pixels and its gradient w.r.t. ``x`` (class axis 2)."""
    p = prob_from_logits(x)
    valid = y != ignore
    n = max(int(valid.sum()), 1)
    safe = np.where(valid, y, 0)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, safe[:, :, None], 1.0, axis=2)
    picked = np.take_along_axis(p, safe[:, :, None], axis=2)[:, :, 0]
    loss = -np.log(np.maximum(picked, 1e-300))[valid].sum() / n
    grad = (p - onehot) * valid[:, :, None] / n
    return float(loss), grad


def train_toy(videos, num_classes, mtc_cfg=MtcConfig(), lambda_mtc=1.0, steps=500, lr=1.0,
              momentum=0.9, clip_len=4, strides=(1, 2), clips_per_step=2, seed=0,
              ignore=255, grad_fn=None):
    """Gradient descent with momentum on the linear head.

    ``videos`` is a list of ``(features (T,H,W,d), labels (T,H,W))``.
    """
    grad_fn = mtc_grad if grad_fn is None else grad_fn
    rng = np.random.default_rng(seed)
    d = videos[0][0].shape[-1]
    state = ToyTrainState(np.zeros((num_classes, d)), np.zeros(num_classes), lr)
    vel_w = np.zeros_like(state.weight)
    vel_b = np.zeros_like(state.bias)
    for step in range(steps):
        feats, labs = [], []
        for _ in range(clips_per_step):
            p, y = videos[int(rng.integers(len(videos)))]
            clip = sample_clip(len(p), clip_len, strides, rng)
            feats.append(p[clip.indices])
            labs.append(y[clip.indices])
        p = np.stack(feats)  # (B, T, H, W, d)
        y = np.stack(labs)
        with np.errstate(all="ignore"):
            x = state.logits(p)
        if not np.isfinite(x).all():
            raise TrainingDiverged(step)
        ce, g = cross_entropy(x, y, ignore)
        mtc = mtc_loss(x, y, mtc_cfg).loss
        total = ce + lambda_mtc * mtc
        if not np.isfinite(total):
            raise TrainingDiverged(step)
        state.history.append({"step": step, "ce": ce, "mtc": mtc, "total": total})
        g = g + lambda_mtc * grad_fn(x, y, mtc_cfg)
        gw = np.einsum("btkhw,bthwd->kd", g, p)
        gb = g.sum(axis=(0, 1, 3, 4))
        vel_w = momentum * vel_w - lr * gw
        vel_b = momentum * vel_b - lr * gb
        state.weight = state.weight + vel_w
        state.bias = state.bias + vel_b
    return state


def toy_mvc(state, videos, n=2, ignore=255):
    return mvc(vc_dense(state.predict(p), y, n, ignore) for p, y in videos)
