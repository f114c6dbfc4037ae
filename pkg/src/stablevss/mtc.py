"""Masked temporal consistency loss and its analytic subgradient.

Shapes: logits ``x`` are ``(B, T, K, H, W)``, labels ``y`` are
``(B, T, H, W)`` integers with ``ignore`` marking invalid pixels.  A
``(T, K, H, W)`` / ``(T, H, W)`` pair is treated as a batch of one.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ShapeError

IGNORE = 255


def default_num_scales(t):
    """Largest S with ``2**(S-1) < T``; at least 1."""
    return max(1, int(math.floor(math.log2(t - 1))) + 1) if t > 1 else 1


@dataclass(frozen=True)
class MtcConfig:
    num_scales: int = None  # None: derived from the clip length
    tau: float = 0.2
    alpha: float = 0.5
    weight: float = 1.0
    ignore: int = IGNORE

    def __post_init__(self):
        if not 0.0 <= self.tau < 1.0:
            raise ValueError(f"trim ratio must lie in [0, 1), got {self.tau}")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"decay must lie in (0, 1], got {self.alpha}")
        if self.num_scales is not None and self.num_scales < 1:
            raise ValueError("need at least one temporal scale")

    def strides(self, t):
        n = default_num_scales(t) if self.num_scales is None else self.num_scales
        return [2 ** s for s in range(n)]


@dataclass
class MtcResult:
    loss: float
    trimmed_means: dict = field(default_factory=dict)  # scale -> value
    counts: dict = field(default_factory=dict)  # scale -> |V^(s)|
    kept: dict = field(default_factory=dict)  # scale -> keep count
    valid_scales: list = field(default_factory=list)

    @property
    def empty(self):
        return not self.valid_scales

    def to_dict(self):
        return {
            "loss": self.loss,
            "empty": self.empty,
            "valid_scales": list(self.valid_scales),
            "trimmed_means": {str(s): v for s, v in sorted(self.trimmed_means.items())},
            "counts": {str(s): v for s, v in sorted(self.counts.items())},
            "kept": {str(s): v for s, v in sorted(self.kept.items())},
        }


def _batched(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.ndim == 4:
        x = x[None]
    if y.ndim == 3:
        y = y[None]
    if x.ndim != 5 or y.ndim != 4:
        raise ShapeError(f"expected (B,T,K,H,W) logits and (B,T,H,W) labels, got {x.shape}, {y.shape}")
    b, t, k, h, w = x.shape
    if y.shape != (b, t, h, w):
        raise ShapeError(f"labels {y.shape} do not match logits {x.shape}")
    if k < 2:
        raise ShapeError("need at least two classes")
    return x, y


def prob_from_logits(x, axis=2):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DomainError("logits contain non-finite values")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def temporal_delta(p, stride):
    """L1 distance between class distributions ``stride`` frames apart.

    ``p`` is ``(B, T, K, H, W)``; the result is ``(B, T - stride, H, W)``.
    """
    if stride >= p.shape[1]:
        raise ShapeError(f"stride {stride} needs more than {p.shape[1]} frames")
    return np.abs(p[:, stride:] - p[:, :-stride]).sum(axis=2)


def stable_mask(y, stride, ignore=IGNORE):
    a, b = y[:, :-stride], y[:, stride:]
    return (a != ignore) & (b != ignore) & (a == b)


def keep_count(n, tau):
    # round before flooring so that e.g. (1 - 0.3) * 10 counts as 7
    return max(1, math.floor(round((1.0 - tau) * n, 9)))


def trim_selection(values, tau):
    """Indices of the kept (smallest) values, ties broken by position."""
    values = np.asarray(values)
    if values.size == 0:
        return None
    order = np.argsort(values, kind="stable")
    return order[: keep_count(values.size, tau)]


def trimmed_mean(values, tau):
    """Mean of the smallest ``max(1, floor((1 - tau) n))`` values.

    Returns ``None`` for an empty input (the caller drops that scale).
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    sel = trim_selection(values, tau)
    if sel is None:
        return None
    return float(values[sel].mean())


def _scales(x, y, cfg):
    """Per-scale (s, stride, mask, delta, kept flat indices)."""
    p = prob_from_logits(x)
    t = x.shape[1]
    out = []
    for s, r in enumerate(cfg.strides(t)):
        if r >= t:
            continue
        delta = temporal_delta(p, r)
        mask = stable_mask(y, r, cfg.ignore)
        flat = np.flatnonzero(mask)
        if flat.size == 0:
            continue
        values = delta.ravel()[flat]
        out.append((s, r, mask, delta, flat, values, trim_selection(values, cfg.tau)))
    return p, out


def mtc_loss(x, y, cfg=MtcConfig()):
    """Unweighted loss; multiply by ``cfg.weight`` for the training term."""
    x, y = _batched(x, y)
    _, scales = _scales(x, y, cfg)
    res = MtcResult(loss=0.0)
    total = 0.0
    for s, _r, _mask, _delta, flat, values, sel in scales:
        tm = float(values[sel].mean())
        res.trimmed_means[s] = tm
        res.counts[s] = int(flat.size)
        res.kept[s] = int(sel.size)
        res.valid_scales.append(s)
        total += cfg.alpha ** s * tm
    if res.valid_scales:
        res.loss = total / len(res.valid_scales)
    return res


def softmax_backward(p, grad_p, axis=2):
    """Chain a gradient w.r.t. probabilities through softmax: ``p * (g - <g, p>)``."""
    return p * (grad_p - (grad_p * p).sum(axis=axis, keepdims=True))


def mtc_grad(x, y, cfg=MtcConfig()):
    """Subgradient of the unweighted loss with respect to the logits.

    The trimmed selection and ``sign(p[t+r] - p[t])`` are held fixed, with
    ``sign(0) = 0``.  Output has the shape of the input logits.
    """
    squeeze = np.asarray(x).ndim == 4
    x, y = _batched(x, y)
    p, scales = _scales(x, y, cfg)
    grad_p = np.zeros_like(p)
    n_valid = len(scales)
    b, t, k, h, w = x.shape
    for s, r, _mask, delta, flat, _values, sel in scales:
        coef = cfg.alpha ** s / (n_valid * sel.size)
        upstream = np.zeros(delta.size)
        upstream[flat[sel]] = coef
        upstream = upstream.reshape(delta.shape)[:, :, None]  # (B, T-r, 1, H, W)
        sgn = np.sign(p[:, r:] - p[:, :-r]) * upstream
        grad_p[:, r:] += sgn
        grad_p[:, :-r] -= sgn
    g = softmax_backward(p, grad_p)
    return g[0] if squeeze else g


@dataclass
class GradCheckReport:
    max_abs: float
    max_rel: float
    coords: int
    passed: bool
    max_grad: float = 0.0  # largest |analytic| among checked coordinates

    def to_dict(self):
        return {"max_abs": self.max_abs, "max_rel": self.max_rel, "coords": self.coords,
                "passed": self.passed, "max_grad": self.max_grad}


def jitter(x, rng, scale=1e-3):
    return np.asarray(x, dtype=np.float64) + rng.normal(0.0, scale, size=np.shape(x))


def finite_diff_check(x, y, cfg=MtcConfig(), eps=1e-6, num_coords=200, rng=None,
                      grad_fn=None, jitter_scale=1e-3, tol=1e-4):
    """Compare an analytic gradient with central differences.

    ``x`` is jittered first so that trimming ties and zero differences
    are unlikely to sit within ``eps`` of a kink.  The relative deviation
    of a coordinate is ``|fd - g| / max(|fd|, |g|, 1e-3 * max|g|)``; the
    floor keeps near-zero coordinates from dominating.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    rng = np.random.default_rng(0) if rng is None else rng
    grad_fn = mtc_grad if grad_fn is None else grad_fn
    x = jitter(x, rng, jitter_scale) if jitter_scale else np.asarray(x, dtype=np.float64)
    g = grad_fn(x, y, cfg)
    n = min(num_coords, x.size)
    coords = rng.choice(x.size, size=n, replace=False)
    fd = np.empty(n)
    flat = x.ravel()
    for i, c in enumerate(coords):
        xp = flat.copy()
        xm = flat.copy()
        xp[c] += eps
        xm[c] -= eps
        fd[i] = (mtc_loss(xp.reshape(x.shape), y, cfg).loss
                 - mtc_loss(xm.reshape(x.shape), y, cfg).loss) / (2 * eps)
    an = g.ravel()[coords]
    diff = np.abs(fd - an)
    floor = max(1e-3 * float(np.abs(g).max()), 1e-12)
    rel = diff / np.maximum(np.maximum(np.abs(fd), np.abs(an)), floor)
    max_rel = float(rel.max()) if n else 0.0
    return GradCheckReport(float(diff.max()) if n else 0.0, max_rel, n, max_rel < tol,
                           float(np.abs(an).max()) if n else 0.0)
