"""mIoU and video-consistency metrics.

Frame indices are 0-based throughout.  Label maps are ``(T, H, W)``
integer arrays; ``ignore`` marks pixels without ground truth.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ProtocolError, ShapeError

IGNORE = 255
DEFAULT_THETA_U8 = 10.0
DEFAULT_THETA_UNIT = 10.0 / 255.0
DEFAULT_WINDOWS = (8, 16)


def accumulate_confusion(pred, gt, num_classes, ignore=IGNORE, acc=None):
    """Add a (GT row, prediction column) count matrix for one batch of pixels."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if acc is None:
        acc = np.zeros((num_classes, num_classes), dtype=np.int64)
    valid = gt != ignore
    for name, arr, allow_ignore in (("ground truth", gt, True), ("prediction", pred, False)):
        bad = ((arr < 0) | (arr >= num_classes)) & valid
        if allow_ignore:
            bad &= arr != ignore
        if bad.any():
            pos = tuple(int(i) for i in np.argwhere(bad)[0])
            raise DataError(f"{name} label {arr[pos]} at pixel {pos} is outside [0, {num_classes})")
    idx = gt[valid].astype(np.int64) * num_classes + pred[valid].astype(np.int64)
    acc += np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes)
    return acc


def miou(conf):
    """Per-class IoU (NaN for classes without GT pixels) and their mean."""
    conf = np.asarray(conf, dtype=np.int64)
    tp = np.diag(conf)
    gt_pixels = conf.sum(axis=1)
    union = gt_pixels + conf.sum(axis=0) - tp
    present = gt_pixels > 0
    if not present.any():
        raise ProtocolError("no class has ground-truth pixels; mIoU is undefined")
    iou = np.full(conf.shape[0], np.nan)
    iou[present] = tp[present] / union[present]
    return iou, float(iou[present].mean())


def static_mask(gray_r, gray_i, theta):
    gray_r = np.asarray(gray_r, dtype=np.float64)
    gray_i = np.asarray(gray_i, dtype=np.float64)
    if gray_r.shape != gray_i.shape:
        raise ShapeError(f"grayscale frames differ: {gray_r.shape} vs {gray_i.shape}")
    if theta < 0:
        raise ValueError("threshold must be non-negative")
    return np.abs(gray_i - gray_r) <= theta


def _constant(frames):
    return np.all(frames == frames[0], axis=0)


def vc_dense(pred, gt, n, ignore=IGNORE, strict=False):
    """Dense-GT video consistency with window ``n``.

    A window's denominator holds pixels whose GT is valid and constant over
    the window; the numerator keeps those whose prediction is constant too
    (and, with ``strict``, equal to the GT label).  Windows with an empty
    denominator are skipped.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape or pred.ndim != 3:
        raise ShapeError(f"expected matching (T, H, W) maps, got {pred.shape} and {gt.shape}")
    c = gt.shape[0]
    if n < 1 or c < n:
        raise ProtocolError(f"video has {c} frames, window needs {n}")
    ratios = []
    for t in range(c - n + 1):
        g = gt[t:t + n]
        o = pred[t:t + n]
        denom = np.all(g != ignore, axis=0) & _constant(g)
        size = int(denom.sum())
        if size == 0:
            continue
        num = denom & _constant(o)
        if strict:
            num &= o[0] == g[0]
        ratios.append(num.sum() / size)
    if not ratios:
        raise ProtocolError("every window has an empty stable-pixel set")
    return float(np.mean(ratios))


def vc_approx(pred, gt_refs, gray, n, theta, ignore=IGNORE, strict=False):
    """Sparse-GT video consistency using static-pixel masks.

    ``gt_refs`` maps a labeled reference frame index to its label map;
    ``gray`` is ``(T, H, W)`` grayscale.  References whose window would run
    past the end of the video, or whose masked set is empty, are skipped.
    """
    pred = np.asarray(pred)
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim == 4 and gray.shape[-1] == 1:
        gray = gray[..., 0]
    if pred.ndim != 3 or gray.shape != pred.shape:
        raise ShapeError(f"predictions {pred.shape} and grayscale {gray.shape} differ")
    if not gt_refs:
        raise ProtocolError("no labeled reference frames")
    c = pred.shape[0]
    ratios = []
    for r in sorted(gt_refs):
        m_r = np.asarray(gt_refs[r])
        if m_r.shape != pred.shape[1:]:
            raise ShapeError(f"reference {r} label map {m_r.shape} does not match {pred.shape[1:]}")
        if r < 0 or r + n > c:
            continue
        denom = m_r != ignore
        for i in range(r, r + n):
            denom &= static_mask(gray[r], gray[i], theta)
        size = int(denom.sum())
        if size == 0:
            continue
        o = pred[r:r + n]
        num = denom & _constant(o)
        if strict:
            num &= o[0] == m_r
        ratios.append(num.sum() / size)
    if not ratios:
        raise ProtocolError("no usable reference frame (window too long or empty static set)")
    return float(np.mean(ratios))


def mvc(values):
    values = list(values)
    if not values:
        raise ProtocolError("mVC needs at least one video")
    return float(np.mean(values))


@dataclass
class MetricReport:
    per_class_iou: list
    miou: float
    vc: dict = field(default_factory=dict)  # n -> {video: VC}
    mvc: dict = field(default_factory=dict)  # n -> mean
    skipped: dict = field(default_factory=dict)  # n -> {video: reason}
    pixels: int = 0
    protocol: str = "dense"

    def to_dict(self):
        return {
            "protocol": self.protocol,
            "miou": self.miou,
            "per_class_iou": [None if np.isnan(v) else float(v) for v in self.per_class_iou],
            "pixels": self.pixels,
            "vc": {str(n): dict(sorted(v.items())) for n, v in sorted(self.vc.items())},
            "mvc": {str(n): v for n, v in sorted(self.mvc.items())},
            "skipped": {str(n): dict(sorted(v.items())) for n, v in sorted(self.skipped.items()) if v},
        }
