"""Synthetic driving-like videos with class-structured backbone tokens.

Each video has a static layout of horizontal class bands plus an optional
square object that moves one pixel per frame.  Tokens at every scale are
``signal * prototype[class] + noise * synth_tokens(...)``, where the
prototypes are time-invariant counter-based draws.  A fraction of the
channels can carry noise that is strongly correlated over time, which makes
frame-wise classifiers trade accuracy against flicker.  Grayscale frames give
each class a fixed intensity plus small per-frame noise, so pixels away from
the moving object are static.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import (
    STATIC_FRAME,
    TokenGrid,
    branch_id,
    counter_uniform,
    counter_values,
    save_tensor,
    stream_key,
    synth_tokens,
)

IGNORE = 255
_PROTO_STREAM = 7
_LAYOUT_STREAM = 8
_GRAY_STREAM = 9


@dataclass(frozen=True)
class SynthConfig:
    num_videos: int = 2
    num_frames: int = 16
    num_classes: int = 5
    stable_fraction: float = 0.85
    signal: float = 1.0
    noise: float = 0.6
    temporal_corr: float = 0.0  # noise correlation over time in the "steady" channels
    steady_fraction: float = 0.0  # fraction of channels (the last ones) using temporal_corr
    ignore_rows: int = 1
    labeled_every: int = 0  # 0: dense labels; k > 0: label every k-th frame only
    gray_noise: float = 3.0


def class_layout(seed, video, h, w, num_classes):
    """Static background: horizontal bands of random classes."""
    key = stream_key(seed, STATIC_FRAME, _LAYOUT_STREAM, video)
    u = counter_uniform(key, 2 * num_classes)
    n_bands = max(1, min(num_classes, h))
    cuts = np.sort((u[:n_bands - 1] * h).astype(int))
    classes = (u[num_classes:num_classes + n_bands] * num_classes).astype(int)
    band = classes[np.searchsorted(cuts, np.arange(h), side="right")]
    return np.repeat(band[:, None], w, axis=1)


def label_video(seed, video, t_len, h, w, cfg):
    base = class_layout(seed, video, h, w, cfg.num_classes)
    labels = np.repeat(base[None], t_len, axis=0).astype(np.int64)
    side = int(round(np.sqrt((1.0 - cfg.stable_fraction) * h * w)))
    if side > 0:
        obj_class = (video + 1) % cfg.num_classes
        key = stream_key(seed, STATIC_FRAME, _LAYOUT_STREAM, 1000 + video)
        u = counter_uniform(key, 2)
        y0 = int(u[0] * max(1, h - side))
        x0 = int(u[1] * max(1, w - side))
        for t in range(t_len):
            x = (x0 + t) % max(1, w - side + 1)
            labels[t, y0:y0 + side, x:x + side] = obj_class
    if cfg.ignore_rows:
        labels[:, h - cfg.ignore_rows:, :] = IGNORE
    return labels


def prototypes(seed, branch, scale, num_classes):
    key = stream_key(seed, STATIC_FRAME, _PROTO_STREAM + 10 * branch_id(branch), scale.scale_id)
    return counter_values(key, num_classes * scale.channels).reshape(num_classes, scale.channels)


def sample_labels(labels, h, w):
    """Nearest-neighbour label at each token centre of an h x w grid."""
    fh, fw = labels.shape
    ys = np.minimum(((np.arange(h) + 0.5) * fh / h).astype(int), fh - 1)
    xs = np.minimum(((np.arange(w) + 0.5) * fw / w).astype(int), fw - 1)
    return labels[np.ix_(ys, xs)]


def frame_noise(seed, video, t, branch, spec, cfg):
    """Unit-variance noise; the last ``steady_fraction`` of channels is correlated over time."""
    fresh = synth_tokens(seed * 1000 + video, t, branch, spec)
    static = synth_tokens(seed * 1000 + video, STATIC_FRAME, branch, spec)
    out = []
    for s, f, st in zip(spec, fresh, static):
        rho = np.zeros(s.channels)
        rho[s.channels - int(round(cfg.steady_fraction * s.channels)):] = cfg.temporal_corr
        out.append(rho * st.tokens + np.sqrt(1 - rho ** 2) * f.tokens)
    return out


def frame_tokens(seed, video, t, branch, spec, labels_t, cfg):
    grids = []
    for s, g in zip(spec, frame_noise(seed, video, t, branch, spec, cfg)):
        lab = sample_labels(labels_t, s.height, s.width).ravel()
        # ignore pixels look like class 0 to the backbone
        lab = np.where(lab == IGNORE, 0, lab)
        proto = prototypes(seed, branch, s, cfg.num_classes)
        tokens = cfg.signal * proto[lab] + cfg.noise * g
        grids.append(TokenGrid(t, s.scale_id, branch, s.height, s.width, tokens))
    return grids


def gray_video(seed, video, labels, cfg):
    t_len, h, w = labels.shape
    levels = 30.0 + 200.0 * counter_uniform(stream_key(seed, STATIC_FRAME, _GRAY_STREAM, video), cfg.num_classes)
    lab = np.where(labels == IGNORE, 0, labels)
    frames = []
    for t in range(t_len):
        jitter = (counter_uniform(stream_key(seed, t, _GRAY_STREAM, video), h * w) - 0.5) * 2 * cfg.gray_noise
        frames.append(levels[lab[t]] + jitter.reshape(h, w))
    return np.clip(np.rint(np.stack(frames)), 0, 255).astype(np.uint8)


def generate(out_dir, seed, spec, frame_size, cfg=SynthConfig()):
    """Write a dataset to ``out_dir`` and return its manifest."""
    out = Path(out_dir)
    h, w = frame_size
    videos = []
    for v in range(cfg.num_videos):
        name = f"video{v:03d}"
        vdir = out / name
        for sub in ("features", "labels", "gray"):
            (vdir / sub).mkdir(parents=True, exist_ok=True)
        labels = label_video(seed, v, cfg.num_frames, h, w, cfg)
        gray = gray_video(seed, v, labels, cfg)
        feats = {"rgb": [], "depth": []}
        label_files, gray_files = {}, []
        labeled = range(0, cfg.num_frames, cfg.labeled_every) if cfg.labeled_every else range(cfg.num_frames)
        for t in range(cfg.num_frames):
            for branch in ("rgb", "depth"):
                files = []
                for g in frame_tokens(seed, v, t, branch, spec, labels[t], cfg):
                    rel = f"{name}/features/f{t:04d}_{branch}_s{g.scale_id}.t2g"
                    save_tensor(out / rel, g.tokens.astype(np.float32))
                    files.append(rel)
                feats[branch].append(files)
            rel = f"{name}/gray/f{t:04d}.t2g"
            save_tensor(out / rel, gray[t])
            gray_files.append(rel)
            if t in labeled:
                rel = f"{name}/labels/f{t:04d}.t2g"
                save_tensor(out / rel, labels[t].astype(np.uint8))
                label_files[str(t)] = rel
        videos.append({
            "name": name,
            "num_frames": cfg.num_frames,
            "features": feats,
            "labels": label_files,
            "gray": gray_files,
        })
    manifest = {
        "format": "stablevss-dataset",
        "version": 1,
        "seed": seed,
        "num_classes": cfg.num_classes,
        "ignore": IGNORE,
        "frame_size": [h, w],
        "scales": spec.to_list(),
        "sparse": bool(cfg.labeled_every),
        "synth": {k: getattr(cfg, k) for k in cfg.__dataclass_fields__},
        "videos": videos,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
