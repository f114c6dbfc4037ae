"""Reading dataset and prediction manifests written by the CLI."""

import json
from pathlib import Path

import numpy as np

from .errors import DataError
from .features import ScaleSpec, TokenGrid, load_label_map, load_tensor


class Dataset:
    def __init__(self, root):
        self.root = Path(root)
        path = self.root / "manifest.json"
        if not path.exists():
            raise DataError(f"no manifest.json in {self.root}")
        self.manifest = json.loads(path.read_text())
        self.spec = ScaleSpec(tuple(tuple(s) for s in self.manifest["scales"]))
        self.videos = self.manifest["videos"]

    @property
    def num_classes(self):
        return self.manifest["num_classes"]

    @property
    def ignore(self):
        return self.manifest.get("ignore", 255)

    @property
    def frame_size(self):
        return tuple(self.manifest["frame_size"])

    @property
    def sparse(self):
        return bool(self.manifest.get("sparse", False))

    def video(self, name):
        for v in self.videos:
            if v["name"] == name:
                return v
        raise DataError(f"video {name!r} not in manifest")

    def frame_grids(self, video, t):
        out = []
        for branch in ("rgb", "depth"):
            files = video["features"][branch][t]
            if len(files) != len(self.spec):
                raise DataError(f"{video['name']} frame {t}: expected {len(self.spec)} {branch} scales")
            grids = []
            for s, f in zip(self.spec, files):
                tokens = load_tensor(self.root / f).astype(np.float64)
                if tokens.shape != (s.num_tokens, s.channels):
                    raise DataError(f"{f}: shape {tokens.shape}, expected {(s.num_tokens, s.channels)}")
                grids.append(TokenGrid(t, s.scale_id, branch, s.height, s.width, tokens))
            out.append(grids)
        return tuple(out)

    def labels(self, video):
        """``{frame: label map}`` for every labeled frame."""
        return {int(t): load_label_map(self.root / f).astype(np.int64) for t, f in video["labels"].items()}

    def dense_labels(self, video):
        labs = self.labels(video)
        if len(labs) != video["num_frames"]:
            raise DataError(f"{video['name']}: dense labels needed, only {len(labs)} of {video['num_frames']} frames labeled")
        return np.stack([labs[t] for t in range(video["num_frames"])])

    def gray(self, video):
        frames = [load_tensor(self.root / f) for f in video["gray"]]
        return np.stack([f[..., 0] if f.ndim == 3 else f for f in frames]).astype(np.float64)


def load_predictions(root):
    """``{video name: (T, H, W) label array}`` from an inference output directory."""
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise DataError(f"no manifest.json in {root}")
    manifest = json.loads(path.read_text())
    return {
        v["name"]: np.stack([load_label_map(root / f).astype(np.int64) for f in v["labels"]])
        for v in manifest["videos"]
    }
