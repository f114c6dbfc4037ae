"""Run configuration: one JSON file plus command-line overrides."""

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .features import ScaleSpec
from .mtc import MtcConfig
from .sampling import DEFAULT_STRIDES, normalize_strides
from .synth import SynthConfig


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    scales: tuple = ((0, 16, 16, 16), (1, 8, 8, 24))
    frame_size: tuple = None  # None: the finest token grid
    num_classes: int = 5
    num_queries: int = 8
    dim: int = 32
    num_blocks: int = 2
    heads: int = 4
    d_ff: int = None  # None: 4 * dim
    clip_len: int = 4
    strides: tuple = DEFAULT_STRIDES
    # temporal consistency loss
    num_scales: int = None
    tau: float = 0.2
    alpha: float = 0.5
    lambda_mtc: float = 1.0
    # evaluation
    windows: tuple = (8, 16)
    theta: float = 10.0
    protocol: str = None  # None: chosen from the dataset
    strict_vc: bool = False
    # synthetic data
    synth: SynthConfig = field(default_factory=lambda: SynthConfig(
        noise=1.5, temporal_corr=0.95, steady_fraction=0.5))
    # toy training
    steps: int = 500
    lr: float = 1.0
    momentum: float = 0.9
    toy_strides: tuple = (1, 2)
    clips_per_step: int = 2

    def __post_init__(self):
        object.__setattr__(self, "strides", normalize_strides(self.strides))
        object.__setattr__(self, "toy_strides", normalize_strides(self.toy_strides))
        object.__setattr__(self, "scales", tuple(tuple(s) for s in self.scales))
        object.__setattr__(self, "windows", tuple(int(n) for n in self.windows))
        if self.frame_size is not None:
            object.__setattr__(self, "frame_size", tuple(self.frame_size))
        if self.protocol not in (None, "dense", "approx"):
            raise ValueError(f"protocol must be 'dense' or 'approx', got {self.protocol!r}")
        self.mtc  # validates tau / alpha

    @property
    def spec(self):
        return ScaleSpec(self.scales)

    @property
    def mtc(self):
        return MtcConfig(num_scales=self.num_scales, tau=self.tau, alpha=self.alpha, weight=self.lambda_mtc)

    @property
    def resolved_frame_size(self):
        if self.frame_size is not None:
            return self.frame_size
        finest = max(self.spec, key=lambda s: s.num_tokens)
        return (finest.height, finest.width)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, raw):
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        raw = dict(raw)
        if isinstance(raw.get("synth"), dict):
            raw["synth"] = SynthConfig(**raw["synth"])
        return cls(**raw)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def override(self, **kwargs):
        return replace(self, **{k: v for k, v in kwargs.items() if v is not None})
