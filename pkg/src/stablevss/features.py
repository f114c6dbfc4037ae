"""Synthetic backbone tokens, tensor file I/O and grayscale conversion.

Token values come from a counter-based generator: every value is a pure
function of ``(seed, frame, branch, scale, token, channel)``.  The key is
built by folding the first four fields through the splitmix64 finalizer

    fold(h, v) = mix64(((h ^ v) + GOLDEN) mod 2**64)
    key        = fold(fold(fold(fold(0, seed), frame), branch), scale)

and the value at flat index ``i = token * C + channel`` is

    bits = mix64((key + (i + 1) * GOLDEN) mod 2**64)
    u    = (bits >> 11) * 2**-53                 # uniform on [0, 1)
    x    = (2u - 1) * sqrt(3)                    # zero mean, unit variance

Negative integers are taken modulo 2**64.  ``branch`` is 0 for rgb and 1
for depth.
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ShapeError,
    TensorFormatError,
    TruncatedFileError,
    UnsupportedDtypeError,
    UnsupportedVersionError,
)

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
BRANCHES = ("rgb", "depth")
STATIC_FRAME = -1  # frame key used for time-invariant components


def _mix64(z):
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def _fold(h, v):
    with np.errstate(over="ignore"):
        return _mix64((np.uint64(h) ^ np.uint64(v & MASK64)) + np.uint64(GOLDEN))


def stream_key(*fields):
    h = np.uint64(0)
    for v in fields:
        h = _fold(h, int(v))
    return int(h)


def counter_uniform(key, count, offset=0):
    """``count`` uniforms on [0, 1) from stream ``key`` starting at ``offset``."""
    idx = np.arange(offset + 1, offset + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        bits = _mix64(np.uint64(key) + idx * np.uint64(GOLDEN))
    return (bits >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


def counter_values(key, count):
    return (2.0 * counter_uniform(key, count) - 1.0) * np.sqrt(3.0)


def branch_id(branch):
    try:
        return BRANCHES.index(branch)
    except ValueError:
        raise ValueError(f"unknown branch {branch!r}; expected one of {BRANCHES}") from None


@dataclass(frozen=True)
class Scale:
    scale_id: int
    height: int
    width: int
    channels: int

    @property
    def num_tokens(self):
        return self.height * self.width


@dataclass(frozen=True)
class ScaleSpec:
    scales: tuple

    def __post_init__(self):
        scales = tuple(s if isinstance(s, Scale) else Scale(*s) for s in self.scales)
        if not scales:
            raise ShapeError("ScaleSpec needs at least one scale")
        ids = [s.scale_id for s in scales]
        if len(set(ids)) != len(ids):
            raise ShapeError(f"duplicate scale ids in {ids}")
        for s in scales:
            if min(s.height, s.width, s.channels) < 1:
                raise ShapeError(f"non-positive dimension in {s}")
        object.__setattr__(self, "scales", scales)

    def __iter__(self):
        return iter(self.scales)

    def __len__(self):
        return len(self.scales)

    def to_list(self):
        return [[s.scale_id, s.height, s.width, s.channels] for s in self.scales]


@dataclass
class TokenGrid:
    frame: int
    scale_id: int
    branch: str
    height: int
    width: int
    tokens: np.ndarray  # (N, C)

    def __post_init__(self):
        branch_id(self.branch)
        if self.tokens.ndim != 2 or self.tokens.shape[0] != self.height * self.width:
            raise ShapeError(
                f"token matrix {self.tokens.shape} does not match {self.height}x{self.width} grid"
            )

    @property
    def channels(self):
        return self.tokens.shape[1]

    @property
    def grid(self):
        return self.tokens.reshape(self.height, self.width, self.channels)


def check_branch_pair(rgb, dep):
    if (rgb.height, rgb.width, rgb.channels) != (dep.height, dep.width, dep.channels):
        raise ShapeError(
            f"rgb/depth token grids differ at frame {rgb.frame}, scale {rgb.scale_id}"
        )


@dataclass
class TextPrior:
    class_embeddings: np.ndarray  # (K, d)
    context: np.ndarray  # (d,)

    def __post_init__(self):
        if self.class_embeddings.ndim != 2 or self.class_embeddings.shape[0] < 1:
            raise ShapeError("class embeddings must be a non-empty (K, d) matrix")
        if self.context.shape != (self.class_embeddings.shape[1],):
            raise ShapeError("context vector width must match the embedding width")


def synth_text_prior(seed, num_classes, dim):
    emb = counter_values(stream_key(seed, STATIC_FRAME, 2, 0), num_classes * dim)
    ctx = counter_values(stream_key(seed, STATIC_FRAME, 2, 1), dim)
    return TextPrior(emb.reshape(num_classes, dim), ctx / np.sqrt(dim))


def synth_tokens(seed, t, branch, spec, temporal_corr=0.0):
    """Deterministic tokens for one frame and branch at every scale.

    With ``temporal_corr = rho > 0`` each value is
    ``rho * static + sqrt(1 - rho**2) * fresh`` where ``static`` is drawn
    with frame key ``STATIC_FRAME`` so consecutive frames are correlated.
    """
    if not 0.0 <= temporal_corr < 1.0:
        raise ValueError("temporal_corr must lie in [0, 1)")
    b = branch_id(branch)
    grids = []
    for s in spec:
        n = s.num_tokens * s.channels
        vals = counter_values(stream_key(seed, t, b, s.scale_id), n)
        if temporal_corr > 0:
            static = counter_values(stream_key(seed, STATIC_FRAME, b, s.scale_id), n)
            vals = temporal_corr * static + np.sqrt(1 - temporal_corr ** 2) * vals
        grids.append(
            TokenGrid(t, s.scale_id, branch, s.height, s.width, vals.reshape(s.num_tokens, s.channels))
        )
    return grids


# tensor file format ---------------------------------------------------------

MAGIC = b"T2GT"
VERSION = 1
_HEADER = struct.Struct("<4sBBBB")
_DTYPES = {0: np.dtype("<u1"), 1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("u1"): 0, np.dtype("f4"): 1, np.dtype("f8"): 2}


def encode_tensor(data):
    data = np.asarray(data)
    code = _CODES.get(data.dtype.newbyteorder("="))
    if code is None:
        raise UnsupportedDtypeError(f"cannot store dtype {data.dtype}; use uint8, float32 or float64")
    if data.ndim < 1 or data.ndim > 255:
        raise ShapeError(f"tensor rank must be in [1, 255], got {data.ndim}")
    header = _HEADER.pack(MAGIC, VERSION, code, data.ndim, 0)
    dims = struct.pack(f"<{data.ndim}I", *data.shape)
    payload = np.ascontiguousarray(data, dtype=_DTYPES[code]).tobytes()
    return header + dims + payload


def decode_tensor(buf, name="<buffer>"):
    if len(buf) < _HEADER.size:
        raise TruncatedFileError(f"{name}: header needs {_HEADER.size} bytes, got {len(buf)}")
    magic, version, code, rank, _pad = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"{name}: bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"{name}: unsupported version {version}")
    if code not in _DTYPES:
        raise UnsupportedDtypeError(f"{name}: unknown dtype code {code}")
    if rank < 1:
        raise TensorFormatError(f"{name}: rank must be at least 1")
    off = _HEADER.size
    if len(buf) < off + 4 * rank:
        raise TruncatedFileError(f"{name}: truncated dimension table")
    dims = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    dtype = _DTYPES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) < off + nbytes:
        raise TruncatedFileError(f"{name}: payload has {len(buf) - off} of {nbytes} bytes")
    if len(buf) > off + nbytes:
        raise TensorFormatError(f"{name}: {len(buf) - off - nbytes} trailing bytes")
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=off)
    return arr.reshape(dims).astype(dtype.newbyteorder("="))


def save_tensor(path, data):
    Path(path).write_bytes(encode_tensor(data))


def load_tensor(path):
    path = Path(path)
    return decode_tensor(path.read_bytes(), name=str(path))


def save_label_png(path, labels):
    from PIL import Image

    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ShapeError("PNG label maps must be 2-D with values in [0, 255]")
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path)


def load_label_png(path):
    from PIL import Image

    with Image.open(path) as im:
        if im.mode != "L":
            raise TensorFormatError(f"{path}: expected an 8-bit single-channel PNG, got mode {im.mode}")
        return np.array(im, dtype=np.uint8)


def load_label_map(path):
    """Label map from either a tensor file or an 8-bit PNG."""
    if str(path).lower().endswith(".png"):
        return load_label_png(path)
    return load_tensor(path)


BT601 = np.array([0.299, 0.587, 0.114])


def grayscale(rgb):
    """BT.601 luma of an ``(H, W, 3)`` frame, kept in the input's range."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ShapeError(f"expected an (H, W, 3) frame, got {rgb.shape}")
    return (rgb.astype(np.float64) @ BT601)[..., None]
