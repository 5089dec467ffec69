"""Synthetic foreground/background video samples.

A sample is a rank-``r`` Gaussian background ``U V^T`` plus a sparse moving
foreground (bouncing sprites, or bouncing MNIST digits read from IDX
files). Every sample is normalized on its own: one affine map brings ``M``
to ``[0, 1]``, the background absorbs the offset and both components share
the scale, so ``M = L + S`` holds exactly.
"""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import urpc
from .errors import FormatError, IdxCountError, IdxError, IdxMagicError, IdxTruncatedError, ParameterError, ShapeError
from .tensor_core import VideoMatrix

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SPLITS = ("train", "val", "test")
SCALE_GUARD = 1e-12


@dataclass(frozen=True)
class DataGenConfig:
    h: int = 32
    w: int = 32
    m: int = 20
    r: int = 5
    n_train: int = 800
    n_val: int = 100
    n_test: int = 100
    seed: int = 0
    source: str = "sprites"  # or "mnist"
    mnist_images: str | None = None
    mnist_labels: str | None = None

    def __post_init__(self):
        if min(self.h, self.w, self.m) < 1:
            raise ParameterError(f"invalid geometry {self.h}x{self.w}x{self.m}")
        if not 0 <= self.r <= min(self.h * self.w, self.m):
            raise ParameterError(f"rank {self.r} must lie in [0, min(n, m)]")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ParameterError("split sizes must be nonnegative")
        if self.source not in ("sprites", "mnist"):
            raise ParameterError(f"unknown foreground source {self.source!r}")

    @property
    def counts(self):
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}


@dataclass(frozen=True)
class DataSample:
    M: VideoMatrix
    L: VideoMatrix
    S: VideoMatrix
    scale: float
    offset: float


@dataclass
class VideoDataset:
    """``N`` samples stacked as ``(N, n, m)`` arrays."""

    M: np.ndarray
    L: np.ndarray
    S: np.ndarray
    scales: np.ndarray
    offsets: np.ndarray
    h: int
    w: int

    def __len__(self):
        return self.M.shape[0]

    @property
    def geometry(self):
        return (self.h, self.w, self.M.shape[-1])

    def sample(self, i):
        return DataSample(
            VideoMatrix(self.M[i], self.h, self.w),
            VideoMatrix(self.L[i], self.h, self.w),
            VideoMatrix(self.S[i], self.h, self.w),
            float(self.scales[i]),
            float(self.offsets[i]),
        )

    def subset(self, idx):
        return VideoDataset(self.M[idx], self.L[idx], self.S[idx], self.scales[idx], self.offsets[idx], self.h, self.w)

    @classmethod
    def from_samples(cls, samples, h, w):
        if not samples:
            return cls(*(np.zeros((0, h * w, 0)) for _ in range(3)), np.zeros(0), np.zeros(0), h, w)
        return cls(
            np.stack([s.M.data for s in samples]),
            np.stack([s.L.data for s in samples]),
            np.stack([s.S.data for s in samples]),
            np.array([s.scale for s in samples]),
            np.array([s.offset for s in samples]),
            h,
            w,
        )


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def gen_low_rank_background(n, m, r, seed):
    """``U V^T`` with i.i.d. standard normal ``U (n x r)`` and ``V (m x r)``."""
    if not 0 <= r <= min(n, m):
        raise ParameterError(f"rank {r} must lie in [0, min({n}, {m})]")
    rng = _rng(seed)
    U = rng.standard_normal((n, r))
    V = rng.standard_normal((m, r))
    return U @ V.T


def bounce_track(start, velocity, limit, m):
    """Integer positions of a point moving at ``velocity`` inside ``[0, limit]``
    with mirror reflection at the walls. Returns ``(positions, velocities)``,
    where ``velocities[t]`` is the velocity used to step from frame t."""
    pos = np.empty(m, dtype=np.int64)
    vel = np.empty(m, dtype=np.int64)
    p, v = int(start), int(velocity)
    for t in range(m):
        pos[t] = p
        vel[t] = v
        p = p + v
        if p < 0:
            p, v = -p, -v
        elif p > limit:
            p, v = 2 * limit - p, -v
        p = min(max(p, 0), limit)
    return pos, vel


def _sprite_mask(shape, kind):
    sh, sw = shape
    if kind == "rect":
        return np.ones((sh, sw), dtype=bool)
    yy = (np.arange(sh) - (sh - 1) / 2) / (sh / 2)
    xx = (np.arange(sw) - (sw - 1) / 2) / (sw / 2)
    return yy[:, None] ** 2 + xx[None, :] ** 2 <= 1.0


def gen_moving_sprites(h, w, m, seed, n_sprites=None, return_tracks=False):
    """1-2 rigid rectangles/ellipses bouncing around a zero background.

    Returns an ``(n, m)`` array (and, with ``return_tracks``, a list of
    per-sprite dicts with positions, velocities and masks).
    """
    rng = _rng(seed)
    if n_sprites is None:
        n_sprites = int(rng.integers(1, 3))
    lo, hi = max(2, h // 8, w // 8), max(2, min(h, w) // 4)
    frames = np.zeros((m, h, w))
    tracks = []
    for _ in range(n_sprites):
        sh, sw = (int(x) for x in rng.integers(lo, hi + 1, size=2))
        sh, sw = min(sh, h), min(sw, w)
        kind = "rect" if rng.random() < 0.5 else "ellipse"
        intensity = float(rng.uniform(0.2, 1.0))
        mask = _sprite_mask((sh, sw), kind)
        vy, vx = 0, 0
        while vy == 0 and vx == 0:
            vy, vx = (int(v) for v in rng.integers(-2, 3, size=2))
        ys, vys = bounce_track(rng.integers(0, h - sh + 1), vy, h - sh, m)
        xs, vxs = bounce_track(rng.integers(0, w - sw + 1), vx, w - sw, m)
        for t in range(m):
            patch = frames[t, ys[t] : ys[t] + sh, xs[t] : xs[t] + sw]
            np.maximum(patch, intensity * mask, out=patch)
        tracks.append({"y": ys, "x": xs, "vy": vys, "vx": vxs, "mask": mask, "intensity": intensity})
    video = frames.reshape(m, h * w).T.copy()
    return (video, tracks) if return_tracks else video


def _resize(image, size):
    from scipy.ndimage import zoom

    factors = (size[0] / image.shape[0], size[1] / image.shape[1])
    return zoom(image.astype(np.float64), factors, order=1)


def gen_moving_mnist(digits, h, w, m, seed, digit_size=None, return_tracks=False):
    """Two random digits, shrunk to ``digit_size`` (default ``28*h/64``, the
    64->``h`` resize of classic moving MNIST), bouncing and max-composited."""
    digits = np.asarray(digits)
    if digits.ndim != 3 or len(digits) == 0:
        raise ShapeError("need a non-empty (K, rows, cols) digit collection")
    rng = _rng(seed)
    if digit_size is None:
        digit_size = (max(1, round(digits.shape[1] * h / 64)), max(1, round(digits.shape[2] * w / 64)))
    ds_h, ds_w = min(digit_size[0], h), min(digit_size[1], w)
    frames = np.zeros((m, h, w))
    tracks = []
    for _ in range(2):
        img = digits[int(rng.integers(len(digits)))].astype(np.float64)
        if img.max() > 1.0:
            img = img / 255.0
        img = np.clip(_resize(img, (ds_h, ds_w)), 0.0, 1.0)
        vy, vx = 0, 0
        while vy == 0 and vx == 0:
            vy, vx = (int(v) for v in rng.integers(-3, 4, size=2))
        ys, vys = bounce_track(rng.integers(0, h - ds_h + 1), vy, h - ds_h, m)
        xs, vxs = bounce_track(rng.integers(0, w - ds_w + 1), vx, w - ds_w, m)
        for t in range(m):
            patch = frames[t, ys[t] : ys[t] + ds_h, xs[t] : xs[t] + ds_w]
            np.maximum(patch, img, out=patch)
        tracks.append({"y": ys, "x": xs, "vy": vys, "vx": vxs})
    video = frames.reshape(m, h * w).T.copy()
    return (video, tracks) if return_tracks else video


def compose_sample(S_fg, L_bg, h=None, w=None):
    """Normalize ``L_bg + S_fg`` to ``[0, 1]`` with one shared affine map.

    The background absorbs the offset (its rank grows by at most one) and
    ``M`` is formed as ``L + S`` after scaling so the sum is exact.
    """
    S_fg = S_fg.data if isinstance(S_fg, VideoMatrix) else np.asarray(S_fg, dtype=np.float64)
    if isinstance(L_bg, VideoMatrix):
        h, w = L_bg.h, L_bg.w
        L_bg = L_bg.data
    L_bg = np.asarray(L_bg, dtype=np.float64)
    if S_fg.shape != L_bg.shape:
        raise ShapeError(f"foreground {S_fg.shape} and background {L_bg.shape} differ")
    if h is None:
        h, w = S_fg.shape[0], 1
    raw = L_bg + S_fg
    offset = float(raw.min())
    scale = max(float(raw.max()) - offset, SCALE_GUARD)
    L = (L_bg - offset) / scale
    S = S_fg / scale
    M = L + S
    return DataSample(VideoMatrix(M, h, w), VideoMatrix(L, h, w), VideoMatrix(S, h, w), scale, offset)


def sample_seed(master, split, index):
    """Seed sequence of one sample; the split id keeps splits disjoint."""
    return np.random.SeedSequence([int(master), SPLITS.index(split), int(index)])


def generate_sample(config, split, index, digits=None):
    bg_seq, fg_seq = sample_seed(config.seed, split, index).spawn(2)
    n = config.h * config.w
    L_bg = gen_low_rank_background(n, config.m, config.r, np.random.default_rng(bg_seq))
    fg_rng = np.random.default_rng(fg_seq)
    if config.source == "mnist":
        if digits is None:
            raise ParameterError("mnist source needs a digit collection")
        S_fg = gen_moving_mnist(digits, config.h, config.w, config.m, fg_rng)
    else:
        S_fg = gen_moving_sprites(config.h, config.w, config.m, fg_rng)
    return compose_sample(S_fg, L_bg, config.h, config.w)


def generate_dataset(config, digits=None):
    """Build all three splits; returns ``{"train": VideoDataset, ...}``."""
    if config.source == "mnist" and digits is None:
        if not config.mnist_images or not config.mnist_labels:
            raise ParameterError("mnist source requires IDX image and label paths")
        digits, _ = ingest_mnist_idx(config.mnist_images, config.mnist_labels)
    return {
        split: VideoDataset.from_samples(
            [generate_sample(config, split, i, digits) for i in range(count)], config.h, config.w
        )
        for split, count in config.counts.items()
    }


def sample_hash(sample):
    """SHA-256 over the float64 bytes of ``M``, ``L`` and ``S``."""
    digest = hashlib.sha256()
    for part in (sample.M, sample.L, sample.S):
        digest.update(np.ascontiguousarray(part.data, dtype="<f8").tobytes())
    return digest.hexdigest()


def save_dataset(path, splits, config):
    header = {
        "format": "refrpca-dataset",
        "geometry": {"h": config.h, "w": config.w, "m": config.m},
        "r": config.r,
        "seed": config.seed,
        "source": config.source,
        "normalization": "per-sequence",
        "counts": {name: len(ds) for name, ds in splits.items()},
    }
    tensors = {}
    for name, ds in splits.items():
        tensors[f"{name}.M"] = ds.M
        tensors[f"{name}.L"] = ds.L
        tensors[f"{name}.S"] = ds.S
        tensors[f"{name}.scale"] = ds.scales
        tensors[f"{name}.offset"] = ds.offsets
    urpc.save_container(path, header, tensors)


def load_dataset(path):
    """Inverse of :func:`save_dataset`; returns ``(splits, manifest)``."""
    header, tensors = urpc.load_container(path)
    if header.get("format") != "refrpca-dataset":
        raise FormatError(f"{path} is not a dataset container")
    geo = header["geometry"]
    h, w, m = geo["h"], geo["w"], geo["m"]
    splits = {}
    for name, count in header["counts"].items():
        try:
            parts = [tensors[f"{name}.{key}"] for key in ("M", "L", "S", "scale", "offset")]
        except KeyError as exc:
            raise FormatError(f"dataset {path} lacks tensor {exc}") from exc
        M, L, S, scales, offsets = parts
        if count == 0:
            M = L = S = np.zeros((0, h * w, m))
        for arr in (M, L, S):
            if arr.shape != (count, h * w, m):
                raise FormatError(f"{name}: tensor shape {arr.shape} does not match manifest ({count}, {h * w}, {m})")
        if scales.shape != (count,) or offsets.shape != (count,):
            raise FormatError(f"{name}: scale/offset count does not match manifest count {count}")
        splits[name] = VideoDataset(M, L, S, scales, offsets, h, w)
    return splits, header


def _read_bytes(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def read_idx(path, expected_magic):
    """Parse a big-endian IDX file of unsigned bytes."""
    data = _read_bytes(path)
    if len(data) < 4:
        raise IdxTruncatedError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise IdxMagicError(expected_magic, magic, path)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxTruncatedError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(data) < header + count:
        raise IdxTruncatedError(f"{path}: payload has {len(data) - header} bytes, header promises {count}")
    if len(data) > header + count:
        raise IdxError(f"{path}: {len(data) - header - count} trailing bytes after payload")
    return np.frombuffer(data, dtype=np.uint8, offset=header, count=count).reshape(dims).copy()


def ingest_mnist_idx(images_path, labels_path):
    """Return ``(images (N, rows, cols) uint8, labels (N,) uint8)``."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise IdxCountError(f"{len(images)} images but {len(labels)} labels")
    return images, labels


def write_idx(path, array):
    """Write a uint8 array as IDX (magic 0x0803 for 3-D, 0x0801 for 1-D)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())
