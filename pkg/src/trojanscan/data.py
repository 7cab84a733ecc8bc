"""Labeled image sets: synthetic generation, file formats, splitting.

Images are float32 arrays shaped (N, H, W, 3) with values in [0, 1];
labels are integers in [0, classes). The on-disk raster format ("sts-raw",
magic STSD) stores 8-bit pixels, so anything that came off disk or out of
the synthetic generator round-trips bit-identically.
"""

import colorsys
import hashlib
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError

STSD_MAGIC = b"STSD"
STSD_VERSION = 1
_HEADER = struct.Struct("<4sHIHHHH")  # magic, version, N, H, W, channels, classes


@dataclass
class LabeledImageSet:
    images: np.ndarray  # (N, H, W, 3) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    classes: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        self.validate()

    def validate(self):
        if self.images.ndim != 4 or self.images.shape[3] != 3:
            raise FormatError(f"images must be (N, H, W, 3), got {self.images.shape}")
        if len(self.images) < 1:
            raise FormatError("empty image set")
        if self.labels.shape != (len(self.images),):
            raise FormatError("labels length does not match images")
        if self.classes < 2:
            raise FormatError(f"need at least 2 classes, got {self.classes}")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise FormatError(f"labels outside [0, {self.classes})")
        lo, hi = float(self.images.min()), float(self.images.max())
        if lo < 0.0 or hi > 1.0:
            raise FormatError(f"pixel values outside [0, 1]: [{lo}, {hi}]")

    def __len__(self):
        return len(self.images)

    @property
    def height(self):
        return self.images.shape[1]

    @property
    def width(self):
        return self.images.shape[2]

    def subset(self, idx):
        return LabeledImageSet(self.images[idx].copy(), self.labels[idx].copy(), self.classes)

    def content_hash(self):
        h = hashlib.sha256()
        h.update(str(self.images.shape).encode())
        h.update(np.int64(self.classes).tobytes())
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()


def split_set(ds, ratio, seed):
    """Disjoint split by shuffled index: first part gets round(ratio * N)."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must be in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ds))
    cut = int(round(ratio * len(ds)))
    if cut < 1 or cut >= len(ds):
        raise ConfigError(f"split ratio {ratio} leaves an empty part for N={len(ds)}")
    return ds.subset(perm[:cut]), ds.subset(perm[cut:])


# -- synthetic colored-shape classes ----------------------------------------

_N_SHAPES = 6


def _class_color(label, classes):
    r, g, b = colorsys.hsv_to_rgb(label / classes, 0.85, 0.95)
    return np.array([r, g, b]) * 255.0


def _shape_mask(kind, hw, cx, cy, r):
    yy, xx = np.mgrid[0:hw, 0:hw]
    dx, dy = xx - cx, yy - cy
    if kind == 0:  # square
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if kind == 1:  # disc
        return dx * dx + dy * dy <= r * r
    if kind == 2:  # diamond
        return np.abs(dx) + np.abs(dy) <= r
    if kind == 3:  # ring
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (r * 0.5) ** 2)
    if kind == 4:  # cross
        return ((np.abs(dx) <= r * 0.35) | (np.abs(dy) <= r * 0.35)) & (np.abs(dx) <= r) & (np.abs(dy) <= r)
    # triangle (upward)
    return (dy <= r) & (dy >= -r) & (np.abs(dx) <= (r - dy) * 0.6)


def synthetic_dataset(n, classes, seed, hw=32):
    """Seeded colored-shape classifier data: one (hue, shape) pair per class.

    Shapes get position and size jitter plus pixel noise so the task is not
    linearly trivial, but a small CNN separates it quickly.
    """
    if classes < 2 or classes > 256:
        raise ConfigError(f"classes must be in [2, 256], got {classes}")
    if n < classes:
        raise ConfigError(f"need at least one image per class ({n} < {classes})")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    images = np.empty((n, hw, hw, 3), dtype=np.uint8)
    colors = [_class_color(c, classes) for c in range(classes)]
    jitter = max(2, hw // 8)
    for i in range(n):
        lab = int(labels[i])
        bg = rng.integers(0, 55, size=(hw, hw, 3))
        cx = hw // 2 + int(rng.integers(-jitter, jitter + 1))
        cy = hw // 2 + int(rng.integers(-jitter, jitter + 1))
        r = int(rng.integers(hw // 5, hw // 3 + 1))
        mask = _shape_mask(lab % _N_SHAPES, hw, cx, cy, r)
        noise = rng.normal(0, 12, size=(hw, hw, 3))
        fg = np.clip(colors[lab] + noise, 0, 255)
        img = np.where(mask[..., None], fg, bg)
        images[i] = img.astype(np.uint8)
    return LabeledImageSet(images.astype(np.float32) / 255.0, labels, classes)


# -- sts-raw (STSD) ----------------------------------------------------------


def save_sts_raw(ds, path):
    """Write the STSD container; pixels are quantized to 8 bit."""
    n, h, w, _ = ds.images.shape
    if ds.labels.max() >= 2**16:
        raise FormatError("labels exceed u16 range")
    rec = np.dtype([("label", "<u2"), ("pix", "u1", (h * w * 3,))])
    out = np.empty(n, dtype=rec)
    out["label"] = ds.labels.astype("<u2")
    out["pix"] = np.round(ds.images * 255.0).astype(np.uint8).reshape(n, -1)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(STSD_MAGIC, STSD_VERSION, n, h, w, 3, ds.classes))
        f.write(out.tobytes())


def load_sts_raw(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n, h, w, channels, classes = _HEADER.unpack_from(raw)
    if magic != STSD_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != STSD_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if channels != 3:
        raise FormatError(f"{path}: expected 3 channels, got {channels}")
    rec = np.dtype([("label", "<u2"), ("pix", "u1", (h * w * 3,))])
    expected = _HEADER.size + n * rec.itemsize
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    body = np.frombuffer(raw, dtype=rec, offset=_HEADER.size)
    labels = body["label"].astype(np.int64)
    if n and labels.max() >= classes:
        raise FormatError(f"{path}: label {labels.max()} >= class count {classes}")
    images = body["pix"].reshape(n, h, w, 3).astype(np.float32) / 255.0
    return LabeledImageSet(images, labels, classes)


# -- CIFAR-10 binary batches --------------------------------------------------

_CIFAR_RECORD = 3073  # 1 label byte + 3 * 1024 pixel bytes (R, G, B planes)


def load_cifar10_binary(paths, classes=10):
    """Parse one or more CIFAR-10 binary batch files (concatenated records)."""
    if isinstance(paths, (str, bytes)) or hasattr(paths, "__fspath__"):
        paths = [paths]
    chunks = []
    for path in paths:
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) == 0 or len(raw) % _CIFAR_RECORD != 0:
            raise FormatError(f"{path}: size {len(raw)} is not a multiple of {_CIFAR_RECORD}")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, _CIFAR_RECORD))
    recs = np.concatenate(chunks)
    labels = recs[:, 0].astype(np.int64)
    if labels.max() >= classes:
        raise FormatError(f"label {labels.max()} >= class count {classes}")
    images = recs[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return LabeledImageSet(images.astype(np.float32) / 255.0, labels, classes)
