"""Synthetic dataset generation, the binary dataset format, and image export.

Format: magic "CMAE", version u32, count u32, height u32, width u32,
channels u32, labels_present u8, then count*h*w*c pixel bytes and, when
labeled, count label bytes. All header integers little-endian.
"""

import struct
from pathlib import Path

import numpy as np

from . import seeding

DATASET_MAGIC = b"CMAE"
DATASET_VERSION = 1
NUM_CLASSES = 4
_HEADER = struct.Struct("<4sIIIIIB")


class DataError(Exception):
    """Malformed dataset file or invalid data request."""


def _paint_shape(img, kind, rng, scale):
    """Alpha-composite one anti-aliased shape. kind: 0 rectangle, 1 disc,
    2 ring, 3 diagonal stripe. scale is the half-size in units of min(h, w)."""
    h, w, _ = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    cy = rng.uniform(0.25 * h, 0.75 * h)
    cx = rng.uniform(0.25 * w, 0.75 * w)
    r = scale * min(h, w)
    color = rng.uniform(0.0, 1.0, size=3)
    if kind == 0:
        ry = r * rng.uniform(0.6, 1.0)
        rx = r * rng.uniform(0.6, 1.0)
        sdf = np.maximum(np.abs(yy - cy) - ry, np.abs(xx - cx) - rx)
    elif kind == 1:
        sdf = np.hypot(yy - cy, xx - cx) - r
    elif kind == 2:
        sdf = np.abs(np.hypot(yy - cy, xx - cx) - r) - max(1.2, 0.25 * r)
    else:
        theta = rng.uniform(0.0, np.pi)
        n = np.array([np.cos(theta), np.sin(theta)])
        t = np.array([-n[1], n[0]])
        dn = np.abs(n[0] * (yy - cy) + n[1] * (xx - cx)) - max(1.2, 0.35 * r)
        dt = np.abs(t[0] * (yy - cy) + t[1] * (xx - cx)) - 1.4 * r
        sdf = np.maximum(dn, dt)
    alpha = np.clip(0.5 - sdf, 0.0, 1.0)[:, :, None]
    img *= 1.0 - alpha
    img += alpha * color


def render_image(h, w, rng):
    """Gradient background with one large labeled shape on top of 1-4 small
    distractors. Returns (float image in [0,1], label)."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    t = (np.cos(theta) * xx / w + np.sin(theta) * yy / h + 1.0) / 2.0
    c0 = rng.uniform(0.0, 1.0, size=3)
    c1 = rng.uniform(0.0, 1.0, size=3)
    img = c0[None, None, :] + t[:, :, None] * (c1 - c0)[None, None, :]
    label = int(rng.integers(0, NUM_CLASSES))
    n_extra = int(rng.integers(1, 5))
    for _ in range(n_extra):
        _paint_shape(img, int(rng.integers(0, NUM_CLASSES)), rng, rng.uniform(0.06, 0.16))
    _paint_shape(img, label, rng, rng.uniform(0.28, 0.42))
    return np.clip(img, 0.0, 1.0), label


def quantize_u8(img):
    """Clamp to [0,1] then round half up to a byte."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def gen_synthetic(path, count, height, width, seed, labeled=False, channels=3):
    """Write a seeded synthetic dataset. Byte-identical for identical
    arguments; per-image streams are keyed by (seed, index)."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, count, height, width, channels, 1 if labeled else 0))
        labels = bytearray()
        for i in range(count):
            rng = seeding.generator(seed, seeding.DATA, i)
            img, label = render_image(height, width, rng)
            fh.write(quantize_u8(img).tobytes())
            labels.append(label)
        if labeled:
            fh.write(bytes(labels))
    return path


class Dataset:
    """In-memory dataset with seeded per-epoch shuffling and optional
    flip + fixed-scale crop augmentation."""

    def __init__(self, images, labels=None):
        self.images = images  # (count, h, w, c) uint8
        self.labels = labels  # (count,) uint8 or None

    @property
    def count(self):
        return self.images.shape[0]

    @property
    def shape(self):
        return self.images.shape[1:]

    def float_images(self, indices, dtype=np.float32):
        return self.images[indices].astype(dtype) / 255.0

    def epoch_order(self, epoch, seed):
        """Permutation of image indices, a pure function of (epoch, seed)."""
        rng = seeding.generator(seed, seeding.SHUFFLE, epoch)
        return rng.permutation(self.count)

    def augment(self, batch, indices, epoch, seed, pad=4):
        """Horizontal flip (p=0.5) and reflect-pad random crop at fixed
        scale; deterministic per (seed, epoch, image index)."""
        h, w = batch.shape[1:3]
        out = np.empty_like(batch)
        padded = np.pad(batch, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="reflect")
        for j, idx in enumerate(indices):
            rng = seeding.generator(seed, seeding.AUGMENT, epoch, int(idx))
            oy = int(rng.integers(0, 2 * pad + 1))
            ox = int(rng.integers(0, 2 * pad + 1))
            img = padded[j, oy : oy + h, ox : ox + w]
            if rng.integers(0, 2):
                img = img[:, ::-1]
            out[j] = img
        return out


def load_dataset(path):
    """Read a dataset file; pixels stay uint8 until batching maps them to
    [0,1]. Malformed files are rejected with the offending byte offset."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise DataError(f"short header: file is {len(blob)} bytes, header needs {_HEADER.size} (offset 0)")
    magic, version, count, h, w, c, labeled = _HEADER.unpack_from(blob, 0)
    if magic != DATASET_MAGIC:
        raise DataError(f"bad magic at byte 0: {magic!r}, expected {DATASET_MAGIC!r}")
    if version != DATASET_VERSION:
        raise DataError(f"unsupported version {version} at byte 4")
    need = _HEADER.size + count * h * w * c + (count if labeled else 0)
    if len(blob) != need:
        raise DataError(f"truncated payload: expected {need} bytes, file has {len(blob)} (pixels start at offset {_HEADER.size})")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=count * h * w * c, offset=_HEADER.size)
    images = pixels.reshape(count, h, w, c).copy()
    labels = None
    if labeled:
        labels = np.frombuffer(blob, dtype=np.uint8, count=count, offset=_HEADER.size + count * h * w * c).copy()
    return Dataset(images, labels)


def load_raw_dir(path, height, width, channels=3):
    """Import user-supplied images from a directory of raw files, each
    exactly h*w*c bytes, in sorted filename order."""
    path = Path(path)
    files = sorted(p for p in path.iterdir() if p.is_file())
    if not files:
        raise DataError(f"no files in raw directory {path}")
    need = height * width * channels
    images = np.empty((len(files), height, width, channels), dtype=np.uint8)
    for i, f in enumerate(files):
        raw = f.read_bytes()
        if len(raw) != need:
            raise DataError(f"{f}: expected {need} raw bytes, got {len(raw)}")
        images[i] = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, channels)
    return Dataset(images)


def write_ppm(image, path):
    """Write a [0,1] float image (h, w, 3) as binary PPM (P6, maxval 255),
    clamp-then-round quantization."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"write_ppm needs an (h, w, 3) image, got {image.shape}")
    payload = quantize_u8(image)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii"))
        fh.write(payload.tobytes())


def write_ppm_gray(values, path):
    """Grayscale matrix -> PPM by channel replication, min-max scaled."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    norm = (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)
    write_ppm(np.repeat(norm[:, :, None], 3, axis=2), path)
