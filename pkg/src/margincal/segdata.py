"""Mask I/O (binary PGM), synthetic imbalanced datasets, and label statistics.

Masks are stored as binary PGM (magic ``P5``, maxval 255) with the pixel byte
equal to the class index and 255 reserved for "ignore".  The synthetic
generator paints one disk per foreground class on a background canvas, sized
so the expected per-class pixel fractions match the requested ratios.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, FormatError, StatsError

IGNORE_INDEX = 255
FEATURE_DIM = 8


@dataclass
class MaskBatch:
    """Dense integer class labels for a stack of equally sized images.

    ``labels`` is flat (row-major, image-major) with one entry per pixel.
    """

    labels: np.ndarray
    width: int
    height: int
    n_images: int
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 1 or not np.issubdtype(self.labels.dtype, np.integer):
            raise DataError("labels must be a flat integer array")
        expected = self.n_images * self.width * self.height
        if self.labels.size != expected:
            raise DataError(
                f"labels length {self.labels.size} != n_images*width*height = {expected}"
            )

    @property
    def pixels_per_image(self) -> int:
        return self.width * self.height

    @property
    def n_pixels(self) -> int:
        return self.labels.size

    def image(self, index: int) -> np.ndarray:
        """Return image ``index`` as a (height, width) array."""
        ppi = self.pixels_per_image
        return self.labels[index * ppi : (index + 1) * ppi].reshape(self.height, self.width)

    def valid_mask(self) -> np.ndarray:
        return self.labels != self.ignore_index


@dataclass
class FeatureBatch:
    """Per-pixel real feature vectors, aligned with a MaskBatch's flat order."""

    features: np.ndarray
    d: int = FEATURE_DIM

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[1] != self.d:
            raise DataError(f"features must have shape (n_pixels, {self.d})")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features contain non-finite values")

    @property
    def n_pixels(self) -> int:
        return self.features.shape[0]


@dataclass
class LabelStats:
    """Exact per-class pixel counts and empirical frequencies over a dataset."""

    n_total: int
    n_per_class: np.ndarray
    p_per_class: np.ndarray
    k_classes: int

    def __post_init__(self) -> None:
        self.n_per_class = np.asarray(self.n_per_class, dtype=np.int64)
        self.p_per_class = np.asarray(self.p_per_class, dtype=np.float64)
        if self.n_per_class.shape != (self.k_classes,):
            raise StatsError("n_per_class must have one entry per class")
        if int(self.n_per_class.sum()) != self.n_total:
            raise StatsError("per-class counts do not sum to the total pixel count")
        if abs(float(self.p_per_class.sum()) - 1.0) > 1e-12:
            raise StatsError("per-class frequencies must sum to 1")

    @classmethod
    def from_counts(cls, counts: Sequence[int]) -> "LabelStats":
        counts = np.asarray(counts, dtype=np.int64)
        total = int(counts.sum())
        if total <= 0:
            raise StatsError("empty effective dataset (no counted pixels)")
        return cls(
            n_total=total,
            n_per_class=counts,
            p_per_class=counts / total,
            k_classes=counts.size,
        )


@dataclass
class SynthConfig:
    """Configuration for the seeded disk-scene generator."""

    seed: int
    width: int = 64
    height: int = 64
    n_images: int = 100
    k_classes: int = 3
    target_ratios: tuple = (0.90, 0.07, 0.03)
    noise_sigma: float = 0.1

    def __post_init__(self) -> None:
        if self.k_classes < 2:
            raise ConfigError("need at least 2 classes (background + 1 foreground)")
        ratios = np.asarray(self.target_ratios, dtype=np.float64)
        if ratios.size != self.k_classes:
            raise ConfigError("target_ratios must have one entry per class")
        if np.any(ratios <= 0):
            raise ConfigError("target_ratios must all be positive")
        if abs(float(ratios.sum()) - 1.0) > 1e-9:
            raise ConfigError("target_ratios must sum to 1")
        if self.width < 2 or self.height < 2 or self.n_images < 1:
            raise ConfigError("width, height and n_images must be positive")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")


# ---------------------------------------------------------------------------
# PGM I/O
# ---------------------------------------------------------------------------


def _parse_pgm_header(raw: bytes) -> tuple[int, int, int, int]:
    """Parse a binary PGM header, returning (width, height, maxval, payload offset)."""
    pos = 2
    values: list[int] = []
    while len(values) < 3:
        # skip whitespace and '#' comments between header tokens
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        token = raw[start:pos]
        if not token or not token.isdigit():
            field_name = ("width", "height", "maxval")[len(values)]
            raise FormatError(f"malformed PGM header: bad {field_name} token {token!r}")
        values.append(int(token))
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise FormatError("malformed PGM header: missing separator before payload")
    return values[0], values[1], values[2], pos + 1


def read_mask_pgm(path) -> MaskBatch:
    """Read a single-image mask from a binary PGM (P5, maxval 255) file."""
    raw = Path(path).read_bytes()
    magic = raw[:2]
    if magic == b"P2":
        raise FormatError("ASCII PGM unsupported (magic P2); expected binary P5")
    if magic != b"P5":
        raise FormatError(f"not a binary PGM: magic {magic!r}, expected b'P5'")
    width, height, maxval, offset = _parse_pgm_header(raw)
    if width < 1 or height < 1:
        raise FormatError(f"malformed PGM header: size {width}x{height}")
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}; class masks require 255")
    payload = raw[offset:]
    expected = width * height
    if len(payload) < expected:
        raise FormatError(
            f"truncated payload: got {len(payload)} bytes, expected {expected}"
        )
    if len(payload) > expected:
        raise FormatError(
            f"trailing bytes after payload: got {len(payload)}, expected {expected}"
        )
    labels = np.frombuffer(payload, dtype=np.uint8).copy()
    return MaskBatch(labels=labels, width=width, height=height, n_images=1)


def write_mask_pgm(mask: MaskBatch, path) -> None:
    """Write a single-image MaskBatch as binary PGM (P5, maxval 255)."""
    if mask.n_images != 1:
        raise DataError(f"PGM holds one image; mask has {mask.n_images}")
    labels = mask.labels
    if labels.size and (int(labels.min()) < 0 or int(labels.max()) > 255):
        raise DataError(
            f"labels outside [0, 255] cannot be stored in a PGM byte "
            f"(found {int(labels.max() if labels.max() > 255 else labels.min())})"
        )
    header = f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + labels.astype(np.uint8).tobytes())


def write_image_pgm(values: np.ndarray, width: int, height: int, path) -> None:
    """Quantize a flat [0, 1]-ish greyscale array to bytes and write as P5."""
    arr = np.asarray(values, dtype=np.float64).reshape(height, width)
    quantized = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + quantized.tobytes())


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------


def _disk_radii(cfg: SynthConfig) -> np.ndarray:
    """Radius per foreground class so the expected pixel fraction matches its target."""
    ratios = np.asarray(cfg.target_ratios, dtype=np.float64)
    area = cfg.width * cfg.height
    radii = np.sqrt(ratios[1:] * area / math.pi)
    max_r = (min(cfg.width, cfg.height) - 1) / 2.0
    for k, r in enumerate(radii, start=1):
        if r > max_r:
            raise ConfigError(
                f"target ratio {ratios[k]:.4g} for class {k} needs a disk of radius "
                f"{r:.2f} that cannot fit a {cfg.width}x{cfg.height} image"
            )
    return radii


def generate_synthetic(cfg: SynthConfig) -> tuple[FeatureBatch, MaskBatch]:
    """Generate a seeded disk-scene dataset: features and masks for all images.

    Each image is background (class 0) with one disk per foreground class,
    painted in class order (later classes overwrite earlier ones on overlap).
    Per-pixel features: x/w, y/h, intensity, xy/(wh), (x/w)^2, (y/h)^2,
    normalized distance to image center, and a constant 1.  Intensity is the
    class-specific mean 0.2 + 0.6*k/(K-1) plus Gaussian noise.
    """
    radii = _disk_radii(cfg)
    rng = np.random.default_rng(cfg.seed)
    w, h, k_cls = cfg.width, cfg.height, cfg.k_classes
    ppi = w * h

    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    cx0, cy0 = (w - 1) / 2.0, (h - 1) / 2.0
    r_center = np.sqrt((xs - cx0) ** 2 + (ys - cy0) ** 2)
    r_center /= math.sqrt(cx0**2 + cy0**2)

    coord = np.stack(
        [
            xs / w,
            ys / h,
            np.zeros_like(xs),  # intensity slot, filled per image
            xs * ys / (w * h),
            (xs / w) ** 2,
            (ys / h) ** 2,
            r_center,
            np.ones_like(xs),
        ],
        axis=-1,
    ).reshape(ppi, FEATURE_DIM)

    means = 0.2 + 0.6 * np.arange(k_cls, dtype=np.float64) / (k_cls - 1)

    labels = np.zeros(cfg.n_images * ppi, dtype=np.uint8)
    features = np.tile(coord, (cfg.n_images, 1))
    for i in range(cfg.n_images):
        img = np.zeros((h, w), dtype=np.uint8)
        for k in range(1, k_cls):
            r = radii[k - 1]
            cx = rng.uniform(r, (w - 1) - r)
            cy = rng.uniform(r, (h - 1) - r)
            img[(xs - cx) ** 2 + (ys - cy) ** 2 <= r * r] = k
        noise = rng.normal(size=ppi)
        flat = img.reshape(ppi)
        labels[i * ppi : (i + 1) * ppi] = flat
        features[i * ppi : (i + 1) * ppi, 2] = means[flat] + cfg.noise_sigma * noise

    mask = MaskBatch(labels=labels, width=w, height=h, n_images=cfg.n_images)
    return FeatureBatch(features=features), mask


# ---------------------------------------------------------------------------
# Label statistics
# ---------------------------------------------------------------------------


def accumulate_stats(masks, k_classes: int) -> LabelStats:
    """Count per-class pixels over one or more MaskBatches, skipping ignore pixels."""
    if isinstance(masks, MaskBatch):
        masks = [masks]
    counts = np.zeros(k_classes, dtype=np.int64)
    image_base = 0
    for batch in masks:
        valid = batch.valid_mask()
        bad = valid & (batch.labels >= k_classes)
        if np.any(bad):
            offset = int(np.flatnonzero(bad)[0])
            ppi = batch.pixels_per_image
            raise DataError(
                f"label {int(batch.labels[offset])} >= k_classes={k_classes} at "
                f"image {image_base + offset // ppi}, pixel {offset % ppi}"
            )
        counts += np.bincount(batch.labels[valid].astype(np.int64), minlength=k_classes)
        image_base += batch.n_images
    if counts.sum() == 0:
        raise StatsError("empty effective dataset: every pixel carries the ignore index")
    return LabelStats.from_counts(counts)


STATS_CSV_HEADER = ["class_index", "n_pixels", "p_k"]


def write_stats_csv(stats: LabelStats, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(STATS_CSV_HEADER)
        for k in range(stats.k_classes):
            writer.writerow(
                [k, int(stats.n_per_class[k]), f"{stats.p_per_class[k]:.12g}"]
            )


def read_stats_csv(path) -> LabelStats:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != STATS_CSV_HEADER:
        raise FormatError(f"stats CSV header mismatch: {rows[0] if rows else 'empty'}")
    counts = []
    file_p = []
    for row in rows[1:]:
        if len(row) != 3:
            raise FormatError(f"stats CSV row has {len(row)} fields, expected 3")
        if int(row[0]) != len(counts):
            raise FormatError(f"stats CSV class indices out of order at {row[0]}")
        counts.append(int(row[1]))
        file_p.append(float(row[2]))
    stats = LabelStats.from_counts(counts)
    # frequencies are recomputed exactly from counts; the file copy must agree
    if np.max(np.abs(np.asarray(file_p) - stats.p_per_class)) > 1e-9:
        raise FormatError("stats CSV p_k column inconsistent with counts")
    return stats
