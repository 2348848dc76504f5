"""Manifests, binary PPM decoding, batching and a synthetic two-class image set.

A manifest is a CSV with header ``path,label`` whose paths are relative to
the directory holding the CSV. Labels are 0 (MSI) or 1 (MSS). Images are
binary PPM (``P6``, maxval 255), decoded to ``[3, H, W]`` floats and
standardized per channel.
"""

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import (
    DuplicatePathError,
    InvalidInputError,
    ManifestParseError,
    MissingFileError,
    PPMDimensionError,
    PPMFormatError,
    PPMTruncatedError,
)
from .tensor import DTYPE, make_rng
from .training import batch_slices

DEFAULT_MEAN = (0.5, 0.5, 0.5)
DEFAULT_STD = (0.5, 0.5, 0.5)


@dataclass
class Manifest:
    entries: list = field(default_factory=list)  # (relative path, label)
    root: Path = Path(".")

    def __len__(self):
        return len(self.entries)

    @property
    def labels(self):
        return np.array([label for _, label in self.entries], dtype=np.int64)

    def class_counts(self):
        labels = self.labels
        return int(np.sum(labels == 0)), int(np.sum(labels == 1))

    def subset(self, indices):
        return Manifest([self.entries[i] for i in indices], self.root)

    def resolve(self, rel):
        return self.root / rel


def load_manifest(csv_path, root=None):
    """Parse a ``path,label`` CSV. Row numbers in errors count the header as row 1."""
    csv_path = Path(csv_path)
    root = Path(root) if root is not None else csv_path.parent
    entries, seen = [], set()
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["path", "label"]:
            raise ManifestParseError(f"{csv_path}: header must be 'path,label', got {header}", row=1)
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ManifestParseError(f"{csv_path}: row {row_no} has {len(row)} fields, expected 2", row=row_no)
            path, label = row
            if label.strip() not in ("0", "1"):
                raise ManifestParseError(f"{csv_path}: row {row_no} has label {label!r}, expected 0 or 1", row=row_no)
            if path in seen:
                raise DuplicatePathError(f"{csv_path}: row {row_no} repeats path {path!r}")
            seen.add(path)
            entries.append((path, int(label)))
    return Manifest(entries, root)


def write_manifest(manifest, csv_path):
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("path", "label"))
        w.writerows(manifest.entries)


def split_manifest(manifest, fractions=(0.8, 0.1, 0.1), seed=0):
    """Seeded disjoint train/val/test split; test takes the rounding remainder."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidInputError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(manifest)
    order = make_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return (
        manifest.subset(sorted(order[:n_train])),
        manifest.subset(sorted(order[n_train:n_train + n_val])),
        manifest.subset(sorted(order[n_train + n_val:])),
    )


def read_ppm(path):
    """Decode a binary P6 file into an ``[H, W, 3]`` uint8 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] != b"P6":
        raise PPMFormatError(f"{path}: not a binary PPM (magic {data[:2]!r})")
    pos, tokens = 2, []
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PPMTruncatedError(f"{path}: header ends early")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise PPMFormatError(f"{path}: malformed header {tokens}") from None
    if maxval != 255:
        raise PPMFormatError(f"{path}: maxval {maxval} unsupported, expected 255")
    need = width * height * 3
    raster = data[pos:pos + need]
    if len(raster) < need:
        raise PPMTruncatedError(f"{path}: expected {need} pixel bytes, found {len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)


def write_ppm(path, pixels):
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise InvalidInputError(f"expected [H, W, 3] pixels, got {pixels.shape}")
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def normalize(pixels, mean=DEFAULT_MEAN, std=DEFAULT_STD, dtype=DTYPE):
    """``[H, W, 3]`` bytes -> ``[3, H, W]`` floats: scale to [0, 1] then standardize."""
    x = pixels.transpose(2, 0, 1).astype(dtype) / 255.0
    mean = np.asarray(mean, dtype=dtype)[:, None, None]
    std = np.asarray(std, dtype=dtype)[:, None, None]
    return (x - mean) / std


def denormalize(x, mean=DEFAULT_MEAN, std=DEFAULT_STD):
    """Inverse of :func:`normalize` back to quantized bytes."""
    x = x * np.asarray(std)[:, None, None] + np.asarray(mean)[:, None, None]
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def load_image_ppm(path, expected_hw, mean=DEFAULT_MEAN, std=DEFAULT_STD, dtype=DTYPE):
    if not os.path.exists(path):
        raise MissingFileError(f"image not found: {path}")
    pixels = read_ppm(path)
    if pixels.shape[:2] != (expected_hw, expected_hw):
        raise PPMDimensionError(
            f"{path}: image is {pixels.shape[1]}x{pixels.shape[0]}, expected {expected_hw}x{expected_hw}"
        )
    return normalize(pixels, mean, std, dtype)


class ArrayDataset(NamedTuple):
    images: np.ndarray  # [N, 3, H, W]
    labels: np.ndarray  # [N]


def load_dataset(manifest, hw, mean=DEFAULT_MEAN, std=DEFAULT_STD, dtype=DTYPE):
    """Decode every image of a manifest into memory, in manifest order."""
    if len(manifest) == 0:
        return ArrayDataset(np.zeros((0, 3, hw, hw), dtype=dtype), np.zeros(0, dtype=np.int64))
    images = np.stack([load_image_ppm(manifest.resolve(p), hw, mean, std, dtype) for p, _ in manifest.entries])
    return ArrayDataset(images, manifest.labels)


def make_batches(manifest, batch_size, seed, drop_last=False, hw=224, mean=DEFAULT_MEAN, std=DEFAULT_STD):
    """Yield ``(images [N, 3, hw, hw], labels [N])`` in a seeded random order."""
    if batch_size < 1:
        raise InvalidInputError(f"batch_size must be >= 1, got {batch_size}")
    for idx in batch_slices(len(manifest), batch_size, make_rng(seed), drop_last):
        sub = manifest.subset(idx)
        yield load_dataset(sub, hw, mean, std)


# synthetic data

CONTRAST = 0.18
NOISE_STD = 0.05


def _standardize(f):
    f = f - f.mean()
    s = f.std()
    return f / s if s > 0 else f


def _blobs(rng, hw):
    """Sum of a few broad Gaussian bumps: energy at low spatial frequency."""
    yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float64)
    f = np.zeros((hw, hw))
    for _ in range(rng.integers(3, 7)):
        cy, cx = rng.uniform(0, hw, size=2)
        sigma = rng.uniform(hw / 10, hw / 5)
        f += rng.choice((-1.0, 1.0)) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    return _standardize(f)


def _checker(rng, hw):
    """Rotated checkerboard with a 2-4 pixel period: energy at high frequency."""
    yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float64)
    period = rng.uniform(2.0, 4.0)
    theta = rng.uniform(0, np.pi)
    u = xx * np.cos(theta) + yy * np.sin(theta)
    v = -xx * np.sin(theta) + yy * np.cos(theta)
    p1, p2 = rng.uniform(0, 2 * np.pi, size=2)
    f = np.sign(np.sin(2 * np.pi * u / period + p1)) * np.sign(np.sin(2 * np.pi * v / period + p2))
    return _standardize(f)


def synthesize_image(label, hw, rng):
    """One ``[hw, hw, 3]`` uint8 image of the given class.

    Both classes share mean intensity 0.5, the same per-channel contrast
    distribution and the same noise level; only the spatial frequency
    content differs.
    """
    pattern = _blobs(rng, hw) if label == 0 else _checker(rng, hw)
    colour = rng.uniform(0.5, 1.0, size=3) * rng.choice((-1.0, 1.0), size=3)
    img = 0.5 + CONTRAST * colour[None, None, :] * pattern[:, :, None]
    img += rng.normal(0.0, NOISE_STD, size=img.shape)
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def generate_synthetic(n_per_class, hw, seed, out_dir):
    """Write ``2 * n_per_class`` PPM images plus ``manifest.csv`` under ``out_dir``."""
    if n_per_class < 1:
        raise InvalidInputError(f"n_per_class must be >= 1, got {n_per_class}")
    if hw < 16:
        raise InvalidInputError(f"image size must be >= 16, got {hw}")
    out = Path(out_dir)
    rng = make_rng(seed)
    entries = []
    for label in (0, 1):
        (out / f"class{label}").mkdir(parents=True, exist_ok=True)
        for i in range(n_per_class):
            rel = f"class{label}/img_{i:05d}.ppm"
            write_ppm(out / rel, synthesize_image(label, hw, rng))
            entries.append((rel, label))
    manifest = Manifest(entries, out)
    write_manifest(manifest, out / "manifest.csv")
    return manifest


def write_splits(manifest, out_dir, seed=0, fractions=(0.8, 0.1, 0.1)):
    """Write ``train.csv``, ``val.csv`` and ``test.csv`` next to the images."""
    parts = split_manifest(manifest, fractions, seed)
    for name, part in zip(("train", "val", "test"), parts):
        write_manifest(part, Path(out_dir) / f"{name}.csv")
    return parts
