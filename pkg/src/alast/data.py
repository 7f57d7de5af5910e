"""Datasets: IDX (MNIST-style) files and a seeded synthetic grating generator."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ConsistencyError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # count × C × H × W, float64 in [0, 1]
    labels: np.ndarray  # int64
    split: np.ndarray  # "train" / "eval" per item

    def __post_init__(self):
        if not (len(self.images) == len(self.labels) == len(self.split)):
            raise ConsistencyError("images, labels and split tags differ in length")

    def __len__(self):
        return len(self.labels)

    def subset(self, split):
        mask = self.split == split
        return Dataset(self.images[mask], self.labels[mask], self.split[mask])


def _read(path):
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw, magic, ndim, path):
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header")
    (found,) = struct.unpack_from(">I", raw, 0)
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for dims {dims}, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(path_images, path_labels, split="train"):
    """Read an IDX image/label pair (optionally gzipped). Pixels are scaled to [0, 1]."""
    pixels = _parse_idx(_read(path_images), IDX_IMAGES_MAGIC, 3, path_images)
    labels = _parse_idx(_read(path_labels), IDX_LABELS_MAGIC, 1, path_labels)
    if len(pixels) != len(labels):
        raise ConsistencyError(f"{len(pixels)} images but {len(labels)} labels")
    images = pixels[:, None, :, :].astype(np.float64) / 255.0
    return Dataset(images, labels.astype(np.int64), np.full(len(labels), split))


def write_idx(path_images, path_labels, pixels, labels):
    """Write uint8 pixels (count × rows × cols) and labels as an IDX pair."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path_images, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *pixels.shape))
        fh.write(pixels.tobytes())
    with open(path_labels, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def synth_dataset(num_classes, samples_per_class, height, width, seed,
                  eval_per_class=0, channels=1, noise=0.1):
    """Oriented sinusoidal gratings, one orientation/frequency pair per class.

    Phase is drawn from [0, π/2) so the class means stay distinct, and
    orientation gets a little jitter. Items are grouped by class: first the
    training items of every class, then the evaluation ones.
    """
    if num_classes < 2:
        raise ConfigError("data.num_classes", "need at least 2 classes")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(height) / height, np.arange(width) / width, indexing="ij")
    images, labels, split = [], [], []
    for tag, per_class in (("train", samples_per_class), ("eval", eval_per_class)):
        for c in range(num_classes):
            theta = np.pi * c / num_classes + rng.normal(0.0, 0.08, per_class)
            freq = 2.0 + (c % 3)
            phase = rng.uniform(0.0, np.pi / 2, per_class)
            proj = (xx[None] * np.cos(theta)[:, None, None]
                    + yy[None] * np.sin(theta)[:, None, None])
            wave = 0.5 + 0.3 * np.cos(2 * np.pi * freq * proj + phase[:, None, None])
            img = wave[:, None] + rng.normal(0.0, noise, (per_class, channels, height, width))
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(np.full(per_class, c, dtype=np.int64))
            split.append(np.full(per_class, tag))
    return Dataset(np.concatenate(images), np.concatenate(labels), np.concatenate(split))
