"""Dataset ingestion: synthetic Gaussian-blob images and on-disk formats.

Every loader returns float32 images shaped ``(n, C, H, W)`` scaled to [0, 1]
and int64 labels.
"""

from __future__ import annotations

import csv
import pickle
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class BlobDataset:
    train: tuple[np.ndarray, np.ndarray]
    test: tuple[np.ndarray, np.ndarray]
    ood: np.ndarray
    n_classes: int


def _prototypes(n_protos, size, bumps, rng):
    margin = 2.5
    centers = rng.uniform(margin, size - 1 - margin, (n_protos, bumps, 2))
    widths = rng.uniform(1.2, 2.5, (n_protos, bumps))
    amps = rng.uniform(0.5, 1.0, (n_protos, bumps))
    return centers, widths, amps


def _render(centers, widths, amps, size):
    # centers (n, b, 2), widths/amps (n, b) -> (n, size, size)
    grid = np.arange(size, dtype=np.float64)
    dy = grid[None, None, :, None] - centers[:, :, 0, None, None]
    dx = grid[None, None, None, :] - centers[:, :, 1, None, None]
    bumps = amps[..., None, None] * np.exp(-(dx ** 2 + dy ** 2) / (2 * widths[..., None, None] ** 2))
    return bumps.sum(1)


def _sample(proto, idx, size, jitter, noise, rng):
    centers, widths, amps = (a[idx] for a in proto)
    centers = centers + rng.normal(0.0, jitter, centers.shape)
    widths = widths * rng.uniform(0.85, 1.15, widths.shape)
    amps = amps * rng.uniform(0.7, 1.3, amps.shape)
    img = _render(centers, widths, amps, size) + rng.normal(0.0, noise, (len(idx), size, size))
    return np.clip(img, 0.0, 1.0).astype(np.float32)[:, None]


def make_blobs(n_classes: int = 8, per_class: int = 500, size: int = 16, *,
               test_per_class: int = 200, holdout_classes: int = 1, ood_count: int = 1000,
               bumps: int = 3, jitter: float = 1.5, noise: float = 0.25,
               seed: int = 0) -> BlobDataset:
    """Single-channel images, each class a fixed layout of Gaussian bumps.

    Samples jitter bump positions, widths and amplitudes and add pixel noise.
    ``holdout_classes`` extra layouts are drawn from the same generator and
    returned only as the OOD set.
    """
    rng = np.random.default_rng(seed)
    proto = _prototypes(n_classes + holdout_classes, size, bumps, rng)

    def split(count):
        y = np.repeat(np.arange(n_classes), count)
        x = _sample(proto, y, size, jitter, noise, rng)
        return x, y.astype(np.int64)

    train = split(per_class)
    test = split(test_per_class)
    if holdout_classes:
        idx = n_classes + rng.integers(0, holdout_classes, ood_count)
        ood = _sample(proto, idx, size, jitter, noise, rng)
    else:
        ood = np.zeros((0, 1, size, size), dtype=np.float32)
    return BlobDataset(train, test, ood, n_classes)


def load_npz(path, x_key: str = "x", y_key: str = "y"):
    """``.npz`` archive with an image array and (optionally) labels."""
    with np.load(path) as f:
        x = np.asarray(f[x_key], dtype=np.float32)
        y = np.asarray(f[y_key], dtype=np.int64) if y_key in f else None
    if x.ndim == 3:
        x = x[:, None]
    if x.max() > 1.0:
        x = x / 255.0
    return x, y


def load_image_dir(path, label_file: str = "labels.csv"):
    """Directory of images plus a ``filename,label`` CSV (header optional)."""
    from PIL import Image

    root = Path(path)
    rows = []
    with (root / label_file).open(newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            try:
                rows.append((row[0], int(row[1]) if len(row) > 1 and row[1] != "" else -1))
            except ValueError:
                continue  # header line
    if not rows:
        raise ValueError(f"no entries in {root / label_file}")
    images = []
    for name, _ in rows:
        with Image.open(root / name) as im:
            a = np.asarray(im, dtype=np.float32) / 255.0
        images.append(a[None] if a.ndim == 2 else a.transpose(2, 0, 1))
    return np.stack(images), np.array([lab for _, lab in rows], dtype=np.int64)


def load_cifar(path, split: str = "train"):
    """CIFAR-10/100 python-pickle batches (``data_batch_*``/``test_batch`` or ``train``/``test``)."""
    root = Path(path)
    if split == "train":
        files = sorted(root.glob("data_batch_*")) or [root / "train"]
    else:
        files = [root / "test_batch"] if (root / "test_batch").exists() else [root / "test"]
    xs, ys = [], []
    for f in files:
        with open(f, "rb") as fh:
            d = pickle.load(fh, encoding="latin1")
        xs.append(np.asarray(d["data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
        ys.append(np.asarray(d.get("labels", d.get("fine_labels")), dtype=np.int64))
    return np.concatenate(xs).astype(np.float32) / 255.0, np.concatenate(ys)
