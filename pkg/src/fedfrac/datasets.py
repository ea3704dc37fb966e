"""Dataset ingestion: CIFAR-10 binary batches and the seeded toy task.

The toy task assigns each class a fixed IFS code; samples are fresh
renders of that code with random placement, hue and pixel noise, so the
task is learnable from shape but nontrivial.
"""

from __future__ import annotations

import colorsys
import os
from dataclasses import dataclass

import numpy as np

from .ifs import iterate_ifs, render, sample_ifs_code
from .seeding import make_rng

CIFAR_RECORD = 3073  # 1 label byte + 3 * 1024 pixel bytes
CIFAR_PER_FILE = 10_000
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass
class LabeledDataset:
    images: np.ndarray       # (N, 3, H, W) float64
    labels: np.ndarray       # (N,) int
    n_classes: int
    channel_mean: np.ndarray
    channel_std: np.ndarray

    def __post_init__(self):
        if self.labels.size and self.labels.max() >= self.n_classes:
            raise ValueError("label exceeds class count")

    def __len__(self):
        return len(self.labels)


class DatasetFormatError(ValueError):
    pass


def _parse_cifar_file(path) -> tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size != CIFAR_PER_FILE * CIFAR_RECORD:
        good = (raw.size // CIFAR_RECORD) * CIFAR_RECORD
        raise DatasetFormatError(
            f"{path}: expected {CIFAR_PER_FILE * CIFAR_RECORD} bytes, got "
            f"{raw.size} (first bad byte at offset {good})")
    records = raw.reshape(CIFAR_PER_FILE, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DatasetFormatError(
            f"{path}: label {labels[bad]} > 9 in record {bad}")
    images = records[:, 1:].reshape(CIFAR_PER_FILE, 3, 32, 32) / 255.0
    return images, labels


def load_cifar10_binary(directory):
    """Parse the 3073-byte-record binary batches into train/test datasets.

    Pixel values are scaled to [0,1] and channel-normalized with statistics
    recorded from the training batches.
    """
    train_parts = [_parse_cifar_file(os.path.join(directory, f))
                   for f in CIFAR_TRAIN_FILES]
    test_images, test_labels = _parse_cifar_file(
        os.path.join(directory, CIFAR_TEST_FILE))
    train_images = np.concatenate([p[0] for p in train_parts])
    train_labels = np.concatenate([p[1] for p in train_parts])
    mean = train_images.mean(axis=(0, 2, 3))
    std = train_images.std(axis=(0, 2, 3))
    std = np.where(std == 0, 1.0, std)

    def normalize(imgs):
        return (imgs - mean[None, :, None, None]) / std[None, :, None, None]

    train = LabeledDataset(normalize(train_images), train_labels, 10, mean, std)
    test = LabeledDataset(normalize(test_images), test_labels, 10, mean, std)
    return train, test


@dataclass
class ToyDatasetSpec:
    n_classes: int = 4
    per_class: int = 100
    resolution: int = 16
    n_iters: int = 400
    noise: float = 0.05
    scale_range: tuple[float, float] = (0.6, 1.0)


def make_toy_dataset(spec: ToyDatasetSpec, seed: int, stream: int = 0) -> LabeledDataset:
    """Class-conditioned fractal images; fully determined by (seed, stream).

    The per-class codes depend on ``seed`` only, so train (stream 0) and
    test (stream 1) sets share classes but never samples.
    """
    codes = [sample_ifs_code(make_rng(seed, 0x70FC, c), code_id=c)
             for c in range(spec.n_classes)]
    res = spec.resolution
    images = np.zeros((spec.n_classes * spec.per_class, 3, res, res))
    labels = np.zeros(spec.n_classes * spec.per_class, dtype=np.int64)
    i = 0
    for c, code in enumerate(codes):
        for j in range(spec.per_class):
            rng = make_rng(seed, 0x70FD, stream, c, j)
            points = iterate_ifs(code, spec.n_iters, rng)
            size = max(2, round(rng.uniform(*spec.scale_range) * res))
            gray = render(points, size, size)
            color = np.array(colorsys.hsv_to_rgb(rng.uniform(), 1.0, 1.0))
            canvas = np.zeros((res, res, 3))
            y = int(rng.integers(0, res - size + 1))
            x = int(rng.integers(0, res - size + 1))
            canvas[y:y + size, x:x + size] = gray[:, :, None] * color
            canvas += rng.normal(0.0, spec.noise, size=canvas.shape)
            images[i] = np.clip(canvas, 0.0, 1.0).transpose(2, 0, 1)
            labels[i] = c
            i += 1
    return LabeledDataset(images, labels, spec.n_classes,
                          channel_mean=np.zeros(3), channel_std=np.ones(3))
