"""Datasets: CIFAR-10 binary batches, procedural synthetic images, cutout.

The synthetic generator draws class-conditional sinusoidal gratings (one
frequency/orientation pair per class, phase-shifted across channels) plus
seeded Gaussian noise, then standardizes with train-set statistics.  It
exists so search and oracle runs have a cheap, learnable, fully
deterministic benchmark.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465], dtype=np.float32)
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616], dtype=np.float32)

RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes, channel-planar
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]

__all__ = [
    "Dataset", "SyntheticSpec", "load_cifar10", "parse_cifar_file",
    "encode_record", "generate_synthetic", "cutout", "cutout_batch",
    "CIFAR_MEAN", "CIFAR_STD",
]


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32
    labels: np.ndarray  # [N] int64
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"{len(self.images)} images vs {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0
                                 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")

    def __len__(self):
        return len(self.images)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


# --------------------------------------------------------------------------
# CIFAR-10 binary format
# --------------------------------------------------------------------------

def parse_cifar_file(path) -> Tuple[np.ndarray, np.ndarray]:
    """One binary batch -> (labels [N] uint8, images [N,3,32,32] uint8)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) == 0 or len(blob) % RECORD_BYTES != 0:
        full = len(blob) // RECORD_BYTES
        raise ValueError(
            f"{path}: size {len(blob)} is not a multiple of {RECORD_BYTES}; "
            f"record {full} truncated at byte {full * RECORD_BYTES}")
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = raw[:, 0]
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise ValueError(
            f"{path}: label {int(labels[bad])} at record {bad} "
            f"(byte {bad * RECORD_BYTES}) outside [0, 9]")
    images = raw[:, 1:].reshape(-1, 3, 32, 32)
    return labels, images


def encode_record(label: int, image_u8: np.ndarray) -> bytes:
    """Inverse of one parsed record; used by the format round-trip tests."""
    if image_u8.shape != (3, 32, 32) or image_u8.dtype != np.uint8:
        raise ValueError("expected uint8 image of shape (3, 32, 32)")
    return bytes([label]) + image_u8.tobytes()


def _normalize_cifar(images_u8: np.ndarray) -> np.ndarray:
    x = images_u8.astype(np.float32) / 255.0
    return (x - CIFAR_MEAN[None, :, None, None]) / CIFAR_STD[None, :, None, None]


def load_cifar10(data_dir) -> Tuple[Dataset, Dataset]:
    """Parse the standard binary batches into normalized train/test sets."""
    def load_files(names):
        labels, images = [], []
        for name in names:
            path = os.path.join(data_dir, name)
            if not os.path.exists(path):
                raise FileNotFoundError(f"missing CIFAR-10 batch file {path}")
            lb, im = parse_cifar_file(path)
            labels.append(lb)
            images.append(im)
        lb = np.concatenate(labels).astype(np.int64)
        im = _normalize_cifar(np.concatenate(images))
        return Dataset(im, lb, 10)

    return load_files(CIFAR_TRAIN_FILES), load_files(CIFAR_TEST_FILES)


# --------------------------------------------------------------------------
# synthetic gratings
# --------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    classes: int = 10
    image_size: int = 16
    channels: int = 3
    train_per_class: int = 200
    test_per_class: int = 50
    noise: float = 0.1
    seed: int = 0


def _class_template(spec: SyntheticSpec, c: int) -> np.ndarray:
    h = spec.image_size
    freq = 1.0 + (c % 5)
    angle = np.pi * c / max(spec.classes, 1)
    ii, jj = np.meshgrid(np.arange(h), np.arange(h), indexing="ij")
    u = (ii * np.cos(angle) + jj * np.sin(angle)) / h
    chans = [np.sin(2.0 * np.pi * (freq * u + ch / 3.0))
             for ch in range(spec.channels)]
    return np.stack(chans).astype(np.float32)


def generate_synthetic(spec: SyntheticSpec) -> Tuple[Dataset, Dataset]:
    rng = np.random.Generator(np.random.Philox(spec.seed))
    templates = [_class_template(spec, c) for c in range(spec.classes)]

    def draw(per_class):
        images, labels = [], []
        for c, tpl in enumerate(templates):
            noise = rng.standard_normal((per_class,) + tpl.shape).astype(np.float32)
            images.append(tpl[None] + spec.noise * noise)
            labels.append(np.full(per_class, c, dtype=np.int64))
        order = rng.permutation(per_class * spec.classes)
        return np.concatenate(images)[order], np.concatenate(labels)[order]

    train_x, train_y = draw(spec.train_per_class)
    test_x, test_y = draw(spec.test_per_class)
    mu = train_x.mean()
    sd = train_x.std()
    if sd == 0:
        sd = 1.0
    train_x = (train_x - mu) / sd
    test_x = (test_x - mu) / sd
    return (Dataset(train_x, train_y, spec.classes),
            Dataset(test_x, test_y, spec.classes))


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------

def cutout(image: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Zero a size x size square at a random center, clipped at the borders."""
    c, h, w = image.shape
    if not 0 < size <= min(h, w):
        raise ValueError(f"cutout size {size} invalid for {h}x{w} image")
    cy = int(rng.integers(0, h))
    cx = int(rng.integers(0, w))
    y0, y1 = max(cy - size // 2, 0), min(cy + (size + 1) // 2, h)
    x0, x1 = max(cx - size // 2, 0), min(cx + (size + 1) // 2, w)
    out = image.copy()
    out[:, y0:y1, x0:x1] = 0.0
    return out


def cutout_batch(images: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    return np.stack([cutout(im, size, rng) for im in images])
