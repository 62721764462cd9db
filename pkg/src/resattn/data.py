"""Dataset ingestion: CIFAR binary batches, synthetic class-blob data
for desk-scale tests, and per-pixel statistics.

Pixels are scaled to [0,1] at load; mean subtraction is a separate
augmentation step.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .ops import _interp_matrix

CIFAR10_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILES = ("test_batch.bin",)
CIFAR100_TRAIN_FILES = ("train.bin",)
CIFAR100_TEST_FILES = ("test.bin",)

_RECORD_PIXELS = 3072  # 3 channel planes of 32*32, row-major


@dataclass
class Dataset:
    images: np.ndarray  # (N,3,H,W) float32 in [0,1]
    labels: np.ndarray  # (N,) int64 in [0, num_classes)
    num_classes: int
    split: str = "train"
    coarse_labels: np.ndarray | None = None  # CIFAR-100 only, kept for re-encoding

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be (N,C,H,W), got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise DataError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise DataError(f"labels out of range [0, {self.num_classes})")

    def __len__(self):
        return len(self.images)

    def subset(self, indices):
        return Dataset(
            self.images[indices],
            self.labels[indices],
            self.num_classes,
            self.split,
            None if self.coarse_labels is None else self.coarse_labels[indices],
        )


def _decode_records(raw, label_bytes):
    rec = label_bytes + _RECORD_PIXELS
    if len(raw) == 0:
        raise DataError("empty batch file")
    if len(raw) % rec:
        raise DataError(
            f"truncated batch file: {len(raw)} bytes is not a multiple of the "
            f"{rec}-byte record size"
        )
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, :label_bytes]
    pixels = arr[:, label_bytes:].reshape(-1, 3, 32, 32)
    return labels, pixels.astype(np.float32) / 255.0


def load_cifar(path, variant, split):
    """Load CIFAR-10/100 binary batches from a directory.

    CIFAR-10 records are 1 label byte + 3072 pixel bytes; CIFAR-100
    records carry a coarse byte then the fine label byte (the fine
    label is used).
    """
    if variant not in (10, 100):
        raise DataError(f"variant must be 10 or 100, got {variant}")
    if split not in ("train", "test"):
        raise DataError(f"split must be train or test, got {split!r}")
    files = {
        (10, "train"): CIFAR10_TRAIN_FILES,
        (10, "test"): CIFAR10_TEST_FILES,
        (100, "train"): CIFAR100_TRAIN_FILES,
        (100, "test"): CIFAR100_TEST_FILES,
    }[(variant, split)]
    label_bytes = 1 if variant == 10 else 2
    all_labels, all_pixels = [], []
    for fname in files:
        fpath = os.path.join(path, fname)
        if not os.path.exists(fpath):
            raise DataError(f"missing CIFAR-{variant} batch file {fpath}")
        with open(fpath, "rb") as f:
            labels, pixels = _decode_records(f.read(), label_bytes)
        all_labels.append(labels)
        all_pixels.append(pixels)
    labels = np.concatenate(all_labels)
    images = np.concatenate(all_pixels)
    if variant == 10:
        return Dataset(images, labels[:, 0], 10, split)
    return Dataset(images, labels[:, 1], 100, split, coarse_labels=labels[:, 0])


def encode_cifar(dataset, variant):
    """Inverse of the loader: one bytes blob of records (round-trips the
    source bytes for data decoded by ``load_cifar``)."""
    if variant == 100 and dataset.coarse_labels is None:
        raise DataError("CIFAR-100 re-encoding needs coarse labels")
    pixels = np.round(dataset.images * 255.0).astype(np.uint8).reshape(len(dataset), -1)
    fine = dataset.labels.astype(np.uint8)[:, None]
    if variant == 10:
        parts = [fine, pixels]
    else:
        parts = [dataset.coarse_labels.astype(np.uint8)[:, None], fine, pixels]
    return np.concatenate(parts, axis=1).tobytes()


def write_cifar(dataset, path, variant):
    """Write a dataset back out as standard binary batch files (train
    data goes into data_batch_1..5.bin split evenly for CIFAR-10)."""
    os.makedirs(path, exist_ok=True)
    blob = encode_cifar(dataset, variant)
    files = {
        (10, "train"): CIFAR10_TRAIN_FILES,
        (10, "test"): CIFAR10_TEST_FILES,
        (100, "train"): CIFAR100_TRAIN_FILES,
        (100, "test"): CIFAR100_TEST_FILES,
    }[(variant, dataset.split)]
    rec = (1 if variant == 10 else 2) + _RECORD_PIXELS
    n = len(dataset)
    per = -(-n // len(files))  # ceil
    for i, fname in enumerate(files):
        chunk = blob[i * per * rec : (i + 1) * per * rec]
        if not chunk:
            continue
        with open(os.path.join(path, fname), "wb") as f:
            f.write(chunk)


def pixel_mean(dataset):
    """Element-wise mean image, shape (C,H,W)."""
    if len(dataset) == 0:
        raise DataError("pixel_mean of an empty dataset")
    return dataset.images.mean(axis=0)


def synthetic_dataset(num_classes, n, geometry=(3, 32, 32), seed=0,
                      separability=0.9, split="train"):
    """Class-conditional smooth-blob images a small network (or even a
    linear model, at high separability) can classify. Deterministic in
    the seed; labels are balanced across classes. Class prototypes
    depend only on the seed, so train/test splits of the same seed are
    drawn around the same prototypes with independent noise."""
    if not 0.0 <= separability <= 1.0:
        raise DataError("separability must lie in [0, 1]")
    c, h, w = geometry
    proto_seed, train_seed, test_seed = np.random.SeedSequence(seed).spawn(3)
    proto_rng = np.random.default_rng(proto_seed)
    rng = np.random.default_rng(train_seed if split == "train" else test_seed)
    # smooth per-class prototypes: low-res noise upsampled bilinearly
    base = proto_rng.uniform(0.2, 0.8, size=(num_classes, c, 4, 4))
    ah = _interp_matrix(4, h, np.float64)
    aw = _interp_matrix(4, w, np.float64)
    protos = np.matmul(ah, np.matmul(base, aw.T))
    reps = -(-n // num_classes)
    labels = np.tile(np.arange(num_classes), reps)[:n]
    labels = labels[rng.permutation(n)]
    noise = rng.normal(0.0, 0.25 * (1.0 - separability) + 1e-3, size=(n, c, h, w))
    images = np.clip(protos[labels] + noise, 0.0, 1.0)
    return Dataset(images.astype(np.float32), labels, num_classes, split)
