"""Dataset ingestion: CIFAR-10 binary batches and a deterministic
synthetic stand-in for desk-scale runs.
"""

import os
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes


@dataclass
class DatasetHandle:
    images: np.ndarray   # (count, C, H, W) float32, normalized
    labels: np.ndarray   # (count,) int64
    mean: np.ndarray     # per-channel normalization stats
    std: np.ndarray
    augment_sigma: float = 0.0    # stddev of per-batch Gaussian augmentation
    augment_basis: np.ndarray = None  # (rank, C*H*W): confine noise to a subspace

    @property
    def count(self):
        return self.images.shape[0]

    def subset(self, start, stop):
        return DatasetHandle(self.images[start:stop], self.labels[start:stop],
                             self.mean, self.std, self.augment_sigma,
                             self.augment_basis)


def parse_cifar10_bytes(raw):
    """Decode raw CIFAR-10 binary records: per record one label byte then
    3072 pixel bytes, channel-major R,G,B, row-major 32x32.
    """
    if len(raw) % CIFAR_RECORD != 0:
        raise FormatError(
            f"file length {len(raw)} is not a multiple of {CIFAR_RECORD}",
            offset=len(raw) - len(raw) % CIFAR_RECORD,
        )
    count = len(raw) // CIFAR_RECORD
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(count, CIFAR_RECORD)
    labels = arr[:, 0].astype(np.int64)
    images = arr[:, 1:].reshape(count, 3, 32, 32)
    return images, labels


def load_cifar10(directory, files=None):
    """Load CIFAR-10 binary batch files from a directory, scale pixels to
    [0,1], and normalize per channel with the loaded set's mean/std.
    """
    if files is None:
        files = sorted(
            f for f in os.listdir(directory)
            if f.endswith(".bin") and f.startswith(("data_batch", "test_batch"))
        )
        if not files:
            files = sorted(f for f in os.listdir(directory) if f.endswith(".bin"))
    if not files:
        raise FormatError(f"no CIFAR-10 .bin files in {directory}")
    all_imgs, all_labels = [], []
    for name in files:
        with open(os.path.join(directory, name), "rb") as f:
            imgs, labels = parse_cifar10_bytes(f.read())
        all_imgs.append(imgs)
        all_labels.append(labels)
    images = np.concatenate(all_imgs).astype(np.float32) / 255.0
    labels = np.concatenate(all_labels)
    mean = images.mean(axis=(0, 2, 3))
    std = images.std(axis=(0, 2, 3))
    std = np.where(std > 0, std, 1.0).astype(np.float32)
    images = (images - mean.reshape(1, 3, 1, 1)) / std.reshape(1, 3, 1, 1)
    return DatasetHandle(images=images, labels=labels, mean=mean, std=std)


def synth_dataset(seed, count, shape=(3, 32, 32), classes=10, noise=0.6,
                  rank=None):
    """Class-separable Gaussian blobs: each class has a fixed random
    template image; samples are template + noise. Bitwise deterministic
    for a given seed. With `rank` set, templates, per-sample noise, and the
    handle's augmentation basis are all confined to a shared rank-dim
    subspace of pixel space, so only that subspace carries any variance.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, size=count)
    mean = np.zeros(shape[0], dtype=np.float32)
    std = np.ones(shape[0], dtype=np.float32)
    if rank is None:
        templates = rng.normal(0.0, 1.0, size=(classes,) + tuple(shape))
        images = templates[labels] + noise * rng.normal(
            0.0, 1.0, size=(count,) + tuple(shape))
        return DatasetHandle(images=images.astype(np.float32), labels=labels,
                             mean=mean, std=std)
    basis = (rng.normal(0.0, 1.0, size=(rank, int(np.prod(shape))))
             / np.sqrt(rank)).astype(np.float32)
    coeff = rng.normal(0.0, 1.0, size=(classes, rank))
    sample_coeff = coeff[labels] + noise * rng.normal(0.0, 1.0, size=(count, rank))
    images = (sample_coeff @ basis).reshape((count,) + tuple(shape))
    return DatasetHandle(images=images.astype(np.float32), labels=labels,
                         mean=mean, std=std, augment_basis=basis)
