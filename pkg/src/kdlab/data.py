"""Desk-scale datasets with stable per-sample ids.

Sample ids are unique across splits and stable across epochs so per-sample
gap and variance tables can be joined between runs. Label noise is applied
to the training split only and the affected ids are recorded; the noise is
what makes samples genuinely hard, so weighting schemes have something to
disagree about.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import idx as idx_io


@dataclass
class Split:
    inputs: np.ndarray
    labels: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class DatasetBundle:
    kind: str
    train: Split
    test: Split
    num_classes: int
    input_shape: tuple[int, ...]
    noisy_train_ids: np.ndarray = field(default_factory=lambda: np.array([], dtype=np.int64))


def _apply_label_noise(labels: np.ndarray, rate: float, num_classes: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Reassign a seeded fraction of labels to a different uniform class;
    returns the affected indices."""
    n = len(labels)
    k = int(round(rate * n))
    if k == 0:
        return np.array([], dtype=np.int64)
    picked = np.sort(rng.choice(n, size=k, replace=False))
    for i in picked:
        shift = rng.integers(1, num_classes)
        labels[i] = (labels[i] + shift) % num_classes
    return picked.astype(np.int64)


def make_blobs(
    seed: int,
    num_classes: int = 6,
    dim: int = 8,
    train_size: int = 512,
    test_size: int = 2048,
    cluster_std: float = 1.0,
    center_scale: float = 2.0,
    label_noise: float = 0.1,
) -> DatasetBundle:
    """Gaussian clusters with near-balanced classes and seeded train-label
    noise; any remainder of ``size / num_classes`` goes to the low classes."""
    rng = np.random.default_rng([seed, 101])
    centers = rng.normal(0.0, 1.0, (num_classes, dim)) * center_scale

    def sample_split(n: int, id_start: int) -> Split:
        counts = np.full(num_classes, n // num_classes)
        counts[: n % num_classes] += 1
        labels = np.repeat(np.arange(num_classes), counts)
        rng.shuffle(labels)
        x = centers[labels] + rng.normal(0.0, cluster_std, (n, dim))
        return Split(inputs=x, labels=labels.astype(np.int64), ids=np.arange(id_start, id_start + n))

    train = sample_split(train_size, 0)
    test = sample_split(test_size, train_size)
    # standardize per dimension on train statistics so the optimizer sees
    # unit-scale inputs regardless of the cluster geometry
    mu = train.inputs.mean(axis=0)
    sd = train.inputs.std(axis=0)
    sd[sd == 0] = 1.0
    train.inputs = (train.inputs - mu) / sd
    test.inputs = (test.inputs - mu) / sd
    noisy_idx = _apply_label_noise(train.labels, label_noise, num_classes, rng)
    return DatasetBundle(
        kind="synthetic_blobs",
        train=train,
        test=test,
        num_classes=num_classes,
        input_shape=(dim,),
        noisy_train_ids=train.ids[noisy_idx],
    )


def make_two_spirals(
    seed: int,
    train_size: int = 512,
    test_size: int = 1024,
    noise_std: float = 0.15,
    turns: float = 1.75,
    label_noise: float = 0.0,
) -> DatasetBundle:
    """Two interleaved spirals in the plane, one class per arm."""
    if train_size % 2 or test_size % 2:
        raise ValueError("spiral split sizes must be even")
    rng = np.random.default_rng([seed, 202])

    def sample_split(n: int, id_start: int) -> Split:
        half = n // 2
        t = rng.uniform(0.25, 1.0, n) * turns * 2.0 * np.pi
        labels = np.concatenate([np.zeros(half, dtype=np.int64), np.ones(half, dtype=np.int64)])
        sign = np.where(labels == 0, 1.0, -1.0)
        x = np.stack([sign * t * np.cos(t), sign * t * np.sin(t)], axis=1) / (2.0 * np.pi)
        x += rng.normal(0.0, noise_std, x.shape)
        perm = rng.permutation(n)
        return Split(inputs=x[perm], labels=labels[perm], ids=np.arange(id_start, id_start + n))

    train = sample_split(train_size, 0)
    test = sample_split(test_size, train_size)
    noisy_idx = _apply_label_noise(train.labels, label_noise, 2, rng)
    return DatasetBundle(
        kind="two_spirals",
        train=train,
        test=test,
        num_classes=2,
        input_shape=(2,),
        noisy_train_ids=train.ids[noisy_idx],
    )


def load_idx_dataset(
    train_images: str,
    train_labels: str,
    test_images: str,
    test_labels: str,
    limit_train: int = 0,
    limit_test: int = 0,
) -> DatasetBundle:
    """IDX image classification data; pixels scaled to [0, 1], inputs
    shaped [N, 1, rows, cols]."""
    xtr = idx_io.read_idx_images(train_images)
    ytr = idx_io.read_idx_labels(train_labels)
    xte = idx_io.read_idx_images(test_images)
    yte = idx_io.read_idx_labels(test_labels)
    if len(xtr) != len(ytr) or len(xte) != len(yte):
        raise ValueError("image and label counts disagree")
    if limit_train:
        xtr, ytr = xtr[:limit_train], ytr[:limit_train]
    if limit_test:
        xte, yte = xte[:limit_test], yte[:limit_test]
    num_classes = int(max(ytr.max(), yte.max())) + 1

    def to_split(x: np.ndarray, y: np.ndarray, id_start: int) -> Split:
        inputs = (x.astype(np.float64) / 255.0)[:, None, :, :]
        return Split(inputs=inputs, labels=y.astype(np.int64), ids=np.arange(id_start, id_start + len(x)))

    train = to_split(xtr, ytr, 0)
    test = to_split(xte, yte, len(xtr))
    return DatasetBundle(
        kind="idx_images",
        train=train,
        test=test,
        num_classes=num_classes,
        input_shape=train.inputs.shape[1:],
    )
