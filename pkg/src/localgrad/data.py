"""Deterministic synthetic datasets and file-based ingestion.

Generators are pure functions of their arguments including the seed, and
produce stratified 80/20 train/test splits. File loaders standardize
features using statistics from the train split only.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
TRAIN_FRACTION = 0.8


class DataError(ValueError):
    """Raised for malformed dataset files or degenerate generator arguments."""


@dataclass
class Dataset:
    """Inputs, integer labels, and a train/test boundary.

    The first ``n_train`` rows are the train split, the rest the test
    split. ``norm_mean``/``norm_std`` are set when standardization was
    applied (computed on the train split only).
    """
    inputs: np.ndarray
    labels: np.ndarray
    n_train: int
    n_classes: int
    norm_mean: Optional[np.ndarray] = None
    norm_std: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise DataError(
                f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if not 0 <= self.n_train <= len(self.labels):
            raise DataError(f"invalid train size {self.n_train}")
        if len(self.labels) and (self.labels.min() < 0
                                 or self.labels.max() >= self.n_classes):
            raise DataError(
                f"labels must lie in [0, {self.n_classes})")

    @property
    def train_inputs(self) -> np.ndarray:
        return self.inputs[:self.n_train]

    @property
    def train_labels(self) -> np.ndarray:
        return self.labels[:self.n_train]

    @property
    def test_inputs(self) -> np.ndarray:
        return self.inputs[self.n_train:]

    @property
    def test_labels(self) -> np.ndarray:
        return self.labels[self.n_train:]

    @property
    def input_shape(self) -> tuple:
        return self.inputs.shape[1:]


def _stratified_split(inputs, labels, n_classes, rng) -> Dataset:
    """Shuffle within each class, take the leading fraction for train,
    then interleave so per-class counts stay within one of each other."""
    train_idx, test_idx = [], []
    for c in range(n_classes):
        idx = np.where(labels == c)[0]
        idx = idx[rng.permutation(len(idx))]
        cut = int(round(TRAIN_FRACTION * len(idx)))
        train_idx.append(idx[:cut])
        test_idx.append(idx[cut:])
    train = np.concatenate(train_idx)
    test = np.concatenate(test_idx)
    train = train[rng.permutation(len(train))]
    test = test[rng.permutation(len(test))]
    order = np.concatenate([train, test])
    return Dataset(inputs[order], labels[order], len(train), n_classes)


def standardize(dataset: Dataset) -> Dataset:
    """Per-feature zero mean, unit variance, with train-split statistics.

    Constant features are left unscaled (divisor 1).
    """
    flat = dataset.train_inputs.reshape(len(dataset.train_labels), -1)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    shaped_mean = mean.reshape(dataset.input_shape)
    shaped_std = std.reshape(dataset.input_shape)
    return Dataset((dataset.inputs - shaped_mean) / shaped_std,
                   dataset.labels, dataset.n_train, dataset.n_classes,
                   norm_mean=shaped_mean, norm_std=shaped_std)


def gen_spirals(n_per_class: int, classes: int, noise: float, seed: int,
                turns: float = 1.75, radius: float = 3.0) -> Dataset:
    """Interleaved Archimedean spirals in 2-D with Gaussian noise."""
    if n_per_class < 1:
        raise DataError(f"n_per_class must be >= 1, got {n_per_class}")
    if classes < 2:
        raise DataError(f"spirals need at least 2 classes, got {classes}")
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for c in range(classes):
        t = (np.arange(n_per_class) + 0.5) / n_per_class
        theta = 2.0 * np.pi * (turns * t + c / classes)
        r = radius * t
        pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        pts += noise * rng.standard_normal((n_per_class, 2))
        xs.append(pts)
        ys.append(np.full(n_per_class, c, dtype=np.int64))
    inputs = np.concatenate(xs)
    labels = np.concatenate(ys)
    return _stratified_split(inputs, labels, classes, rng)


def gen_blobs(n_per_class: int, classes: int, separation: float,
              seed: int) -> Dataset:
    """Isotropic unit-variance Gaussian clusters at seeded 2-D centers with
    pairwise center distance >= separation."""
    if n_per_class < 1:
        raise DataError(f"n_per_class must be >= 1, got {n_per_class}")
    if classes < 2:
        raise DataError(f"blobs need at least 2 classes, got {classes}")
    if separation <= 0:
        raise DataError(f"separation must be positive, got {separation}")
    rng = np.random.default_rng(seed)
    box = separation * max(2.0, float(classes))
    centers: list[np.ndarray] = []
    attempts = 0
    while len(centers) < classes:
        cand = rng.uniform(-box, box, size=2)
        if all(np.linalg.norm(cand - c) >= separation for c in centers):
            centers.append(cand)
        attempts += 1
        if attempts > 10000 * classes:
            raise DataError("could not place blob centers; separation too large")
    xs, ys = [], []
    for c, center in enumerate(centers):
        xs.append(center + rng.standard_normal((n_per_class, 2)))
        ys.append(np.full(n_per_class, c, dtype=np.int64))
    return _stratified_split(np.concatenate(xs), np.concatenate(ys),
                             classes, rng)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def save_csv(dataset: Dataset, path) -> None:
    """Rows of ``label,feature1,...,featureD``; floats use shortest
    round-trip formatting, so a reload is bitwise equal."""
    flat = dataset.inputs.reshape(len(dataset.labels), -1)
    with open(path, "w", encoding="utf-8") as fh:
        for label, row in zip(dataset.labels, flat):
            fh.write(",".join([str(int(label))] + [repr(float(v)) for v in row]))
            fh.write("\n")


def load_csv(path, n_classes: int, *, standardize_features: bool = True,
             seed: int = 0) -> Dataset:
    """Parse ``label,feature...`` rows into a stratified 80/20 dataset."""
    rows, labels = [], []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) < 2:
                raise DataError(f"{path}: line {lineno}: expected label and "
                                f"at least one feature")
            try:
                label = int(parts[0])
                feats = [float(v) for v in parts[1:]]
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from exc
            if label < 0 or label >= n_classes:
                raise DataError(f"{path}: line {lineno}: label {label} out of "
                                f"range [0, {n_classes})")
            if width is None:
                width = len(feats)
            elif len(feats) != width:
                raise DataError(f"{path}: line {lineno}: expected {width} "
                                f"features, got {len(feats)}")
            rows.append(feats)
            labels.append(label)
    if not rows:
        raise DataError(f"{path}: no data rows")
    rng = np.random.default_rng(seed)
    ds = _stratified_split(np.array(rows, dtype=np.float64),
                           np.array(labels, dtype=np.int64), n_classes, rng)
    return standardize(ds) if standardize_features else ds


# ---------------------------------------------------------------------------
# IDX binary format
# ---------------------------------------------------------------------------

def _read_idx_header(fh, path, expect_magic: int, ndims: int):
    raw = fh.read(4)
    if len(raw) < 4:
        raise DataError(f"{path}: truncated magic at offset 0")
    (magic,) = struct.unpack(">I", raw)
    if magic != expect_magic:
        raise DataError(f"{path}: bad magic 0x{magic:08x} at offset 0, "
                        f"expected 0x{expect_magic:08x}")
    dims = []
    for i in range(ndims):
        raw = fh.read(4)
        if len(raw) < 4:
            raise DataError(f"{path}: truncated dimension at offset {4 + 4 * i}")
        dims.append(struct.unpack(">I", raw)[0])
    return dims


def load_idx(images_path, labels_path, *, standardize_features: bool = True,
             flat: bool = False, seed: int = 0) -> Dataset:
    """Load an IDX image/label file pair (big-endian, unsigned byte data).

    Pixel values are scaled to [0, 1] before optional standardization.
    Images come out as (n, 1, h, w), or (n, h*w) with ``flat=True``.
    """
    with open(images_path, "rb") as fh:
        n, h, w = _read_idx_header(fh, images_path, IDX_IMAGES_MAGIC, 3)
        raw = fh.read(n * h * w)
        if len(raw) != n * h * w:
            raise DataError(f"{images_path}: expected {n * h * w} pixel bytes, "
                            f"got {len(raw)}")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(n, h, w)
    with open(labels_path, "rb") as fh:
        (n_labels,) = _read_idx_header(fh, labels_path, IDX_LABELS_MAGIC, 1)
        raw = fh.read(n_labels)
        if len(raw) != n_labels:
            raise DataError(f"{labels_path}: expected {n_labels} label bytes, "
                            f"got {len(raw)}")
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if n != n_labels:
        raise DataError(f"{images_path} has {n} images but {labels_path} "
                        f"has {n_labels} labels")
    n_classes = int(labels.max()) + 1 if n else 0
    inputs = images.astype(np.float64) / 255.0
    inputs = inputs.reshape(n, h * w) if flat else inputs.reshape(n, 1, h, w)
    rng = np.random.default_rng(seed)
    ds = _stratified_split(inputs, labels, n_classes, rng)
    return standardize(ds) if standardize_features else ds
