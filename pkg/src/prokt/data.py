"""Datasets: seeded synthetic generators, IDX/CSV loaders and minibatch streams."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import derive_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

TRAIN_FRACTION = 0.8
BLOB_RADIUS = 3.0


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    labels: np.ndarray
    K: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    label_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        n = self.X.shape[0]
        if self.X.ndim != 2 or n < 1:
            raise ValueError("dataset needs a non-empty 2-D feature matrix")
        if self.labels.shape != (n,):
            raise ValueError("one label per row required")
        if self.labels.min() < 0 or self.labels.max() >= self.K:
            raise ValueError(f"labels must lie in [0, {self.K})")
        both = np.concatenate([self.train_idx, self.test_idx])
        if both.size != n or not np.array_equal(np.sort(both), np.arange(n)):
            raise ValueError("train/test split must be disjoint and cover every row")
        for a in (self.X, self.labels, self.train_idx, self.test_idx):
            a.flags.writeable = False

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name == "train":
            idx = self.train_idx
        elif name == "test":
            idx = self.test_idx
        elif name == "all":
            return self.X, self.labels
        else:
            raise ValueError(f"unknown subset {name!r}")
        if idx.size == 0:
            raise ValueError(f"empty {name} split")
        return self.X[idx], self.labels[idx]


def seeded_split(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """80/20 split from a stream keyed (seed, "split"); index lists come back sorted."""
    perm = derive_rng(seed, "split").permutation(n)
    n_train = max(1, int(round(TRAIN_FRACTION * n))) if n > 1 else n
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def _make(X, labels, K, seed, label_names=()) -> Dataset:
    train, test = seeded_split(X.shape[0], seed)
    return Dataset(np.asarray(X, dtype=np.float64), np.asarray(labels, dtype=np.int64),
                   K, train, test, tuple(label_names))


def gen_blobs(K: int, n_per_class: int, d: int = 2, spread: float = 1.0, seed: int = 0) -> Dataset:
    """Isotropic Gaussian clusters around random directions of norm 3."""
    if K < 2 or d < 2 or n_per_class < 1:
        raise ValueError("gen_blobs needs K >= 2, d >= 2 and n_per_class >= 1")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    rng = derive_rng(seed, "blobs")
    means = rng.standard_normal((K, d))
    means *= BLOB_RADIUS / np.linalg.norm(means, axis=1, keepdims=True)
    labels = np.repeat(np.arange(K), n_per_class)
    X = means[labels] + spread * rng.standard_normal((labels.size, d))
    return _make(X, labels, K, seed)


def gen_rings(K: int, n_per_class: int, noise: float = 0.1, seed: int = 0) -> Dataset:
    """Concentric rings in the plane; class j sits at radius j + 1."""
    if K < 2 or n_per_class < 1:
        raise ValueError("gen_rings needs K >= 2 and n_per_class >= 1")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    rng = derive_rng(seed, "rings")
    labels = np.repeat(np.arange(K), n_per_class)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=labels.size)
    r = labels + 1.0 + noise * rng.standard_normal(labels.size)
    X = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    return _make(X, labels, K, seed)


def _read_idx(path, magic: int, n_dims: int) -> tuple[tuple[int, ...], np.ndarray]:
    buf = Path(path).read_bytes()
    header = 4 * (1 + n_dims)
    if len(buf) < header:
        raise DataFormatError(f"{path}: truncated header")
    got = struct.unpack(">I", buf[:4])[0]
    if got != magic:
        raise DataFormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{n_dims}I", buf[4:header])
    count = int(np.prod(dims))
    if len(buf) - header < count:
        raise DataFormatError(f"{path}: truncated payload ({len(buf) - header} of {count} bytes)")
    if len(buf) - header > count:
        raise DataFormatError(f"{path}: {len(buf) - header - count} trailing bytes")
    return dims, np.frombuffer(buf, dtype=np.uint8, offset=header)


def load_idx(images_path, labels_path, K: int | None = None, split: str = "train") -> Dataset:
    """Read an IDX image/label pair; pixels are scaled by 1/255, rows kept in file order.

    Every row is assigned to ``split``; use :func:`combine_splits` to pair a
    training file with a test file.
    """
    (n, rows, cols), pixels = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    (n_labels,), labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if n != n_labels:
        raise DataFormatError(f"count mismatch: {n} images vs {n_labels} labels")
    if n == 0:
        raise DataFormatError("IDX files contain no examples")
    X = pixels.reshape(n, rows * cols).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    K = int(labels.max()) + 1 if K is None else K
    all_idx, none = np.arange(n), np.arange(0)
    if split == "train":
        return Dataset(X, labels, K, all_idx, none)
    if split == "test":
        return Dataset(X, labels, K, none, all_idx)
    raise ValueError(f"split must be 'train' or 'test', got {split!r}")


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())


def combine_splits(train: Dataset, test: Dataset) -> Dataset:
    """Stack two datasets into one, the first as train rows, the second as test rows."""
    if train.d != test.d:
        raise ValueError("feature width differs between train and test data")
    K = max(train.K, test.K)
    n = train.n
    return Dataset(np.vstack([train.X, test.X]), np.concatenate([train.labels, test.labels]), K,
                   np.arange(n), np.arange(n, n + test.n), train.label_names)


def load_csv(path, label_column: str, split_column: str | None = "split", seed: int = 0) -> Dataset:
    """Numeric CSV with a header row.

    Labels that are all non-negative integers are used as-is; anything else
    is indexed by first appearance (recorded in ``label_names``). If a
    ``split_column`` with train/test values is present it defines the split,
    otherwise a seeded 80/20 split is drawn.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    if label_column not in header:
        raise DataFormatError(f"{path}: missing label column {label_column!r}")
    li = header.index(label_column)
    si = header.index(split_column) if split_column and split_column in header else None
    feat_cols = [j for j in range(len(header)) if j not in (li, si)]
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    X = np.empty((len(rows), len(feat_cols)))
    raw_labels, splits = [], []
    for i, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise DataFormatError(f"{path}: row {i} has {len(row)} cells, header has {len(header)}")
        for k, j in enumerate(feat_cols):
            try:
                X[i - 2, k] = float(row[j])
            except ValueError:
                raise DataFormatError(
                    f"{path}: non-numeric value {row[j]!r} at row {i}, column {header[j]!r}") from None
        raw_labels.append(row[li].strip())
        if si is not None:
            splits.append(row[si].strip())
    if not np.all(np.isfinite(X)):
        raise DataFormatError(f"{path}: non-finite feature value")

    if all(s.isdigit() for s in raw_labels):
        labels = np.array([int(s) for s in raw_labels], dtype=np.int64)
        K, names = int(labels.max()) + 1, ()
    else:
        index: dict[str, int] = {}
        for s in raw_labels:
            index.setdefault(s, len(index))
        labels = np.array([index[s] for s in raw_labels], dtype=np.int64)
        K, names = len(index), tuple(index)

    if si is None:
        train, test = seeded_split(len(rows), seed)
    else:
        bad = sorted(set(splits) - {"train", "test"})
        if bad:
            raise DataFormatError(f"{path}: unknown split value(s) {bad}")
        flags = np.array(splits)
        train, test = np.flatnonzero(flags == "train"), np.flatnonzero(flags == "test")
    return Dataset(X, labels, K, train, test, names)


def save_csv(data: Dataset, path, label_column: str = "label") -> None:
    """Write features, label and split; floats use repr so reloads are exact."""
    split = np.empty(data.n, dtype=object)
    split[data.train_idx] = "train"
    split[data.test_idx] = "test"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(data.d)] + [label_column, "split"])
        for i in range(data.n):
            label = data.label_names[data.labels[i]] if data.label_names else int(data.labels[i])
            w.writerow([repr(float(v)) for v in data.X[i]] + [label, split[i]])


class BatchStream:
    """Endless minibatches over the train split.

    Each epoch is a fresh permutation drawn from a generator keyed by
    (seed, "batches", epoch); the short final batch of an epoch is kept.
    """

    def __init__(self, data: Dataset, batch_size: int, seed: int):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if data.train_idx.size == 0:
            raise ValueError("dataset has no training rows")
        self.data = data
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = -1
        self._order = np.arange(0)
        self._pos = 0

    def _new_epoch(self):
        self.epoch += 1
        rng = derive_rng(self.seed, "batches", self.epoch)
        self._order = self.data.train_idx[rng.permutation(self.data.train_idx.size)]
        self._pos = 0

    def next_batch(self) -> tuple[np.ndarray, np.ndarray]:
        if self._pos >= self._order.size:
            self._new_epoch()
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += idx.size
        return self.data.X[idx], self.data.labels[idx]


def next_batch(stream: BatchStream) -> tuple[np.ndarray, np.ndarray]:
    return stream.next_batch()
