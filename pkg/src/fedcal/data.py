"""Datasets: synthetic blobs, IDX (MNIST) files, and Dirichlet label-skew shards."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, UsageError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MAX_REDRAWS = 100


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise UsageError("features must be N x d with one label per row")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise UsageError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


@dataclass
class ClientShard:
    client_id: int
    train: Dataset
    validation: Dataset
    train_indices: np.ndarray
    val_indices: np.ndarray

    @property
    def num_samples(self) -> int:
        return len(self.train) + len(self.validation)

    def local_data(self) -> Dataset:
        """Train and validation rows together, in parent-index order."""
        idx = np.concatenate([self.train_indices, self.val_indices])
        order = np.argsort(idx, kind="stable")
        feats = np.concatenate([self.train.features, self.validation.features])[order]
        labels = np.concatenate([self.train.labels, self.validation.labels])[order]
        return Dataset(feats, labels, self.train.num_classes)


@dataclass
class PartitionSpec:
    num_clients: int
    beta: float
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.num_clients < 1:
            raise UsageError("num_clients must be >= 1")
        if not self.beta > 0:
            raise UsageError("beta must be positive")
        if not 0 < self.val_fraction < 1:
            raise UsageError("val_fraction must lie in (0, 1)")


def generate_synthetic(num_classes: int, dim: int, per_class: int, spread: float, seed: int) -> Dataset:
    """Gaussian blobs around seeded centres in the unit cube, clamped to [0, 1]."""
    if num_classes < 2 or per_class < 1:
        raise UsageError("need num_classes >= 2 and per_class >= 1")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.0, 1.0, size=(num_classes, dim))
    labels = np.repeat(np.arange(num_classes), per_class)
    noise = rng.standard_normal((len(labels), dim))
    feats = np.clip(centers[labels] + spread * noise, 0.0, 1.0)
    return Dataset(feats, labels, num_classes)


def _read_exact(fh, n, path):
    buf = fh.read(n)
    if len(buf) != n:
        raise OSError(f"{path}: truncated file (wanted {n} bytes, got {len(buf)})")
    return buf


def _read_idx(path, magic):
    with open(path, "rb") as fh:
        (found,) = struct.unpack(">I", _read_exact(fh, 4, path))
        if found != magic:
            raise FormatError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
        ndim = magic & 0xFF
        dims = struct.unpack(">" + "I" * ndim, _read_exact(fh, 4 * ndim, path))
        size = int(np.prod(dims))
        raw = np.frombuffer(_read_exact(fh, size, path), dtype=np.uint8)
    return raw.reshape(dims)


def parse_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label pair (MNIST layout); pixels are scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    feats = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    k = int(labels.max()) + 1 if len(labels) else 1
    return Dataset(feats, labels, k)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 arrays as an IDX pair (used for fixtures)."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        fh.write(struct.pack(">III", *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_LABELS_MAGIC))
        fh.write(struct.pack(">I", labels.shape[0]))
        fh.write(labels.tobytes())


def split_holdout(data: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset, np.ndarray]:
    """Reserve a stratified ``fraction`` of ``data`` as a pooled test set.

    Returns (remaining, test, remaining_indices).
    """
    rng = np.random.default_rng(seed)
    test_idx = []
    for k in range(data.num_classes):
        members = np.flatnonzero(data.labels == k)
        n_test = int(round(fraction * len(members)))
        test_idx.append(rng.permutation(members)[:n_test])
    test_idx = np.sort(np.concatenate(test_idx))
    keep = np.setdiff1d(np.arange(len(data)), test_idx)
    return data.subset(keep), data.subset(test_idx), keep


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total``, closest to ``proportions * total``."""
    exact = proportions * total
    counts = np.floor(exact).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        order = np.argsort(-(exact - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _dirichlet(rng, beta, size):
    while True:
        g = rng.gamma(beta, 1.0, size=size)
        s = g.sum()
        if s > 0:
            return g / s


def _assign(labels, num_classes, spec, rng):
    owners = np.empty(len(labels), dtype=np.int64)
    for k in range(num_classes):
        members = np.flatnonzero(labels == k)
        if len(members) == 0:
            continue
        p = _dirichlet(rng, spec.beta, spec.num_clients)
        counts = largest_remainder(p, len(members))
        members = rng.permutation(members)
        owners[members] = np.repeat(np.arange(spec.num_clients), counts)
    return owners


def _split_validation(idx, labels, val_fraction, rng):
    val = []
    for k in np.unique(labels[idx]):
        members = idx[labels[idx] == k]
        if len(members) < 2:
            continue
        n_val = min(int(round(val_fraction * len(members))), len(members) - 1)
        val.append(rng.permutation(members)[:n_val])
    val = np.concatenate(val) if val else np.empty(0, dtype=np.int64)
    if len(val) == 0 and len(idx) >= 2:
        val = rng.permutation(idx)[:1]
    val = np.sort(val)
    return np.setdiff1d(idx, val), val


def dirichlet_partition(data: Dataset, spec: PartitionSpec) -> list[ClientShard]:
    """Split ``data`` across clients with per-class Dir(beta) proportions.

    Each class is divided with largest-remainder rounding. Draws that leave a
    client empty are repeated (up to 100 times). Each shard then holds back a
    class-stratified ``val_fraction`` as validation data.
    """
    if len(data) < spec.num_clients:
        raise UsageError(f"{len(data)} samples cannot cover {spec.num_clients} clients")
    rng = np.random.default_rng(spec.seed)
    for _ in range(MAX_REDRAWS):
        owners = _assign(data.labels, data.num_classes, spec, rng)
        if np.bincount(owners, minlength=spec.num_clients).min() > 0:
            break
    else:
        raise UsageError(
            f"a client stayed empty after {MAX_REDRAWS} Dirichlet draws; "
            "use a larger dataset or a larger beta"
        )
    shards = []
    for c in range(spec.num_clients):
        idx = np.flatnonzero(owners == c)
        train_idx, val_idx = _split_validation(idx, data.labels, spec.val_fraction, rng)
        shards.append(ClientShard(c, data.subset(train_idx), data.subset(val_idx), train_idx, val_idx))
    return shards
