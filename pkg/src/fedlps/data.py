"""Datasets (IDX files and synthetic blobs) and per-client partitioning.

A :class:`Dataset` is an immutable array of images plus labels with three
disjoint index splits: ``train`` (partitioned across clients), ``test``
(server-side evaluation), and ``public`` (central backbone pre-training).

Partitioning is either IID (seeded shuffle, shard sizes differing by at most
one) or label-skewed: for every class a proportion vector is drawn from
Dirichlet(alpha * 1_clients) and that class's samples are dealt out by
largest-remainder rounding. Lower alpha means more skew. If a draw leaves
any client with an empty shard, the whole plan is redrawn with a fresh
sub-seed, a bounded number of times.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataFormatError, PartitionError
from .util import rng_for

IDX_UBYTE = 0x08
LDA_MAX_RETRIES = 100


@dataclass(frozen=True)
class Dataset:
    """Images (N, C, H, W) in [0, 1]-ish float64 with disjoint index splits."""

    name: str
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    public_idx: np.ndarray

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            raise ConfigurationError(f"dataset {self.name!r}: images must be (N, C, H, W)")
        if self.labels.shape != (self.images.shape[0],):
            raise ConfigurationError(f"dataset {self.name!r}: one label per image required")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ConfigurationError(
                f"dataset {self.name!r}: labels must lie in [0, {self.class_count})")
        splits = [set(self.train_idx.tolist()), set(self.test_idx.tolist()),
                  set(self.public_idx.tolist())]
        for i in range(3):
            for j in range(i + 1, 3):
                if splits[i] & splits[j]:
                    raise ConfigurationError(f"dataset {self.name!r}: splits must be disjoint")

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.images[idx], self.labels[idx]


def _make_splits(labels: np.ndarray, rng: np.random.Generator, test_fraction: float,
                 public_fraction: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stratified per-class split into train/test/public index arrays."""
    train, test, public = [], [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        n_test = int(np.floor(idx.size * test_fraction))
        n_public = int(np.floor(idx.size * public_fraction))
        test.append(idx[:n_test])
        public.append(idx[n_test:n_test + n_public])
        train.append(idx[n_test + n_public:])
    return (np.sort(np.concatenate(train)), np.sort(np.concatenate(test)),
            np.sort(np.concatenate(public)))


# ---------------------------------------------------------------------------
# IDX codec (big-endian, unsigned-byte payloads)


def read_idx(path) -> np.ndarray:
    """Decode one IDX file into a uint8 array of its declared shape."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated magic at byte 0 (file has {len(raw)} bytes)")
    zeros, dtype, ndim = raw[0] << 8 | raw[1], raw[2], raw[3]
    if zeros != 0:
        raise DataFormatError(f"{path}: bad magic at byte 0 (expected 0x0000, got {raw[:2].hex()})")
    if dtype != IDX_UBYTE:
        raise DataFormatError(f"{path}: unsupported type byte 0x{dtype:02x} at byte 2")
    if ndim < 1:
        raise DataFormatError(f"{path}: dimension count 0 at byte 3")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise DataFormatError(f"{path}: truncated dimension table at byte {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    expected = int(np.prod(dims))
    if expected == 0:
        raise DataFormatError(f"{path}: empty payload declared at byte 4")
    if len(raw) - header_end != expected:
        raise DataFormatError(
            f"{path}: payload mismatch at byte {header_end}: declared {expected} bytes, "
            f"found {len(raw) - header_end}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header_end).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Encode a uint8 array as an IDX file (inverse of :func:`read_idx`)."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">BBBB", 0, 0, IDX_UBYTE, arr.ndim))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_idx(images_path, labels_path, name: str, seed: int = 0,
             test_fraction: float = 0.2, public_fraction: float = 0.1) -> Dataset:
    """Load an image/label IDX pair, scale pixels to [0, 1], and split."""
    images_raw = read_idx(images_path)
    labels_raw = read_idx(labels_path)
    if images_raw.ndim != 3:
        raise DataFormatError(f"{images_path}: expected 3 dimensions (N, H, W), got {images_raw.ndim}")
    if labels_raw.ndim != 1:
        raise DataFormatError(f"{labels_path}: expected 1 dimension, got {labels_raw.ndim}")
    if images_raw.shape[0] != labels_raw.shape[0]:
        raise DataFormatError(
            f"{images_path}: {images_raw.shape[0]} images but {labels_raw.shape[0]} labels")
    images = images_raw.astype(np.float64)[:, None, :, :] / 255.0
    labels = labels_raw.astype(np.int64)
    class_count = int(labels.max()) + 1
    rng = rng_for(seed, "idx-split", name)
    train, test, public = _make_splits(labels, rng, test_fraction, public_fraction)
    return Dataset(name, images, labels, class_count, train, test, public)


# ---------------------------------------------------------------------------
# Synthetic data


def synth_dataset(name: str, classes: int, per_class: int, shape: tuple[int, ...] = (1, 28, 28),
                  seed: int = 0, margin: float = 2.0, noise: float = 0.25,
                  upsample: int = 4, test_fraction: float = 0.2,
                  public_fraction: float = 0.1) -> Dataset:
    """Class-conditional Gaussian blobs around per-class mean pattern images.

    Each class mean is 0.5 + margin * (a coarse seeded pattern upsampled by
    ``upsample`` to the image size and scaled to unit L2 norm); samples add
    N(0, noise^2) pixel noise. ``upsample`` sets the pattern's spatial
    scale: 4 gives smooth, blocky patterns; smaller values give finer
    textures that demand sharper filters. The default margin/noise keeps a
    nearest-centroid classifier in pixel space above 95% accuracy, so a few
    federated rounds produce meaningful learning curves.
    """
    if classes < 2:
        raise ConfigurationError(f"synthetic dataset needs >= 2 classes, got {classes}")
    if per_class < 1:
        raise ConfigurationError(f"per_class must be positive, got {per_class}")
    if upsample < 1:
        raise ConfigurationError(f"upsample factor must be >= 1, got {upsample}")
    c, h, w = shape
    means = []
    for label in range(classes):
        rng = rng_for(seed, "synth", name, "pattern", label)
        coarse = rng.normal(size=(c, -(-h // upsample), -(-w // upsample)))
        pattern = np.kron(coarse, np.ones((1, upsample, upsample)))[:, :h, :w]
        pattern /= np.sqrt((pattern ** 2).sum())
        means.append(0.5 + margin * pattern)
    noise_rng = rng_for(seed, "synth", name, "noise")
    images = np.empty((classes * per_class, c, h, w))
    labels = np.empty(classes * per_class, dtype=np.int64)
    for label in range(classes):
        start = label * per_class
        images[start:start + per_class] = means[label] + noise * noise_rng.normal(
            size=(per_class, c, h, w))
        labels[start:start + per_class] = label
    split_rng = rng_for(seed, "synth", name, "split")
    train, test, public = _make_splits(labels, split_rng, test_fraction, public_fraction)
    return Dataset(name, images, labels, classes, train, test, public)


# ---------------------------------------------------------------------------
# Partitioning


@dataclass(frozen=True)
class PartitionPlan:
    """Per-client train-index shards for one task's dataset."""

    dataset: str
    method: str  # "iid" or "lda"
    alpha: float  # 0.0 for iid
    seed: int
    shards: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        seen: set[int] = set()
        for shard in self.shards:
            items = set(shard.tolist())
            if seen & items:
                raise PartitionError(f"plan for {self.dataset!r}: client shards overlap")
            seen |= items

    @property
    def client_count(self) -> int:
        return len(self.shards)

    def shard_sizes(self) -> list[int]:
        return [int(s.size) for s in self.shards]

    def to_dict(self) -> dict:
        return {"dataset": self.dataset, "method": self.method, "alpha": self.alpha,
                "seed": self.seed, "shards": [s.tolist() for s in self.shards]}

    @staticmethod
    def from_dict(d: dict) -> "PartitionPlan":
        return PartitionPlan(d["dataset"], d["method"], d["alpha"], d["seed"],
                             tuple(np.asarray(s, dtype=np.int64) for s in d["shards"]))


def export_plans(plans: dict, path) -> None:
    """Write all tasks' partition plans as one JSON document for audit."""
    doc = {str(task): plan.to_dict() for task, plan in plans.items()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def partition_iid(dataset: Dataset, clients: int, seed: int) -> PartitionPlan:
    """Seeded shuffle dealt into shards whose sizes differ by at most one."""
    if clients < 1:
        raise ConfigurationError(f"need at least 1 client, got {clients}")
    rng = rng_for(seed, "partition", "iid", dataset.name)
    order = dataset.train_idx[rng.permutation(dataset.train_idx.size)]
    shards = tuple(np.sort(s) for s in np.array_split(order, clients))
    return PartitionPlan(dataset.name, "iid", 0.0, seed, shards)


def partition_lda(dataset: Dataset, clients: int, alpha: float, seed: int) -> PartitionPlan:
    """Class-wise Dirichlet split with largest-remainder rounding.

    Redraws the whole plan (bounded retries) whenever some client would end
    up with an empty shard, so downstream shard-size weighting is always
    well-defined.
    """
    if clients < 1:
        raise ConfigurationError(f"need at least 1 client, got {clients}")
    if alpha <= 0:
        raise ConfigurationError(f"concentration alpha must be positive, got {alpha}")
    train_labels = dataset.labels[dataset.train_idx]
    present = np.unique(train_labels)
    for attempt in range(LDA_MAX_RETRIES):
        rng = rng_for(seed, "partition", "lda", dataset.name, attempt)
        buckets: list[list[np.ndarray]] = [[] for _ in range(clients)]
        for c in present:
            idx = dataset.train_idx[np.flatnonzero(train_labels == c)]
            idx = idx[rng.permutation(idx.size)]
            proportions = rng.dirichlet(np.full(clients, alpha))
            counts = _largest_remainder(proportions, idx.size)
            offsets = np.concatenate([[0], np.cumsum(counts)])
            for i in range(clients):
                buckets[i].append(idx[offsets[i]:offsets[i + 1]])
        shards = tuple(np.sort(np.concatenate(b)) for b in buckets)
        if all(s.size >= 1 for s in shards):
            return PartitionPlan(dataset.name, "lda", alpha, seed, shards)
    raise PartitionError(
        f"could not give every client >= 1 sample for {dataset.name!r} after "
        f"{LDA_MAX_RETRIES} draws (clients={clients}, alpha={alpha}); "
        "use more data or a larger alpha")


def _largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation summing to ``total``; remainders win by size, then index."""
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    shortfall = total - int(counts.sum())
    if shortfall:
        remainders = raw - counts
        winners = np.argsort(-remainders, kind="stable")[:shortfall]
        counts[winners] += 1
    return counts
