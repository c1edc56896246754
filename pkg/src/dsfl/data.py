"""Datasets, open/private splitting, client partitioning, round sampling.

Samples are stored as columns: a dataset with I samples of dimension N_S
is an N_S x I matrix. The open dataset carries no labels by construction,
which is what keeps the distillation protocols honest; tests that want
the hidden ground truth recompute the split indices via split_indices.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .seeding import derive_seed

log = logging.getLogger("dsfl")


class IdxFormatError(ValueError):
    """An IDX file failed to parse; the message names file and offset."""


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Feature columns plus integer class labels."""

    samples: np.ndarray   # N_S x I, float32
    labels: np.ndarray    # I, int64 in [0, n_classes)
    n_classes: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        if samples.ndim != 2:
            raise ValueError("samples must be a 2-d matrix, one column per sample")
        if labels.ndim != 1 or labels.size != samples.shape[1]:
            raise ValueError("labels length must equal the sample column count")
        if self.n_classes < 1:
            raise ValueError("n_classes must be positive")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValueError("labels must lie in [0, n_classes)")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "labels", labels)

    @property
    def n_features(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    def one_hot(self) -> np.ndarray:
        """n_classes x I float32 indicator columns."""
        return one_hot(self.labels, self.n_classes)

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.samples[:, idx], self.labels[idx], self.n_classes)


@dataclass(frozen=True, eq=False)
class UnlabeledDataset:
    """Feature columns only; the shared open data."""

    samples: np.ndarray   # N_S x I_o, float32

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim != 2:
            raise ValueError("samples must be a 2-d matrix, one column per sample")
        object.__setattr__(self, "samples", samples)

    @property
    def n_features(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    def subset(self, indices) -> "UnlabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return UnlabeledDataset(self.samples[:, idx])


@dataclass(frozen=True)
class PartitionPlan:
    """Assignment of private-sample indices to clients."""

    assignments: tuple   # tuple of int64 arrays, one per client
    mode: str            # "iid" or "noniid_shards"
    shards_per_client: int | None = None
    dropped: int = 0     # leftover samples outside the shard grid

    @property
    def n_clients(self) -> int:
        return len(self.assignments)


@dataclass(frozen=True)
class RoundIndexSet:
    """The shared open-data indices o_r for one round."""

    round: int
    indices: np.ndarray  # distinct int64 indices into the open dataset


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((n_classes, labels.size), dtype=np.float32)
    out[labels, np.arange(labels.size)] = 1.0
    return out


# ---------------------------------------------------------------------------
# IDX ingestion

_IMAGE_MAGIC = 0x00000803
_LABEL_MAGIC = 0x00000801


def _read_u32(buf: bytes, offset: int, path) -> int:
    if offset + 4 > len(buf):
        raise IdxFormatError(f"{path}: truncated at offset {offset}, expected 4 more bytes")
    return int.from_bytes(buf[offset:offset + 4], "big")


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Parse an IDX image/label file pair (big-endian binary format).

    Image files: magic 0x00000803, dims [count, rows, cols], then
    count*rows*cols unsigned bytes, row-major per image. Label files:
    magic 0x00000801, dims [count], then count unsigned bytes. Pixels are
    scaled to [0, 1] by dividing by 255.
    """
    with open(images_path, "rb") as fh:
        img_buf = fh.read()
    with open(labels_path, "rb") as fh:
        lab_buf = fh.read()

    magic = _read_u32(img_buf, 0, images_path)
    if magic != _IMAGE_MAGIC:
        raise IdxFormatError(
            f"{images_path}: bad magic 0x{magic:08x} at offset 0, expected 0x{_IMAGE_MAGIC:08x}"
        )
    count = _read_u32(img_buf, 4, images_path)
    rows = _read_u32(img_buf, 8, images_path)
    cols = _read_u32(img_buf, 12, images_path)
    need = 16 + count * rows * cols
    if len(img_buf) < need:
        raise IdxFormatError(
            f"{images_path}: truncated at offset {len(img_buf)}, expected {need} bytes"
        )

    magic = _read_u32(lab_buf, 0, labels_path)
    if magic != _LABEL_MAGIC:
        raise IdxFormatError(
            f"{labels_path}: bad magic 0x{magic:08x} at offset 0, expected 0x{_LABEL_MAGIC:08x}"
        )
    lab_count = _read_u32(lab_buf, 4, labels_path)
    if len(lab_buf) < 8 + lab_count:
        raise IdxFormatError(
            f"{labels_path}: truncated at offset {len(lab_buf)}, expected {8 + lab_count} bytes"
        )
    if lab_count != count:
        raise IdxFormatError(
            f"{images_path} has {count} images but {labels_path} has {lab_count} labels"
        )

    pixels = np.frombuffer(img_buf, dtype=np.uint8, count=count * rows * cols, offset=16)
    samples = (pixels.astype(np.float32) / 255.0).reshape(count, rows * cols).T
    labels = np.frombuffer(lab_buf, dtype=np.uint8, count=count, offset=8).astype(np.int64)
    n_classes = int(labels.max()) + 1 if count else 1
    return LabeledDataset(samples, labels, n_classes)


# ---------------------------------------------------------------------------
# Synthetic data

def class_means(n_classes: int, n_features: int) -> np.ndarray:
    """Deterministic cluster centers with pairwise distance at least 1.

    Class c sits on axis (c mod n_features) at radius 1/sqrt(2) + c//n_features,
    so two classes on different axes are exactly unit-separated at the first
    ring and further apart beyond it. Seed-independent on purpose: train and
    test sets drawn with different seeds share the same clusters.
    """
    means = np.zeros((n_features, n_classes))
    for c in range(n_classes):
        means[c % n_features, c] = 1.0 / np.sqrt(2.0) + c // n_features
    return means


def synth_generate(n_classes: int, n_features: int, n_per_class: int,
                   spread: float, seed: int) -> LabeledDataset:
    """Balanced isotropic Gaussian clusters around class_means.

    Samples are laid out class-block by class-block (labels sorted), with
    each block's noise drawn in one deterministic call.
    """
    if n_classes < 1 or n_features < 1 or n_per_class < 1:
        raise ValueError("counts must be at least 1")
    if spread <= 0:
        raise ValueError("spread must be positive")
    rng = np.random.default_rng(seed)
    means = class_means(n_classes, n_features)
    blocks = []
    for c in range(n_classes):
        noise = rng.standard_normal((n_features, n_per_class))
        blocks.append(means[:, c:c + 1] + spread * noise)
    samples = np.concatenate(blocks, axis=1).astype(np.float32)
    labels = np.repeat(np.arange(n_classes, dtype=np.int64), n_per_class)
    return LabeledDataset(samples, labels, n_classes)


# ---------------------------------------------------------------------------
# Open/private split and client partitions

def split_indices(n_total: int, n_open: int, n_private: int, seed: int):
    """The deterministic index selection behind split_open_private.

    Exposed so diagnostics can recover the discarded open-set labels; the
    protocol-facing open dataset never carries them.
    """
    if n_open < 0 or n_private < 0 or n_open + n_private > n_total:
        raise ValueError(
            f"split sizes {n_open}+{n_private} exceed dataset size {n_total}"
        )
    perm = np.random.default_rng(seed).permutation(n_total)
    return perm[:n_open], perm[n_open:n_open + n_private]


def split_open_private(ds: LabeledDataset, n_open: int, n_private: int,
                       seed: int) -> tuple[UnlabeledDataset, LabeledDataset]:
    """Disjoint uniform split; labels of the open part are discarded."""
    open_idx, priv_idx = split_indices(ds.n_samples, n_open, n_private, seed)
    open_ds = UnlabeledDataset(ds.samples[:, open_idx])
    return open_ds, ds.subset(priv_idx)


def partition_iid(ds: LabeledDataset, n_clients: int, seed: int) -> PartitionPlan:
    """Uniform shuffle chopped into near-equal (size +-1) client lists."""
    if n_clients < 1:
        raise ValueError("need at least one client")
    if n_clients > ds.n_samples:
        raise ValueError(f"{n_clients} clients but only {ds.n_samples} samples")
    perm = np.random.default_rng(seed).permutation(ds.n_samples)
    parts = np.array_split(perm, n_clients)
    return PartitionPlan(tuple(np.sort(p).astype(np.int64) for p in parts), "iid")


def partition_noniid_shards(ds: LabeledDataset, n_clients: int,
                            shards_per_client: int, seed: int) -> PartitionPlan:
    """Label-sorted contiguous shards dealt to clients by a seeded permutation.

    The private data is stably sorted by (label, original index) and cut
    into n_clients * shards_per_client equal shards; each client receives
    shards_per_client of them, so it ends up holding samples from only a
    few classes. Samples beyond the equal-shard grid are dropped and the
    count is logged and recorded on the plan.
    """
    if n_clients < 1:
        raise ValueError("need at least one client")
    if shards_per_client < 1:
        raise ValueError("shards_per_client must be at least 1")
    n_shards = n_clients * shards_per_client
    shard_size = ds.n_samples // n_shards
    if shard_size < 1:
        raise ValueError(
            f"{ds.n_samples} samples cannot fill {n_shards} shards"
        )
    order = np.argsort(ds.labels, kind="stable")
    used = n_shards * shard_size
    dropped = ds.n_samples - used
    if dropped:
        log.info("non-iid partition drops %d leftover samples", dropped)
    shards = order[:used].reshape(n_shards, shard_size)
    perm = np.random.default_rng(seed).permutation(n_shards)
    assignments = []
    for k in range(n_clients):
        mine = perm[k * shards_per_client:(k + 1) * shards_per_client]
        assignments.append(np.concatenate([shards[s] for s in mine]).astype(np.int64))
    return PartitionPlan(tuple(assignments), "noniid_shards", shards_per_client, dropped)


def sample_round_indices(n_open: int, size: int, round_no: int, seed: int) -> RoundIndexSet:
    """Uniform without-replacement draw shared by server and clients.

    Depends on (seed, round) only, so every party that knows the run seed
    reconstructs the same o_r.
    """
    if size > n_open:
        raise ValueError(f"cannot draw {size} of {n_open} open samples")
    rng = np.random.default_rng(derive_seed(seed, "open-round", round_no))
    idx = rng.choice(n_open, size=size, replace=False).astype(np.int64)
    return RoundIndexSet(round_no, idx)
