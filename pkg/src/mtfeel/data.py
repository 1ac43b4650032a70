"""Dataset ingestion and device partitioning.

Two sources are supported: MNIST-style IDX files (``load_idx``) split into
label-restricted cohorts (``partition_mnist``), and synthetic Gaussian class
blobs (``synth_cohorts``) for desk-scale runs.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import DeviceShard

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class CapacityError(ValueError):
    pass


def _read_idx(path, magic: int, ndim: int):
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IdxFormatError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    payload = raw[header:]
    if len(payload) != expected:
        raise IdxFormatError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path):
    """Read an IDX image/label pair.

    Returns ``(features, labels)`` with features flattened per image and
    scaled to [0, 1].
    """
    images = _read_idx(images_path, IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return features, labels.astype(np.int64)


def write_idx(images_path, labels_path, images, labels):
    """Write uint8 ``images`` (n, rows, cols) and ``labels`` (n,) as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, r, c = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IMAGES_MAGIC, n, r, c) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", LABELS_MAGIC, len(labels)) + labels.tobytes())


@dataclass(frozen=True)
class CohortSpec:
    name: str
    device_count: int
    label_set: tuple
    samples_per_device: int = 100
    train_fraction: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "label_set", tuple(sorted({int(c) for c in self.label_set})))
        if self.device_count < 1:
            raise ValueError("device_count must be >= 1")
        if not self.label_set:
            raise ValueError("label_set must be non-empty")
        if self.samples_per_device < 2:
            raise ValueError("samples_per_device must be >= 2")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")

    @property
    def train_count(self) -> int:
        n = self.samples_per_device
        return min(max(int(round(self.train_fraction * n)), 1), n - 1)


def mnist_cohorts(samples_per_device: int = 100, train_fraction: float = 0.2):
    """The 30-device layout: A (digits 0-5, 12 devices), B (6-9, 12), C (3-7, 6)."""
    return [
        CohortSpec("A", 12, range(0, 6), samples_per_device, train_fraction),
        CohortSpec("B", 12, range(6, 10), samples_per_device, train_fraction),
        CohortSpec("C", 6, range(3, 8), samples_per_device, train_fraction),
    ]


def desk_cohorts(devices_per_cohort: int = 3, samples_per_device: int = 100,
                 train_fraction: float = 0.2):
    """Scaled-down version of ``mnist_cohorts`` with equal cohort sizes."""
    return [
        CohortSpec("A", devices_per_cohort, range(0, 6), samples_per_device, train_fraction),
        CohortSpec("B", devices_per_cohort, range(6, 10), samples_per_device, train_fraction),
        CohortSpec("C", devices_per_cohort, range(3, 8), samples_per_device, train_fraction),
    ]


@dataclass(frozen=True)
class FederationData:
    shards: tuple
    cohort_of: tuple
    n_classes: int = 10
    cohort_labels: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "shards", tuple(self.shards))
        object.__setattr__(self, "cohort_of", tuple(self.cohort_of))
        if len(self.shards) < 2:
            raise ValueError("a federation needs at least two devices")
        if len(self.cohort_of) != len(self.shards):
            raise ValueError("cohort_of must name a cohort for every shard")
        for shard, name in zip(self.shards, self.cohort_of):
            allowed = self.cohort_labels.get(name)
            if allowed is not None and not set(np.unique(shard.labels)) <= set(allowed):
                raise ValueError(f"shard labels escape cohort {name}'s label set")

    @property
    def N(self) -> int:
        return len(self.shards)

    @property
    def d_in(self) -> int:
        return self.shards[0].features.shape[1]

    @property
    def train_counts(self) -> np.ndarray:
        return np.array([s.train_count for s in self.shards])

    def same_cohort(self) -> np.ndarray:
        c = np.array(self.cohort_of)
        return c[:, None] == c[None, :]


def _blob_means(rng, n_means, d_in, separation, spread, max_tries=10_000):
    """Rejection-sample means pairwise at least ``separation`` apart."""
    for _ in range(max_tries):
        means = spread * rng.standard_normal((n_means, d_in))
        if n_means < 2:
            return means
        dist = np.linalg.norm(means[:, None] - means[None], axis=-1)
        if dist[np.triu_indices(n_means, 1)].min() >= separation:
            return means
    raise RuntimeError("could not place blob means; increase spread or d_in")


def synth_cohorts(specs, d_in: int, seed=0, n_classes: int = 10,
                  separation: float = 4.0, spread: float | None = None) -> FederationData:
    """Gaussian class blobs with per-cohort means.

    Every cohort gets its own mean for each of its labels (unit covariance,
    means within a cohort at least ``separation`` apart), so two cohorts that
    share a label still disagree on where that label lives.  Devices in the
    same cohort sample i.i.d. from the same blobs with uniformly drawn labels.
    """
    if d_in < 1:
        raise ValueError("d_in must be >= 1")
    specs = list(specs)
    if sum(s.device_count for s in specs) < 2:
        raise ValueError("need at least two devices in total")
    if spread is None:
        spread = separation
    rng = np.random.default_rng(seed)
    shards, cohort_of, cohort_labels = [], [], {}
    for spec in specs:
        labels = np.array(spec.label_set)
        if labels.max() >= n_classes:
            raise ValueError(f"cohort {spec.name} uses a label >= {n_classes}")
        means = _blob_means(rng, len(labels), d_in, separation, spread)
        cohort_labels[spec.name] = spec.label_set
        for _ in range(spec.device_count):
            pick = rng.integers(len(labels), size=spec.samples_per_device)
            X = means[pick] + rng.standard_normal((spec.samples_per_device, d_in))
            shards.append(DeviceShard(X, labels[pick], spec.train_count,
                                      spec.samples_per_device - spec.train_count, n_classes))
            cohort_of.append(spec.name)
    return FederationData(shards, cohort_of, n_classes, cohort_labels)


def partition_mnist(features, labels, specs, seed=0, n_classes: int = 10) -> FederationData:
    """Give each device ``samples_per_device`` samples of its cohort's digits.

    Draws are without replacement within a device; different devices may
    receive the same sample.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    shards, cohort_of, cohort_labels = [], [], {}
    for spec in specs:
        pool = np.flatnonzero(np.isin(labels, spec.label_set))
        if pool.size < spec.samples_per_device:
            raise CapacityError(
                f"cohort {spec.name}: {pool.size} samples with digits {spec.label_set}, "
                f"need {spec.samples_per_device} per device"
            )
        cohort_labels[spec.name] = spec.label_set
        for _ in range(spec.device_count):
            idx = rng.choice(pool, size=spec.samples_per_device, replace=False)
            shards.append(DeviceShard(features[idx], labels[idx], spec.train_count,
                                      spec.samples_per_device - spec.train_count, n_classes))
            cohort_of.append(spec.name)
    return FederationData(shards, cohort_of, n_classes, cohort_labels)


def replicate(shard: DeviceShard, copies: int) -> FederationData:
    """A federation of ``copies`` devices holding the same shard."""
    return FederationData([shard] * copies, ["all"] * copies, shard.n_classes)
