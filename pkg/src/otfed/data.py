"""Datasets, client partitioning, and the IDX file reader.

Synthetic tasks are Gaussian clusters around seeded unit-norm class means;
the feature-shift variant translates each domain by its own constant
offset, which moves the feature distribution while preserving the class
geometry inside every domain. Partitioners cover iid dealing, pathological
label skew (n classes per client), Dirichlet label skew, and domain-based
feature shift.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetError
from .linalg import Matrix
from .seeding import derive_seed, rng_for

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledDataset:
    """Feature matrix (N, d) with integer labels in [0, class_count)."""

    features: Matrix
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        if self.features.ndim != 2:
            raise DatasetError(f"features must be 2-D, got ndim={self.features.ndim}")
        if self.features.shape[0] != self.labels.shape[0]:
            raise DatasetError(
                f"{self.features.shape[0]} feature rows vs {self.labels.shape[0]} labels"
            )
        if self.features.shape[0] < 1:
            raise DatasetError("dataset must contain at least one sample")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DatasetError(
                f"labels must lie in [0, {self.class_count}), got "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, indices: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(
            self.features[indices], self.labels[indices], self.class_count
        )


@dataclass(frozen=True)
class PartitionSpec:
    """How a dataset is split across clients.

    scheme is one of iid / pathological / dirichlet / feature_shift; only the
    parameters of the chosen scheme are consulted.
    """

    scheme: str
    client_count: int
    seed: int
    classes_per_client: int | None = None
    beta: float | None = None
    domains: int | None = None
    shift_scale: float | None = None

    def __post_init__(self):
        if self.scheme not in ("iid", "pathological", "dirichlet", "feature_shift"):
            raise ConfigError(f"unknown partition scheme {self.scheme!r}")
        if self.client_count < 1:
            raise ConfigError(f"client_count must be >= 1, got {self.client_count}")
        if self.scheme == "pathological":
            if self.classes_per_client is None or self.classes_per_client < 1:
                raise ConfigError("pathological partition needs classes_per_client >= 1")
        if self.scheme == "dirichlet":
            if self.beta is None or not self.beta > 0:
                raise ConfigError("dirichlet partition needs beta > 0")
        if self.scheme == "feature_shift":
            if self.domains is None or self.domains < 1:
                raise ConfigError("feature_shift partition needs domains >= 1")
            if self.shift_scale is None or self.shift_scale < 0:
                raise ConfigError("feature_shift partition needs shift_scale >= 0")


@dataclass(frozen=True)
class TaskConfig:
    """Base data source for an experiment (synthetic clusters or IDX files)."""

    kind: str = "synthetic"
    class_count: int = 10
    dim: int = 16
    samples_per_class: int = 100
    spread: float = 0.3
    images: str | None = None
    labels: str | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "idx"):
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.kind == "synthetic":
            if self.class_count < 2:
                raise ConfigError(f"need >= 2 classes, got {self.class_count}")
            if self.dim < 1 or self.samples_per_class < 1:
                raise ConfigError("dim and samples_per_class must be >= 1")
            if not self.spread > 0:
                raise ConfigError(f"spread must be positive, got {self.spread}")
        else:
            if not self.images or not self.labels:
                raise ConfigError("idx task needs both images and labels paths")


def gen_synthetic(
    class_count: int, dim: int, samples_per_class: int, spread: float, seed: int
) -> LabeledDataset:
    """Gaussian clusters around seeded random unit-norm class means.

    Every class contributes exactly samples_per_class rows; a final seeded
    shuffle keeps the dataset from being label-blocked.
    """
    rng = rng_for(seed, "synthetic")
    means = rng.normal(size=(class_count, dim))
    means /= np.sqrt(np.sum(means * means, axis=1, keepdims=True))
    feats = np.concatenate(
        [means[c] + spread * rng.normal(size=(samples_per_class, dim))
         for c in range(class_count)]
    )
    labels = np.repeat(np.arange(class_count), samples_per_class)
    order = rng.permutation(feats.shape[0])
    return LabeledDataset(feats[order], labels[order], class_count)


def build_dataset(task: TaskConfig, seed: int) -> LabeledDataset:
    if task.kind == "synthetic":
        return gen_synthetic(
            task.class_count, task.dim, task.samples_per_class, task.spread, seed
        )
    return load_idx(task.images, task.labels)


def _domain_shift(dim: int, domain: int, shift_scale: float, shift_seed: int):
    """Constant translation for one domain: shift_scale times a unit direction."""
    direction = rng_for(shift_seed, "shift", domain).normal(size=dim)
    norm = np.sqrt(np.sum(direction * direction))
    return shift_scale * direction / norm if norm > 0 else np.zeros(dim)


def gen_feature_shift(
    base: TaskConfig, domains: int, shift_scale: float, shift_seed: int, seed: int = 0
) -> list[LabeledDataset]:
    """One dataset per domain: the base task under a per-domain translation."""
    if domains < 1:
        raise ConfigError(f"domains must be >= 1, got {domains}")
    ds = build_dataset(base, seed)
    out = []
    for d in range(domains):
        shift = _domain_shift(ds.features.shape[1], d, shift_scale, shift_seed)
        out.append(LabeledDataset(ds.features + shift, ds.labels, ds.class_count))
    return out


def partition(data: LabeledDataset, spec: PartitionSpec) -> tuple[list[LabeledDataset], np.ndarray]:
    """Split a dataset into per-client shards plus aggregation weights.

    Weights are shard sizes over the total. Every client receives at least
    one sample; the label-skew schemes preserve the sample multiset exactly.
    """
    if spec.scheme == "iid":
        shards = _partition_iid(data, spec)
    elif spec.scheme == "pathological":
        shards = _partition_pathological(data, spec)
    elif spec.scheme == "dirichlet":
        shards = _partition_dirichlet(data, spec)
    else:
        shards = _partition_feature_shift(data, spec)
    sizes = np.array([len(s) for s in shards], dtype=np.float64)
    if sizes.min() < 1:
        raise DatasetError("partition produced an empty client shard")
    return shards, sizes / sizes.sum()


def _partition_iid(data: LabeledDataset, spec: PartitionSpec) -> list[LabeledDataset]:
    if len(data) < spec.client_count:
        raise DatasetError(
            f"{len(data)} samples cannot cover {spec.client_count} clients"
        )
    order = rng_for(spec.seed, "iid").permutation(len(data))
    return [data.subset(np.sort(order[i :: spec.client_count]))
            for i in range(spec.client_count)]


def _partition_pathological(data: LabeledDataset, spec: PartitionSpec) -> list[LabeledDataset]:
    n_per = spec.classes_per_client
    classes = data.class_count
    clients = spec.client_count
    if n_per > classes:
        raise ConfigError(
            f"classes_per_client {n_per} exceeds class count {classes}"
        )
    if clients * n_per < classes:
        raise ConfigError(
            f"{clients} clients x {n_per} classes cannot claim all {classes} classes"
        )
    rng = rng_for(spec.seed, "pathological")
    shuffled = rng.permutation(classes)
    # deal the shuffled class cycle into n_per consecutive slots per client;
    # slots of one client are distinct because n_per <= classes
    claims: list[list[int]] = [[] for _ in range(classes)]
    for i in range(clients):
        for k in range(n_per):
            cls = int(shuffled[(i * n_per + k) % classes])
            claims[cls].append(i)
    owners = [sorted(set(c)) for c in claims]
    shard_indices: list[list[np.ndarray]] = [[] for _ in range(clients)]
    for cls in range(classes):
        idx = np.flatnonzero(data.labels == cls)
        idx = idx[rng.permutation(idx.size)]
        pieces = np.array_split(idx, len(owners[cls]))
        for owner, piece in zip(owners[cls], pieces):
            shard_indices[owner].append(piece)
    return [
        data.subset(np.sort(np.concatenate(parts)))
        for parts in shard_indices
    ]


def _partition_dirichlet(data: LabeledDataset, spec: PartitionSpec) -> list[LabeledDataset]:
    clients = spec.client_count
    rng = rng_for(spec.seed, "dirichlet")
    for _ in range(100):
        shard_indices: list[list[np.ndarray]] = [[] for _ in range(clients)]
        for cls in range(data.class_count):
            idx = np.flatnonzero(data.labels == cls)
            idx = idx[rng.permutation(idx.size)]
            props = rng.dirichlet(np.full(clients, spec.beta))
            counts = _largest_remainder(props, idx.size)
            start = 0
            for i in range(clients):
                shard_indices[i].append(idx[start : start + counts[i]])
                start += counts[i]
        sizes = [sum(p.size for p in parts) for parts in shard_indices]
        if min(sizes) >= 1:
            return [
                data.subset(np.sort(np.concatenate(parts)))
                for parts in shard_indices
            ]
    raise DatasetError(
        "dirichlet partition left a client empty in 100 draws; "
        "increase beta or the dataset size"
    )


def _largest_remainder(props: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to `total`, proportional to `props`."""
    raw = props * total
    counts = np.floor(raw).astype(int)
    short = total - int(counts.sum())
    if short > 0:
        # ties go to the lowest index: argsort is stable on the negated keys
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _partition_feature_shift(data: LabeledDataset, spec: PartitionSpec) -> list[LabeledDataset]:
    shards = _partition_iid(data, spec)
    shift_seed = derive_seed(spec.seed, "feature-shift")
    out = []
    for i, shard in enumerate(shards):
        shift = _domain_shift(
            shard.features.shape[1], i % spec.domains, spec.shift_scale, shift_seed
        )
        out.append(LabeledDataset(shard.features + shift, shard.labels,
                                  shard.class_count))
    return out


def split_train_test(
    data: LabeledDataset, seed: int, train_fraction: float = 0.8
) -> tuple[LabeledDataset, LabeledDataset]:
    """Seeded split keeping at least one sample on each side."""
    n = len(data)
    if n < 2:
        raise DatasetError("need at least 2 samples to split into train and test")
    order = rng_for(seed, "split").permutation(n)
    n_train = min(max(int(round(train_fraction * n)), 1), n - 1)
    return data.subset(np.sort(order[:n_train])), data.subset(np.sort(order[n_train:]))


def load_idx(images_path: str | Path, labels_path: str | Path) -> LabeledDataset:
    """Read an IDX image/label pair into flat [0, 1] features.

    Big-endian headers; magic 0x00000803 for images and 0x00000801 for
    labels. Bad magic, truncated payloads, and image/label count mismatches
    each raise a distinct DatasetError.
    """
    img_raw = Path(images_path).read_bytes()
    if len(img_raw) < 16:
        raise DatasetError(f"truncated IDX image file {images_path}: no header")
    magic, count, rows, cols = struct.unpack(">llll", img_raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise DatasetError(
            f"bad magic in {images_path}: {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}"
        )
    expected = count * rows * cols
    if len(img_raw) - 16 != expected:
        raise DatasetError(
            f"truncated IDX image file {images_path}: "
            f"{len(img_raw) - 16} pixel bytes, header promises {expected}"
        )
    pixels = np.frombuffer(img_raw, dtype=np.uint8, offset=16)

    lbl_raw = Path(labels_path).read_bytes()
    if len(lbl_raw) < 8:
        raise DatasetError(f"truncated IDX label file {labels_path}: no header")
    lmagic, lcount = struct.unpack(">ll", lbl_raw[:8])
    if lmagic != IDX_LABEL_MAGIC:
        raise DatasetError(
            f"bad magic in {labels_path}: {lmagic:#010x}, expected {IDX_LABEL_MAGIC:#010x}"
        )
    if len(lbl_raw) - 8 != lcount:
        raise DatasetError(
            f"truncated IDX label file {labels_path}: "
            f"{len(lbl_raw) - 8} label bytes, header promises {lcount}"
        )
    if count != lcount:
        raise DatasetError(
            f"image/label count mismatch: {count} images vs {lcount} labels"
        )
    labels = np.frombuffer(lbl_raw, dtype=np.uint8, offset=8).astype(np.int64)
    feats = (pixels.reshape(count, rows * cols) / 255.0).astype(np.float64)
    return LabeledDataset(feats, labels, int(labels.max()) + 1)


def write_idx(
    images_path: str | Path, labels_path: str | Path,
    images: np.ndarray, labels: np.ndarray,
) -> None:
    """Writer counterpart of load_idx; images are uint8 (N, rows, cols)."""
    if images.ndim != 3 or images.dtype != np.uint8:
        raise DatasetError(f"images must be uint8 (N, rows, cols), got "
                           f"{images.dtype} {images.shape}")
    if labels.shape != (images.shape[0],):
        raise DatasetError("one label per image required")
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">llll", IDX_IMAGE_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">ll", IDX_LABEL_MAGIC, n))
        fh.write(labels.astype(np.uint8).tobytes())
