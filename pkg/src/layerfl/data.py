"""Dataset construction: synthetic blobs, CSV/IDX ingestion, Dirichlet partitioning."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, IngestionError, PartitionError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Immutable sample collection: inputs, integer labels, class count."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != self.inputs.shape[0]:
            raise ConfigurationError("label count does not match input rows")
        if len(self.labels) and self.labels.max() >= self.num_classes:
            raise ConfigurationError("label id outside num_classes")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, indices: np.ndarray, name: str = "") -> "Dataset":
        return Dataset(self.inputs[indices], self.labels[indices], self.num_classes, name)


@dataclass
class PartitionSpec:
    """Dirichlet label-skew partition over clients."""

    n_clients: int
    beta: float
    seed: int
    min_per_client: int = 20
    max_retries: int = 100

    def __post_init__(self):
        if self.n_clients < 2:
            raise ConfigurationError("partition needs at least 2 clients")
        if self.beta <= 0:
            raise ConfigurationError("beta must be > 0")
        if self.min_per_client < 1:
            raise ConfigurationError("min_per_client must be >= 1")


@dataclass
class ClientDataset:
    """One client's private train/test split plus the indices into the source."""

    client_id: int
    train: Dataset
    test: Dataset
    train_indices: np.ndarray
    test_indices: np.ndarray

    @property
    def m_k(self) -> int:
        return len(self.train)


def generate_synthetic(
    classes: int,
    dims: int,
    samples_per_class: int,
    class_separation: float,
    seed: int,
) -> Dataset:
    """Gaussian blobs with unit covariance.

    Class means are drawn at random and rescaled so the closest pair is
    exactly ``class_separation`` apart (all pairs are then at least that far).
    ``class_separation == 0`` collapses every mean onto the origin.
    """
    if classes < 2 or dims < 2:
        raise ConfigurationError("need classes >= 2 and dims >= 2")
    if class_separation < 0:
        raise ConfigurationError("class_separation must be >= 0")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((classes, dims))
    dists = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=-1)
    closest = dists[np.triu_indices(classes, k=1)].min()
    means *= class_separation / closest if closest > 0 else 0.0

    n = classes * samples_per_class
    labels = np.repeat(np.arange(classes), samples_per_class)
    inputs = means[labels] + rng.standard_normal((n, dims))
    order = rng.permutation(n)
    return Dataset(
        inputs[order].astype(np.float32),
        labels[order],
        classes,
        name=f"synthetic_c{classes}_d{dims}",
    )


def partition_dirichlet(ds: Dataset, spec: PartitionSpec) -> list[ClientDataset]:
    """Split a dataset into per-client train/test shards with Dirichlet label skew.

    For each class, client proportions are drawn from Dir(beta) and the class's
    samples are dealt out without replacement. Each client's pool is then split
    75/25 train/test, stratified by class. The draw is retried (fresh
    proportions) until every client's train shard reaches ``min_per_client``.
    """
    rng = np.random.default_rng(spec.seed)
    classes = ds.num_classes
    by_class = [np.flatnonzero(ds.labels == c) for c in range(classes)]

    for _ in range(spec.max_retries):
        shards: list[list[np.ndarray]] = [[] for _ in range(spec.n_clients)]
        for idxs in by_class:
            idxs = rng.permutation(idxs)
            props = rng.dirichlet(np.full(spec.n_clients, spec.beta))
            cuts = (np.cumsum(props)[:-1] * len(idxs)).astype(int)
            for k, chunk in enumerate(np.split(idxs, cuts)):
                shards[k].append(chunk)
        pools = [np.concatenate(s) if s else np.array([], dtype=int) for s in shards]
        clients = [_split_pool(ds, k, pool, rng) for k, pool in enumerate(pools)]
        if all(c.m_k >= spec.min_per_client for c in clients):
            return clients

    raise PartitionError(
        f"could not give every client a train shard of >= {spec.min_per_client} "
        f"samples after {spec.max_retries} draws "
        f"(n_clients={spec.n_clients}, beta={spec.beta}, dataset={len(ds)})"
    )


def _split_pool(
    ds: Dataset, client_id: int, pool: np.ndarray, rng: np.random.Generator
) -> ClientDataset:
    """75/25 train/test split of a client pool, stratified per class.

    Classes with a single sample go entirely to train so no sample is dropped.
    """
    train_parts, test_parts = [], []
    for c in np.unique(ds.labels[pool]):
        cls = pool[ds.labels[pool] == c]
        cls = rng.permutation(cls)
        n_test = max(1, int(len(cls) * 0.25)) if len(cls) >= 2 else 0
        test_parts.append(cls[:n_test])
        train_parts.append(cls[n_test:])
    train_idx = np.sort(np.concatenate(train_parts)) if train_parts else np.array([], dtype=int)
    test_idx = np.sort(np.concatenate(test_parts)) if test_parts else np.array([], dtype=int)
    return ClientDataset(
        client_id=client_id,
        train=ds.subset(train_idx, name=f"{ds.name}_c{client_id}_train"),
        test=ds.subset(test_idx, name=f"{ds.name}_c{client_id}_test"),
        train_indices=train_idx,
        test_indices=test_idx,
    )


# ---------------------------------------------------------------------------
# File ingestion


def load_csv(path, feature_cols: list[str], label_col: str) -> Dataset:
    """Read a headered CSV into a dataset; features stay in their raw scale."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise IngestionError(f"{path}: empty file, expected a header row")
        missing = [c for c in [*feature_cols, label_col] if c not in reader.fieldnames]
        if missing:
            raise IngestionError(f"{path}: missing columns {missing}")
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append([float(row[c]) for c in feature_cols])
                labels.append(int(row[label_col]))
            except (TypeError, ValueError) as exc:
                raise IngestionError(f"{path}: malformed row at line {lineno}: {exc}") from exc
    if not rows:
        raise IngestionError(f"{path}: no data rows")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0:
        raise IngestionError(f"{path}: negative label id")
    return Dataset(
        np.asarray(rows, dtype=np.float32), labels, int(labels.max()) + 1, name=str(path)
    )


def save_csv(path, ds: Dataset, feature_cols: list[str], label_col: str) -> None:
    if ds.inputs.ndim != 2 or ds.inputs.shape[1] != len(feature_cols):
        raise ConfigurationError("feature column names do not match input width")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([*feature_cols, label_col])
        for x, y in zip(ds.inputs, ds.labels):
            writer.writerow([*(repr(float(v)) for v in x), int(y)])


def load_idx(images_path, labels_path) -> Dataset:
    """Read big-endian IDX image/label files; pixels scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IngestionError(
            f"item count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels"
        )
    inputs = (images.astype(np.float32) / 255.0).reshape(images.shape[0], 1, *images.shape[1:])
    labels = labels.astype(np.int64)
    return Dataset(inputs, labels, int(labels.max()) + 1, name=str(images_path))


def _read_idx(path, expected_magic: int) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IngestionError(f"{path}: truncated header at offset {len(raw)}")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IngestionError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IngestionError(f"{path}: truncated dimension header at offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    expected = int(np.prod(dims))
    payload = np.frombuffer(raw, dtype=np.uint8, offset=header_len)
    if payload.size != expected:
        raise IngestionError(
            f"{path}: payload holds {payload.size} bytes, header declares {expected} "
            f"(offset {header_len})"
        )
    return payload.reshape(dims)


def save_idx(images_path, labels_path, ds: Dataset) -> None:
    """Write a dataset whose inputs are [0, 1] images back to IDX byte files."""
    imgs = np.round(np.clip(ds.inputs, 0, 1) * 255.0).astype(np.uint8)
    imgs = imgs.reshape(imgs.shape[0], *imgs.shape[2:])  # drop channel axis
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        fh.write(struct.pack(f">{imgs.ndim}I", *imgs.shape))
        fh.write(imgs.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_LABELS_MAGIC))
        fh.write(struct.pack(">I", len(ds.labels)))
        fh.write(ds.labels.astype(np.uint8).tobytes())
