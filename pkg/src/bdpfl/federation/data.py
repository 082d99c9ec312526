"""Datasets, client shards, partitioners and loaders."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from bdpfl.mechanism import RngStream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.offset = offset


@dataclass
class DataSet:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D array")
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels differ in length")

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def dimension(self) -> int:
        return self.features.shape[1]

    def subset(self, index) -> "DataSet":
        return DataSet(self.features[index], self.labels[index])


@dataclass
class ClientShard:
    client_id: int
    data: DataSet
    batch_size: int
    participation: float

    def __post_init__(self):
        if not 1 <= self.batch_size <= self.n_local:
            raise ValueError(
                f"client {self.client_id}: batch size {self.batch_size} "
                f"outside [1, {self.n_local}]")
        if not 0.0 < self.participation <= 1.0:
            raise ValueError(f"participation must lie in (0, 1], got {self.participation}")

    @property
    def n_local(self) -> int:
        return self.data.n


def synth_data(classes: int, dimension: int, per_class: int | Sequence[int],
               separation: float, rng: RngStream, noise: float = 1.0) -> DataSet:
    """Gaussian class clusters.

    Class means are orthogonal and scaled so that every pair lies
    ``separation`` apart when ``classes <= dimension``; otherwise they are
    random directions at radius ``separation / 2``. Points get isotropic
    noise of standard deviation ``noise``. Rows come out shuffled.
    """
    if classes < 2 or dimension < 2:
        raise ValueError("need at least 2 classes and 2 dimensions")
    counts = [per_class] * classes if np.isscalar(per_class) else list(per_class)
    if len(counts) != classes:
        raise ValueError("per_class must give one count per class")
    raw = rng.normal((dimension, classes))
    if classes <= dimension:
        basis, _ = np.linalg.qr(raw)
        means = basis.T * (separation / math.sqrt(2.0))
    else:
        means = (raw / np.linalg.norm(raw, axis=0)).T * (separation / 2.0)
    labels = np.repeat(np.arange(classes), counts)
    features = means[labels] + noise * rng.normal((len(labels), dimension))
    order = rng.permutation(len(labels))
    return DataSet(features[order], labels[order])


def split_train_test(data: DataSet, n_test: int, rng: RngStream) -> tuple[DataSet, DataSet]:
    order = rng.permutation(data.n)
    return data.subset(order[n_test:]), data.subset(order[:n_test])


def partition_iid(data: DataSet, n_clients: int, rng: RngStream, batch_size: int = 1,
                  participation: float = 1.0) -> list[ClientShard]:
    """Uniform random partition; shard sizes differ by at most one."""
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if n_clients > data.n:
        raise ValueError(f"{n_clients} clients but only {data.n} examples")
    parts = np.array_split(rng.permutation(data.n), n_clients)
    return [ClientShard(i, data.subset(np.sort(p)), min(batch_size, len(p)), participation)
            for i, p in enumerate(parts)]


def partition_shards(data: DataSet, n_clients: int, shards_per_client: int, shard_size: int,
                     rng: RngStream, batch_size: int = 1,
                     participation: float = 1.0) -> list[ClientShard]:
    """Label-homogeneous shards dealt out at random, ``shards_per_client`` each.

    Each class is shuffled and cut into whole shards of ``shard_size``;
    leftovers that do not fill a shard are dropped.
    """
    if n_clients < 1 or shards_per_client < 1 or shard_size < 1:
        raise ValueError("clients, shards per client and shard size must be >= 1")
    needed = n_clients * shards_per_client
    if needed * shard_size > data.n:
        raise ValueError(
            f"insufficient data: {needed} shards of {shard_size} need "
            f"{needed * shard_size} examples, have {data.n}")
    shards = []
    for label in np.unique(data.labels):
        idx = np.flatnonzero(data.labels == label)
        idx = idx[rng.permutation(len(idx))]
        for s in range(len(idx) // shard_size):
            shards.append(idx[s * shard_size:(s + 1) * shard_size])
    if len(shards) < needed:
        raise ValueError(
            f"insufficient data: only {len(shards)} label-homogeneous shards, need {needed}")
    pick = rng.permutation(len(shards))[:needed]
    out = []
    for c in range(n_clients):
        idx = np.concatenate([shards[j] for j in pick[c * shards_per_client:(c + 1) * shards_per_client]])
        out.append(ClientShard(c, data.subset(np.sort(idx)), min(batch_size, len(idx)),
                               participation))
    return out


def _read_header(path, blob: bytes, magic: int, ndims: int) -> list[int]:
    if len(blob) < 4 + 4 * ndims:
        raise IdxFormatError(path, len(blob), "truncated header")
    (found,) = struct.unpack_from(">I", blob, 0)
    if found != magic:
        raise IdxFormatError(path, 0, f"bad magic 0x{found:08x}, expected 0x{magic:08x}")
    return list(struct.unpack_from(f">{ndims}I", blob, 4))


def load_idx(images_path, labels_path) -> DataSet:
    """Read an IDX image file and its label file; pixels scaled to [0, 1]."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    img = images_path.read_bytes()
    count, rows, cols = _read_header(images_path, img, IDX_IMAGES_MAGIC, 3)
    expected = 16 + count * rows * cols
    if len(img) != expected:
        raise IdxFormatError(images_path, min(len(img), expected),
                             f"expected {expected} bytes, file has {len(img)}")
    lab = labels_path.read_bytes()
    (n_labels,) = _read_header(labels_path, lab, IDX_LABELS_MAGIC, 1)
    if n_labels != count:
        raise IdxFormatError(labels_path, 4, f"{n_labels} labels for {count} images")
    if len(lab) != 8 + n_labels:
        raise IdxFormatError(labels_path, min(len(lab), 8 + n_labels),
                             f"expected {8 + n_labels} bytes, file has {len(lab)}")
    pixels = np.frombuffer(img, dtype=np.uint8, offset=16).reshape(count, rows * cols)
    labels = np.frombuffer(lab, dtype=np.uint8, offset=8)
    return DataSet(pixels.astype(float) / 255.0, labels.astype(np.int64))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images ``(count, rows, cols)`` and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    count, rows, cols = images.shape
    Path(images_path).write_bytes(
        struct.pack(">IIII", IDX_IMAGES_MAGIC, count, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels))
                                  + labels.tobytes())
