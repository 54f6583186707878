"""Dataset ingestion (IDX binaries, bundled digits, synthetic blobs) and client partitioning."""
from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from powerdp.errors import BadMagicError, TruncatedPayloadError, UnsupportedTypeError

IDX_UBYTE = 0x08
LABELS_MAGIC = 0x00000801
IMAGES_MAGIC = 0x00000803


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray  # N x d, values in [0, 1]
    labels: np.ndarray  # N class indices
    num_classes: int

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on the sample count")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class Partition:
    client_indices: list[np.ndarray]

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)


def parse_idx(data: bytes) -> np.ndarray:
    """Decode a big-endian IDX buffer of unsigned bytes.

    1-D payloads (label files) come back as int64; higher-rank payloads
    (image files) as float64 scaled to [0, 1].
    """
    if len(data) < 4:
        raise TruncatedPayloadError("buffer shorter than the 4-byte magic")
    zero, dtype, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0 or ndim == 0:
        raise BadMagicError(f"bad IDX magic 0x{int.from_bytes(data[:4], 'big'):08x}")
    if dtype != IDX_UBYTE:
        raise UnsupportedTypeError(f"IDX element type 0x{dtype:02x} is not unsigned byte")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise TruncatedPayloadError("buffer ends inside the dimension header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = math.prod(dims)
    payload = np.frombuffer(data, dtype=np.uint8, count=min(count, len(data) - header), offset=header)
    if payload.size < count:
        raise TruncatedPayloadError(f"payload has {payload.size} bytes, header promises {count}")
    arr = payload.reshape(dims)
    if ndim == 1:
        return arr.astype(np.int64)
    return arr.astype(np.float64) / 255.0


def write_idx(arr: np.ndarray) -> bytes:
    """Encode an array as IDX unsigned bytes; float input is taken as [0, 1] intensities."""
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        arr = np.rint(arr * 255.0)
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValueError("values do not fit in an unsigned byte")
    raw = arr.astype(np.uint8)
    head = struct.pack(">HBB", 0, IDX_UBYTE, raw.ndim) + struct.pack(f">{raw.ndim}I", *raw.shape)
    return head + raw.tobytes()


def load_idx(path) -> np.ndarray:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return parse_idx(fh.read())


def load_mnist(images_path, labels_path, extra: tuple | None = None) -> Dataset:
    """MNIST from IDX files; ``extra=(images, labels)`` appends a second pair (e.g. the test files)."""
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if extra is not None:
        images = np.concatenate([images, load_idx(extra[0])])
        labels = np.concatenate([labels, load_idx(extra[1])])
    return Dataset(images.reshape(images.shape[0], -1), labels, 10)


def load_digits(pool: int = 1) -> Dataset:
    """The 8x8 handwritten digits shipped with scikit-learn, scaled to [0, 1].

    ``pool > 1`` average-pools the image by that factor (8x8 -> 4x4 for 2).
    """
    from sklearn.datasets import load_digits as _sk_digits

    bunch = _sk_digits()
    images = bunch.images / 16.0
    if pool > 1:
        n, h, w = images.shape
        images = images.reshape(n, h // pool, pool, w // pool, pool).mean(axis=(2, 4))
    return Dataset(images.reshape(images.shape[0], -1), bunch.target.astype(np.int64), 10)


def make_blobs(num_samples: int, num_classes: int, dim: int, seed: int, spread: float = 0.15) -> Dataset:
    """Gaussian class clusters with centers in [0.2, 0.8]^dim, clipped to [0, 1]."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, size=(num_classes, dim))
    labels = np.arange(num_samples) % num_classes
    features = np.clip(centers[labels] + spread * rng.standard_normal((num_samples, dim)), 0.0, 1.0)
    return Dataset(features, labels.astype(np.int64), num_classes)


def split_train_test(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle, then the first floor(N * fraction) rows train and the rest test."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    n = len(dataset)
    n_train = math.floor(n * fraction + 1e-9)
    perm = np.random.default_rng(seed).permutation(n)
    return dataset.subset(perm[:n_train]), dataset.subset(perm[n_train:])


def partition_noniid_sorted(train: Dataset, num_clients: int) -> Partition:
    """Stable sort by label, then cut into contiguous near-equal blocks in client order."""
    if num_clients < 1:
        raise ValueError("need at least one client")
    order = np.argsort(train.labels, kind="stable")
    return Partition([block.copy() for block in np.array_split(order, num_clients)])


def label_histograms(train: Dataset, partition: Partition) -> np.ndarray:
    """Row-normalized label distribution per client."""
    hist = np.zeros((partition.num_clients, train.num_classes))
    for c, idx in enumerate(partition.client_indices):
        counts = np.bincount(train.labels[idx], minlength=train.num_classes)
        hist[c] = counts / max(counts.sum(), 1)
    return hist
