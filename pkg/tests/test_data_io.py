import gzip
import itertools
import os
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from powerdp.data_io import (
    Dataset,
    label_histograms,
    load_digits,
    load_idx,
    load_mnist,
    make_blobs,
    parse_idx,
    partition_noniid_sorted,
    split_train_test,
    write_idx,
)
from powerdp.errors import BadMagicError, TruncatedPayloadError, UnsupportedTypeError


def idx_bytes(magic, dims, payload):
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload)


def test_parse_small_image_fixture():
    arr = parse_idx(idx_bytes(0x00000803, (2, 2, 2), range(0, 255, 32)))
    assert arr.shape == (2, 2, 2)
    np.testing.assert_allclose(arr.ravel(), np.arange(0, 255, 32) / 255.0)


def test_parse_labels():
    labels = parse_idx(idx_bytes(0x00000801, (4,), [3, 1, 4, 1]))
    np.testing.assert_array_equal(labels, [3, 1, 4, 1])
    assert labels.dtype == np.int64


def test_parse_errors():
    with pytest.raises(TruncatedPayloadError):
        parse_idx(idx_bytes(0x00000803, (2, 2, 2), range(7)))
    with pytest.raises(TruncatedPayloadError):
        parse_idx(struct.pack(">I", 0x00000803) + b"\x00\x00")
    with pytest.raises(TruncatedPayloadError):
        parse_idx(b"\x00\x00")
    with pytest.raises(BadMagicError):
        parse_idx(idx_bytes(0x01000803, (1, 1, 1), [0]))
    with pytest.raises(UnsupportedTypeError):
        parse_idx(idx_bytes(0x00000D03, (1, 1, 1), [0, 0, 0, 0]))


@settings(max_examples=50)
@given(arrays(np.uint8, st.tuples(st.integers(1, 5), st.integers(1, 4), st.integers(1, 4))))
def test_idx_round_trip(arr):
    back = parse_idx(write_idx(arr))
    np.testing.assert_array_equal(np.rint(back * 255).astype(np.uint8), arr)
    np.testing.assert_array_equal(parse_idx(write_idx(back)), back)


def test_load_idx_gz(tmp_path):
    raw = idx_bytes(0x00000801, (3,), [9, 8, 7])
    (tmp_path / "l.idx").write_bytes(raw)
    with gzip.open(tmp_path / "l.idx.gz", "wb") as fh:
        fh.write(raw)
    np.testing.assert_array_equal(load_idx(tmp_path / "l.idx"), load_idx(tmp_path / "l.idx.gz"))


def test_load_mnist_from_synthetic_files(tmp_path):
    images = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
    (tmp_path / "img").write_bytes(write_idx(images))
    (tmp_path / "lab").write_bytes(write_idx(np.array([5, 2], dtype=np.uint8)))
    ds = load_mnist(tmp_path / "img", tmp_path / "lab", extra=(tmp_path / "img", tmp_path / "lab"))
    assert ds.features.shape == (4, 9)
    np.testing.assert_array_equal(ds.labels, [5, 2, 5, 2])


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1)), np.array([0]), 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((1, 1)), np.array([2]), 2)
    with pytest.raises(ValueError):
        Dataset(np.full((1, 1), np.nan), np.array([0]), 2)


def toy(n, classes=10):
    return Dataset(np.arange(n, dtype=float)[:, None] / n, np.arange(n) % classes, classes)


def test_split_sizes_and_determinism():
    train, test = split_train_test(toy(10), 0.8, seed=3)
    assert (len(train), len(test)) == (8, 2)
    again, _ = split_train_test(toy(10), 0.8, seed=3)
    np.testing.assert_array_equal(train.features, again.features)
    other, _ = split_train_test(toy(10), 0.8, seed=4)
    assert not np.array_equal(train.features, other.features)
    assert sorted(np.concatenate([train.features, test.features]).ravel()) == sorted(toy(10).features.ravel())


def test_split_arithmetic_for_full_mnist_size():
    train, test = split_train_test(toy(70000), 0.8, seed=0)
    assert (len(train), len(test)) == (56000, 14000)


def test_split_rejects_bad_fraction():
    for frac in (0.0, 1.0, 1.5):
        with pytest.raises(ValueError):
            split_train_test(toy(10), frac, 0)


def test_partition_perfectly_separable():
    ds = Dataset(np.zeros((8, 1)), np.array([3, 0, 2, 1, 0, 3, 1, 2]), 4)
    part = partition_noniid_sorted(ds, 4)
    for c, idx in enumerate(part.client_indices):
        np.testing.assert_array_equal(ds.labels[idx], [c, c])
        assert list(idx) == sorted(idx)  # ties keep original order


def test_partition_single_client():
    part = partition_noniid_sorted(toy(13), 1)
    assert sorted(part.client_indices[0]) == list(range(13))


@pytest.mark.parametrize("n, k", [(10, 4), (101, 4), (57, 3), (7, 7)])
def test_partition_disjoint_exhaustive_balanced(n, k):
    part = partition_noniid_sorted(toy(n), k)
    flat = np.concatenate(part.client_indices)
    assert set(flat.tolist()) == set(range(n)) and flat.size == n
    sizes = [len(c) for c in part.client_indices]
    assert max(sizes) - min(sizes) <= 1
    assert sizes == sorted(sizes, reverse=True)


def test_partition_label_heterogeneity_on_digits():
    train, _ = split_train_test(load_digits(), 0.8, 0)
    part = partition_noniid_sorted(train, 4)
    hist = label_histograms(train, part)
    assert all(np.count_nonzero(row) <= 4 for row in hist)
    for a, b in itertools.combinations(range(4), 2):
        assert 0.5 * np.abs(hist[a] - hist[b]).sum() >= 0.5


def test_digits_and_blobs_shapes():
    digits = load_digits(pool=2)
    assert digits.features.shape == (1797, 16)
    assert 0.0 <= digits.features.min() and digits.features.max() <= 1.0
    blobs = make_blobs(90, 3, 2, seed=1)
    assert blobs.features.shape == (90, 2)
    np.testing.assert_array_equal(np.bincount(blobs.labels), [30, 30, 30])
    np.testing.assert_array_equal(make_blobs(90, 3, 2, seed=1).features, blobs.features)


MNIST_DIR = os.environ.get("POWERDP_MNIST_DIR")


@pytest.mark.skipif(not MNIST_DIR, reason="set POWERDP_MNIST_DIR to the folder holding the MNIST IDX files")
def test_real_mnist_training_images_header():
    folder = Path(MNIST_DIR)
    name = next(p for p in folder.iterdir() if p.name.startswith("train-images"))
    assert load_idx(name).shape == (60000, 28, 28)
