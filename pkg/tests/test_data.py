import gzip
import struct

import numpy as np
import pytest

from bsprune.data import (Dataset, augment, load_mnist_idx, synth_dataset, train_val_split,
                          upsample, write_idx, zero_center)
from bsprune.errors import DataError


@pytest.fixture
def idx_pair(tmp_path, rng):
    images = rng.integers(0, 256, size=(12, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, size=12, dtype=np.uint8)
    write_idx(tmp_path / "img.idx", images)
    write_idx(tmp_path / "lab.idx", labels)
    return tmp_path / "img.idx", tmp_path / "lab.idx", images, labels


def test_idx_round_trip(idx_pair):
    ip, lp, images, labels = idx_pair
    ds = load_mnist_idx(ip, lp)
    assert ds.images.shape == (12, 28, 28, 1) and ds.images.dtype == np.float32
    assert ds.labels.tolist() == labels.tolist()
    scaled = images.astype(np.float32) / 255.0
    ref = scaled - scaled.mean(axis=(1, 2), keepdims=True)
    assert np.allclose(ds.images[..., 0], ref, atol=1e-6)
    assert np.abs(ds.images.mean(axis=(1, 2, 3))).max() < 1e-6


def test_idx_header_layout(idx_pair):
    ip, lp, _, _ = idx_pair
    raw = ip.read_bytes()
    assert struct.unpack(">IIII", raw[:16]) == (0x00000803, 12, 28, 28)
    assert struct.unpack(">II", lp.read_bytes()[:8]) == (0x00000801, 12)


def test_gzip_files(idx_pair, tmp_path):
    ip, lp, _, labels = idx_pair
    gz = tmp_path / "img.idx.gz"
    gz.write_bytes(gzip.compress(ip.read_bytes()))
    assert load_mnist_idx(gz, lp).labels.tolist() == labels.tolist()


def test_upsample_replicates_pixels(idx_pair):
    ip, lp, _, _ = idx_pair
    base = load_mnist_idx(ip, lp)
    big = load_mnist_idx(ip, lp, upsample_factor=2)
    assert big.image_shape == (56, 56, 1)
    for dy in range(2):
        for dx in range(2):
            assert np.array_equal(big.images[:, dy::2, dx::2], base.images)
    with pytest.raises(ValueError):
        upsample(base.images, 1.5)


def test_bad_magic_names_both_values(idx_pair):
    ip, lp, _, _ = idx_pair
    with pytest.raises(DataError, match="0x00000801.*expected 0x00000803"):
        load_mnist_idx(lp, lp)


def test_truncated_and_mismatched_files(idx_pair, tmp_path, rng):
    ip, lp, _, _ = idx_pair
    cut = tmp_path / "cut.idx"
    cut.write_bytes(ip.read_bytes()[:-5])
    with pytest.raises(DataError, match="truncated"):
        load_mnist_idx(cut, lp)
    cut.write_bytes(ip.read_bytes()[:2])
    with pytest.raises(DataError, match="truncated"):
        load_mnist_idx(cut, lp)
    short = tmp_path / "short.idx"
    write_idx(short, rng.integers(0, 10, size=5, dtype=np.uint8))
    with pytest.raises(DataError, match="12 images but 5 labels"):
        load_mnist_idx(ip, short)


def test_missing_file_is_io_error(tmp_path):
    with pytest.raises(OSError):
        load_mnist_idx(tmp_path / "nope", tmp_path / "nope")


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 4, 4)), np.zeros(2), 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 4, 4, 1)), np.zeros(3), 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 4, 4, 1)), np.array([0, 2]), 2)


def test_synth_is_deterministic_and_balanced():
    a, b = synth_dataset(101, num_classes=3, seed=4), synth_dataset(101, num_classes=3, seed=4)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    counts = np.bincount(a.labels, minlength=3)
    assert counts.max() - counts.min() <= 1
    assert a.images.shape == (101, 16, 16, 1)
    assert not np.array_equal(a.images, synth_dataset(101, num_classes=3, seed=5).images)
    with pytest.raises(ValueError):
        synth_dataset(0)


def test_zero_center_per_image(rng):
    x = rng.normal(3.0, 1.0, size=(5, 4, 4, 2))
    assert np.abs(zero_center(x).mean(axis=(1, 2, 3))).max() < 1e-6


def test_split_is_seeded_90_10():
    ds = synth_dataset(200)
    tr, va = train_val_split(ds, 0.1, seed=3)
    assert (len(tr), len(va)) == (180, 20)
    assert (tr.split, va.split) == ("train", "val")
    tr2, va2 = train_val_split(ds, 0.1, seed=3)
    assert np.array_equal(va.images, va2.images)
    merged = np.sort(np.concatenate([tr.images.reshape(180, -1), va.images.reshape(20, -1)]), axis=0)
    assert np.array_equal(merged, np.sort(ds.images.reshape(200, -1), axis=0))


def test_augment_shift_and_flip(rng):
    x = rng.normal(size=(6, 10, 10, 1)).astype(np.float32)
    same = augment(x, np.random.default_rng(0), shift=0.0, flip=False)
    assert np.array_equal(same, x)
    flipped = augment(x[:1], _AlwaysFlip(), shift=0.0, flip=True)
    assert np.array_equal(flipped[0], x[0, :, ::-1])
    moved = augment(x, np.random.default_rng(1), shift=0.2, flip=False)
    assert moved.shape == x.shape
    assert np.isin(np.round(moved, 6), np.r_[np.round(x.ravel(), 6), 0]).all()


class _AlwaysFlip:
    def integers(self, lo, hi, size):
        return np.zeros(size, dtype=int)

    def random(self, n):
        return np.zeros(n)
