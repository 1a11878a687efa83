"""Dataset loaders, the non-IID partitioner, and batch iteration."""

import struct

import numpy as np
import pytest

from fednorm.data import (
    Dataset, FormatError, batch_iter, load_cifar10_files, load_manifest,
    load_mnist_files, make_shifted_pair, make_synthetic, partition_noniid,
    save_manifest,
)


def _write_cifar_batch(path, images_u8, labels):
    with open(path, "wb") as fh:
        for img, lab in zip(images_u8, labels):
            fh.write(bytes([lab]))
            fh.write(img.tobytes())


def _write_idx_pair(img_path, lab_path, images_u8, labels):
    n, h, w = images_u8.shape
    with open(img_path, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, n, h, w))
        fh.write(images_u8.tobytes())
    with open(lab_path, "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, len(labels)))
        fh.write(bytes(labels))


# ----------------------------------------------------------------- loaders

def test_cifar_loader_parses_records(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(3, 3072), dtype=np.uint8)
    path = tmp_path / "data_batch_1.bin"
    _write_cifar_batch(path, imgs, [1, 7, 9])
    ds = load_cifar10_files([path])
    assert ds.images.shape == (3, 3, 32, 32)
    np.testing.assert_array_equal(ds.labels, [1, 7, 9])
    # byte 255 maps to exactly 1.0
    assert ds.images.max() <= 1.0
    np.testing.assert_allclose(
        ds.images[0].ravel(), imgs[0].astype(np.float64) / 255.0)


def test_cifar_loader_rejects_truncated_file(tmp_path):
    path = tmp_path / "data_batch_1.bin"
    path.write_bytes(b"\x01" + b"\x00" * 100)
    with pytest.raises(FormatError):
        load_cifar10_files([path])


def test_cifar_loader_rejects_bad_label(tmp_path):
    img = np.zeros((1, 3072), dtype=np.uint8)
    path = tmp_path / "data_batch_1.bin"
    _write_cifar_batch(path, img, [10])
    with pytest.raises(FormatError):
        load_cifar10_files([path])


def test_mnist_loader_parses_idx(tmp_path):
    rng = np.random.default_rng(1)
    imgs = rng.integers(0, 256, size=(3, 28, 28), dtype=np.uint8)
    ip, lp = tmp_path / "imgs", tmp_path / "labs"
    _write_idx_pair(ip, lp, imgs, [0, 5, 9])
    ds = load_mnist_files(ip, lp)
    assert ds.images.shape == (3, 1, 28, 28)
    np.testing.assert_array_equal(ds.labels, [0, 5, 9])


def test_mnist_loader_rejects_wrong_magic(tmp_path):
    ip, lp = tmp_path / "imgs", tmp_path / "labs"
    imgs = np.zeros((2, 28, 28), dtype=np.uint8)
    _write_idx_pair(ip, lp, imgs, [0, 1])
    bad = bytearray(ip.read_bytes())
    bad[3] = 0x99
    ip.write_bytes(bytes(bad))
    with pytest.raises(FormatError) as exc:
        load_mnist_files(ip, lp)
    assert "magic" in str(exc.value).lower()


def test_mnist_loader_rejects_count_mismatch(tmp_path):
    ip, lp = tmp_path / "imgs", tmp_path / "labs"
    imgs = np.zeros((2, 28, 28), dtype=np.uint8)
    _write_idx_pair(ip, lp, imgs, [0, 1])
    with open(lp, "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, 3))
        fh.write(bytes([0, 1, 2]))
    with pytest.raises(FormatError):
        load_mnist_files(ip, lp)


# ----------------------------------------------------------------- synthetic

def test_synthetic_balanced_and_deterministic():
    a = make_synthetic(200, seed=42)
    b = make_synthetic(200, seed=42)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    counts = np.bincount(a.labels, minlength=10)
    assert counts.min() == counts.max() == 20


def test_synthetic_pixels_in_unit_interval():
    ds = make_synthetic(50, seed=0)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0


# ----------------------------------------------------------------- shifting

def test_shifted_pair_zero_delta_identical():
    base = make_synthetic(20, seed=0)
    a, b = make_shifted_pair(base, 0.0)
    np.testing.assert_array_equal(a.images, b.images)


def test_shifted_pair_exact_offset_no_clamping():
    base = make_synthetic(20, seed=0)
    a, b = make_shifted_pair(base, 0.5)
    np.testing.assert_allclose(b.images - a.images, 0.5, atol=0)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_shifted_pair_preserves_per_image_variance():
    base = make_synthetic(20, seed=0)
    a, b = make_shifted_pair(base, 0.7)
    np.testing.assert_allclose(
        a.images.var(axis=(1, 2, 3)), b.images.var(axis=(1, 2, 3)), atol=1e-12)


def _same_assignments(m1, m2):
    return len(m1.assignments) == len(m2.assignments) and all(
        np.array_equal(a, b) for a, b in zip(m1.assignments, m2.assignments))


def test_shift_commutes_with_partitioning():
    base = make_synthetic(400, seed=3, num_classes=4)
    _, shifted = make_shifted_pair(base, 0.25)
    m1 = partition_noniid(base, 4, 2, 50, seed=9)
    m2 = partition_noniid(shifted, 4, 2, 50, seed=9)
    assert _same_assignments(m1, m2)


# ----------------------------------------------------------------- partition

def test_partition_exact_counts_and_distinct_classes():
    ds = make_synthetic(1000, seed=1)
    manifest = partition_noniid(ds, num_devices=5, classes_per_device=2,
                                samples_per_class=100, seed=0)
    assert len(manifest.assignments) == 5
    for idx in manifest.assignments:
        assert len(idx) == 200
        labels = ds.labels[np.asarray(idx)]
        counts = {lab: int(np.sum(labels == lab)) for lab in set(labels.tolist())}
        assert len(counts) == 2
        assert all(v == 100 for v in counts.values())


def test_partition_devices_disjoint():
    ds = make_synthetic(1000, seed=1)
    manifest = partition_noniid(ds, 5, 2, 100, seed=0)
    seen = set()
    for idx in manifest.assignments:
        s = set(idx.tolist())
        assert not (seen & s)
        seen |= s


def test_partition_deterministic_under_seed():
    ds = make_synthetic(1000, seed=1)
    m1 = partition_noniid(ds, 5, 2, 100, seed=4)
    m2 = partition_noniid(ds, 5, 2, 100, seed=4)
    m3 = partition_noniid(ds, 5, 2, 100, seed=5)
    assert _same_assignments(m1, m2)
    assert not _same_assignments(m1, m3)


def test_partition_rejects_infeasible_request():
    ds = make_synthetic(100, seed=1)
    with pytest.raises(ValueError):
        partition_noniid(ds, 20, 2, 100, seed=0)


def test_manifest_round_trip(tmp_path):
    ds = make_synthetic(1000, seed=1)
    manifest = partition_noniid(ds, 5, 2, 100, seed=4)
    path = tmp_path / "partition.tsv"
    save_manifest(manifest, path)
    back = load_manifest(path)
    assert _same_assignments(back, manifest)
    assert back.seed == manifest.seed
    assert back.classes_per_device == manifest.classes_per_device
    assert back.samples_per_class == manifest.samples_per_class


# ----------------------------------------------------------------- batching

def test_batch_iter_covers_indices_once():
    ds = make_synthetic(100, seed=2)
    idx = np.arange(40)
    seen = []
    for xb, yb in batch_iter(ds, idx, 16, epoch_seed=0):
        assert len(xb) == len(yb)
        seen.append(len(xb))
    assert sum(seen) == 40


def test_batch_iter_drops_single_sample_remainder():
    ds = make_synthetic(100, seed=2)
    idx = np.arange(33)  # 16 + 16 + 1 -> the trailing singleton is dropped
    sizes = [len(yb) for _, yb in batch_iter(ds, idx, 16, epoch_seed=0)]
    assert sizes == [16, 16]


def test_batch_iter_epoch_seed_changes_order():
    ds = make_synthetic(100, seed=2)
    idx = np.arange(32)
    a = np.concatenate([yb for _, yb in batch_iter(ds, idx, 16, epoch_seed=0)])
    b = np.concatenate([yb for _, yb in batch_iter(ds, idx, 16, epoch_seed=0)])
    c = np.concatenate([yb for _, yb in batch_iter(ds, idx, 16, epoch_seed=1)])
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_dataset_validates_shapes():
    with pytest.raises(ValueError):
        Dataset(images=np.zeros((3, 2, 4, 4)), labels=np.zeros(2, dtype=np.int64),
                class_count=10)
