import struct

import numpy as np
import pytest

from localgrad.data import (
    DataError,
    Dataset,
    gen_blobs,
    gen_spirals,
    load_csv,
    load_idx,
    save_csv,
    standardize,
)


class TestSpirals:
    def test_counts_and_split(self):
        ds = gen_spirals(100, 2, noise=0.1, seed=0)
        assert len(ds.labels) == 200
        assert ds.n_train == 160
        assert len(ds.test_labels) == 40

    def test_deterministic(self):
        a = gen_spirals(50, 3, noise=0.0, seed=5)
        b = gen_spirals(50, 3, noise=0.0, seed=5)
        np.testing.assert_array_equal(a.inputs, b.inputs)
        np.testing.assert_array_equal(a.labels, b.labels)
        c = gen_spirals(50, 3, noise=0.0, seed=6)
        assert not np.array_equal(a.inputs, c.inputs)

    def test_stratified_within_one(self):
        ds = gen_spirals(101, 3, noise=0.2, seed=1)
        train_counts = np.bincount(ds.train_labels, minlength=3)
        assert train_counts.max() - train_counts.min() <= 1
        test_counts = np.bincount(ds.test_labels, minlength=3)
        assert test_counts.max() - test_counts.min() <= 1

    def test_degenerate_args(self):
        with pytest.raises(DataError):
            gen_spirals(10, 1, noise=0.0, seed=0)
        with pytest.raises(DataError):
            gen_spirals(0, 2, noise=0.0, seed=0)


class TestBlobs:
    def test_centers_separated(self):
        ds = gen_blobs(50, 4, separation=10.0, seed=2)
        centers = np.stack([ds.inputs[ds.labels == c].mean(axis=0)
                            for c in range(4)])
        for i in range(4):
            for j in range(i + 1, 4):
                # empirical means sit close to true centers
                assert np.linalg.norm(centers[i] - centers[j]) > 10.0 - 2.0

    def test_single_class_rejected(self):
        with pytest.raises(DataError):
            gen_blobs(10, 1, separation=1.0, seed=0)

    def test_same_seed_same_centers(self):
        a = gen_blobs(20, 3, separation=5.0, seed=7)
        b = gen_blobs(20, 3, separation=5.0, seed=7)
        np.testing.assert_array_equal(a.inputs, b.inputs)


class TestStandardize:
    def test_train_split_moments(self):
        ds = standardize(gen_spirals(200, 2, noise=0.3, seed=3))
        flat = ds.train_inputs.reshape(len(ds.train_labels), -1)
        assert np.abs(flat.mean(axis=0)).max() <= 1e-9
        assert np.abs(flat.var(axis=0) - 1.0).max() <= 1e-9

    def test_constant_feature_unscaled(self):
        inputs = np.column_stack([np.ones(10), np.arange(10, dtype=float)])
        labels = np.array([0, 1] * 5, dtype=np.int64)
        ds = standardize(Dataset(inputs, labels, 8, 2))
        assert np.isfinite(ds.inputs).all()
        np.testing.assert_allclose(ds.inputs[:, 0], 0.0, atol=1e-12)


class TestCsv:
    def test_parse_shape(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("0,1.5,2.5\n1,3.5,4.5\n0,5.5,6.5\n")
        ds = load_csv(p, 2, standardize_features=False)
        assert ds.inputs.shape == (3, 2)
        assert sorted(ds.labels.tolist()) == [0, 0, 1]

    def test_roundtrip_bitwise(self, tmp_path):
        src = gen_spirals(40, 2, noise=0.37, seed=9)
        p = tmp_path / "d.csv"
        save_csv(src, p)
        # reload without standardization and align rows by sorting
        back = load_csv(p, 2, standardize_features=False, seed=1)
        a = src.inputs[np.lexsort(src.inputs.T)]
        b = back.inputs[np.lexsort(back.inputs.T)]
        np.testing.assert_array_equal(a, b)
        assert np.bincount(src.labels).tolist() == np.bincount(back.labels).tolist()

    def test_errors_carry_line_numbers(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("0,1.0\n1,not_a_number\n")
        with pytest.raises(DataError, match="line 2"):
            load_csv(p, 2)
        p.write_text("0,1.0\n3,2.0\n")
        with pytest.raises(DataError, match="line 2: label 3"):
            load_csv(p, 2)
        p.write_text("0,1.0\n1,1.0,2.0\n")
        with pytest.raises(DataError, match="line 2: expected 1 features"):
            load_csv(p, 2)


def write_idx_pair(tmp_path, images: np.ndarray, labels: np.ndarray,
                   image_magic=0x803, label_magic=0x801):
    n, h, w = images.shape
    ip = tmp_path / "images.idx"
    lp = tmp_path / "labels.idx"
    with open(ip, "wb") as fh:
        fh.write(struct.pack(">IIII", image_magic, n, h, w))
        fh.write(images.astype(np.uint8).tobytes())
    with open(lp, "wb") as fh:
        fh.write(struct.pack(">II", label_magic, len(labels)))
        fh.write(labels.astype(np.uint8).tobytes())
    return ip, lp


class TestIdx:
    def test_load(self, tmp_path):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(10, 4, 4)).astype(np.uint8)
        labels = np.array([0, 1] * 5, dtype=np.uint8)
        ip, lp = write_idx_pair(tmp_path, images, labels)
        ds = load_idx(ip, lp, standardize_features=False)
        assert ds.inputs.shape == (10, 1, 4, 4)
        assert ds.n_classes == 2
        # raw pixel scaling: values land in [0, 1]
        assert ds.inputs.min() >= 0.0 and ds.inputs.max() <= 1.0

    def test_flat_option(self, tmp_path):
        images = np.zeros((4, 3, 3), dtype=np.uint8)
        labels = np.array([0, 1, 0, 1], dtype=np.uint8)
        ip, lp = write_idx_pair(tmp_path, images, labels)
        ds = load_idx(ip, lp, flat=True, standardize_features=False)
        assert ds.inputs.shape == (4, 9)

    def test_wrong_magic_offset_zero(self, tmp_path):
        images = np.zeros((2, 2, 2), dtype=np.uint8)
        labels = np.zeros(2, dtype=np.uint8)
        ip, lp = write_idx_pair(tmp_path, images, labels, image_magic=0x804)
        with pytest.raises(DataError, match="offset 0"):
            load_idx(ip, lp)

    def test_count_mismatch(self, tmp_path):
        images = np.zeros((3, 2, 2), dtype=np.uint8)
        labels = np.array([0, 1], dtype=np.uint8)
        ip, lp = write_idx_pair(tmp_path, images, labels)
        with pytest.raises(DataError, match="3 images but .* 2 labels"):
            load_idx(ip, lp)
