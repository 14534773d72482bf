"""Dataset loaders, synthetic generators, and perturbation sampling."""

import gzip
import os
import struct

import numpy as np
import pytest

from gxplab.data import (
    Dataset,
    PerturbationSpec,
    find_fmnist,
    get_dataset,
    load_cifar_binary,
    load_idx,
    read_idx,
    sample_consistent_perturbations,
    synth10,
    synth_planted,
)


def idx_images_bytes(arr):
    arr = np.asarray(arr, dtype=np.uint8)
    return struct.pack(">IIII", 0x00000803, *arr.shape) + arr.tobytes()


def idx_labels_bytes(labels):
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", 0x00000801, labels.shape[0]) + labels.tobytes()


class TestIdx:
    def test_image_scaling(self, tmp_path):
        raw = np.array([[[0, 128], [255, 64]]], dtype=np.uint8)
        p = tmp_path / "imgs"
        p.write_bytes(idx_images_bytes(raw))
        out = read_idx(p)
        assert out.dtype == np.float32
        expected = raw.astype(np.float32) / 255.0
        np.testing.assert_array_equal(out, expected)
        assert out[0, 1, 0] == 1.0 and out[0, 0, 0] == 0.0

    def test_labels_int64(self, tmp_path):
        p = tmp_path / "lbls"
        p.write_bytes(idx_labels_bytes([3, 0, 9]))
        out = read_idx(p)
        assert out.dtype == np.int64
        assert out.tolist() == [3, 0, 9]

    def test_gzip_transparent(self, tmp_path):
        p = tmp_path / "lbls.gz"
        with gzip.open(p, "wb") as fh:
            fh.write(idx_labels_bytes([1, 2]))
        assert read_idx(p).tolist() == [1, 2]

    def test_bad_magic_reports_offset(self, tmp_path):
        p = tmp_path / "bad"
        p.write_bytes(struct.pack(">II", 0xDEADBEEF, 4))
        with pytest.raises(ValueError, match="0xdeadbeef.*offset 0"):
            read_idx(p)

    def test_truncated_header(self, tmp_path):
        p = tmp_path / "short"
        p.write_bytes(struct.pack(">I", 0x00000803) + b"\x00\x00")
        with pytest.raises(ValueError, match="truncated"):
            read_idx(p)

    def test_truncated_data_reports_offset(self, tmp_path):
        p = tmp_path / "short2"
        p.write_bytes(struct.pack(">IIII", 0x00000803, 2, 2, 2) + b"\x01" * 5)
        with pytest.raises(ValueError, match="offset 16"):
            read_idx(p)

    def test_load_idx_pairs(self, tmp_path):
        imgs = tmp_path / "i"
        lbls = tmp_path / "l"
        imgs.write_bytes(idx_images_bytes(np.zeros((3, 2, 2), dtype=np.uint8)))
        lbls.write_bytes(idx_labels_bytes([0, 1, 2]))
        ds = load_idx(imgs, lbls, split="test")
        assert ds.images.shape == (3, 1, 2, 2)
        assert ds.class_count == 3
        assert ds.split == "test"
        assert "sha256" in ds.provenance["images"]

    def test_load_idx_count_mismatch(self, tmp_path):
        imgs = tmp_path / "i"
        lbls = tmp_path / "l"
        imgs.write_bytes(idx_images_bytes(np.zeros((3, 2, 2), dtype=np.uint8)))
        lbls.write_bytes(idx_labels_bytes([0, 1]))
        with pytest.raises(ValueError, match="mismatch"):
            load_idx(imgs, lbls)

    def test_load_idx_swapped_files(self, tmp_path):
        imgs = tmp_path / "i"
        lbls = tmp_path / "l"
        imgs.write_bytes(idx_images_bytes(np.zeros((2, 2, 2), dtype=np.uint8)))
        lbls.write_bytes(idx_labels_bytes([0, 1]))
        with pytest.raises(ValueError, match="image file"):
            load_idx(lbls, imgs)


class TestCifar:
    def test_layout(self, tmp_path):
        rec = np.zeros((2, 3073), dtype=np.uint8)
        rec[0, 0] = 7
        rec[1, 0] = 2
        # channel-planar: red plane first; pixel (row 1, col 2) of green channel
        rec[0, 1 + 1024 + 32 * 1 + 2] = 255
        p = tmp_path / "batch.bin"
        p.write_bytes(rec.tobytes())
        ds = load_cifar_binary(p)
        assert ds.images.shape == (2, 3, 32, 32)
        assert ds.labels.tolist() == [7, 2]
        assert ds.images[0, 1, 1, 2] == 1.0
        assert ds.images.sum() == 1.0

    def test_bad_size(self, tmp_path):
        p = tmp_path / "batch.bin"
        p.write_bytes(b"\x00" * 100)
        with pytest.raises(ValueError, match="3073"):
            load_cifar_binary(p)


class TestDataset:
    def test_validation(self):
        with pytest.raises(ValueError, match=r"\(N, C, H, W\)"):
            Dataset(np.zeros((2, 2, 2), dtype=np.float32), np.zeros(2), "train", 2)
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            Dataset(np.full((1, 1, 2, 2), 1.5, dtype=np.float32), np.zeros(1), "train", 2)
        with pytest.raises(ValueError, match=r"\[0, 2\)"):
            Dataset(np.zeros((1, 1, 2, 2), dtype=np.float32), np.array([5]), "train", 2)

    def test_subset(self):
        ds = synth_planted(10, d=4, seed=0)
        sub = ds.subset([3, 1])
        assert len(sub) == 2
        np.testing.assert_array_equal(sub.images[0], ds.images[3])
        assert sub.labels[1] == ds.labels[1]

    def test_batches_cover_all_in_order(self):
        ds = synth_planted(7, d=4, seed=0)
        got = [x.shape[0] for x, _ in ds.batches(3)]
        assert got == [3, 3, 1]
        xs = np.concatenate([x for x, _ in ds.batches(3)])
        np.testing.assert_array_equal(xs, ds.images)

    def test_batches_shuffle_deterministic(self):
        ds = synth_planted(16, d=4, seed=0)
        a = np.concatenate([x for x, _ in ds.batches(4, np.random.default_rng(5))])
        b = np.concatenate([x for x, _ in ds.batches(4, np.random.default_rng(5))])
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, ds.images)


class TestPlanted:
    def test_label_pixel(self):
        ds = synth_planted(200, d=6, seed=1)
        np.testing.assert_array_equal(ds.images[:, 0, 0, 0], ds.labels.astype(np.float32))

    def test_nuisance_range(self):
        ds = synth_planted(100, d=6, seed=2)
        rest = ds.images.reshape(100, -1)[:, 1:]
        assert rest.min() >= 0.3 and rest.max() <= 0.7

    def test_deterministic(self):
        a = synth_planted(20, d=4, seed=3)
        b = synth_planted(20, d=4, seed=3)
        assert a.images.tobytes() == b.images.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()


class TestSynth10:
    def test_shapes_and_range(self):
        ds = synth10(50, seed=0)
        assert ds.images.shape == (50, 1, 16, 16)
        assert ds.class_count == 10
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0

    def test_deterministic(self):
        a = synth10(30, seed=4)
        b = synth10(30, seed=4)
        assert a.images.tobytes() == b.images.tobytes()

    def test_seed_changes_samples(self):
        a = synth10(30, seed=4)
        b = synth10(30, seed=5)
        assert a.images.tobytes() != b.images.tobytes()

    def test_class_structure_shared_across_splits(self):
        # per-class mean images from independently seeded draws must agree,
        # since the class templates are fixed task structure
        a, b = synth10(600, seed=10), synth10(600, seed=11)
        for c in range(10):
            ma = a.images[a.labels == c].mean(axis=0).ravel()
            mb = b.images[b.labels == c].mean(axis=0).ravel()
            corr = np.corrcoef(ma, mb)[0, 1]
            assert corr > 0.9

    def test_blob_at_class_position(self):
        ds = synth10(400, seed=1)
        # class 0 owns the center blob; class 1 sits on the ring at (8, 13)
        m0 = ds.images[ds.labels == 0, 0].mean(axis=0)
        m1 = ds.images[ds.labels == 1, 0].mean(axis=0)
        assert m0[8, 8] - m1[8, 8] > 0.15
        assert m1[8, 13] - m0[8, 13] > 0.15


class _Reject:
    """Predicts 0 for an exact reference image and 1 otherwise."""

    def __init__(self, x):
        self.x = x

    def predict(self, batch):
        same = np.all(batch.reshape(batch.shape[0], -1) == self.x.ravel(), axis=1)
        return np.where(same, 0, 1)


class _Accept:
    def predict(self, batch):
        return np.zeros(batch.shape[0], dtype=np.int64)


class TestPerturbations:
    def test_sigma_zero_returns_copies(self):
        x = np.random.default_rng(0).uniform(0.2, 0.8, (1, 4, 4)).astype(np.float32)
        out = sample_consistent_perturbations(_Accept(), x, PerturbationSpec(0.0, 8, 10, 0))
        assert len(out) == 8 and not out.short
        assert np.all(out.samples == x[None])

    def test_count_and_clip(self):
        x = np.full((1, 3, 3), 0.98, dtype=np.float32)
        spec = PerturbationSpec(sigma_noise=0.5, count=16, max_attempts=10, seed=1)
        out = sample_consistent_perturbations(_Accept(), x, spec)
        assert out.samples.shape == (16, 1, 3, 3)
        assert out.samples.max() <= 1.0 and out.samples.min() >= 0.0
        assert out.samples.dtype == np.float32

    def test_deterministic_by_seed(self):
        x = np.full((1, 3, 3), 0.5, dtype=np.float32)
        spec = PerturbationSpec(0.05, 6, 10, 7)
        a = sample_consistent_perturbations(_Accept(), x, spec)
        b = sample_consistent_perturbations(_Accept(), x, spec)
        assert a.samples.tobytes() == b.samples.tobytes()

    def test_short_batch_when_rejected(self):
        x = np.full((1, 3, 3), 0.5, dtype=np.float32)
        out = sample_consistent_perturbations(
            _Reject(x), x, PerturbationSpec(0.05, 4, max_attempts=3, seed=0)
        )
        assert out.short and len(out) == 0 and out.requested == 4

    def test_consistency_filter(self):
        # a model that accepts only points whose mean stays below the start's
        x = np.full((1, 2, 2), 0.5, dtype=np.float32)

        class Halfplane:
            def predict(self, batch):
                return (batch.reshape(batch.shape[0], -1).mean(axis=1) > 0.5).astype(int)

        out = sample_consistent_perturbations(Halfplane(), x, PerturbationSpec(0.1, 12, 20, 3))
        assert len(out) == 12
        assert np.all(out.samples.reshape(12, -1).mean(axis=1) <= 0.5)


class TestRegistry:
    def test_planted_defaults(self):
        assert len(get_dataset("planted", "train")) == 2000
        assert len(get_dataset("planted", "test")) == 500

    def test_synth10_split_seeds_differ(self):
        tr = get_dataset("synth10", "train", n=20, seed=0)
        te = get_dataset("synth10", "test", n=20, seed=0)
        assert tr.images.tobytes() != te.images.tobytes()

    def test_unknown_name(self):
        with pytest.raises(ValueError, match="unknown dataset"):
            get_dataset("imagenet")

    def test_fmnist_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="FMNIST"):
            get_dataset("fmnist", data_dir=str(tmp_path))

    def test_fmnist_found_via_gz(self, tmp_path, monkeypatch):
        for split, (iname, lname) in {
            "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }.items():
            n = 5 if split == "train" else 3
            with gzip.open(os.path.join(tmp_path, iname + ".gz"), "wb") as fh:
                fh.write(idx_images_bytes(np.zeros((n, 4, 4), dtype=np.uint8)))
            with gzip.open(os.path.join(tmp_path, lname + ".gz"), "wb") as fh:
                fh.write(idx_labels_bytes(np.arange(n) % 10))
        monkeypatch.setenv("GXP_DATA_DIR", str(tmp_path))
        assert find_fmnist() is not None
        ds = get_dataset("fmnist", "train")
        assert len(ds) == 5 and ds.class_count == 10
        assert len(get_dataset("fmnist-small", "test")) == 3
