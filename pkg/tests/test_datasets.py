import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccloss.datasets import (
    CountMismatchError,
    FormatError,
    LabeledDataset,
    TruncatedFileError,
    batches,
    export_idx,
    load_synth,
    normalize_images,
    parse_cifar100,
    parse_idx,
    synth_blobs,
    write_idx,
)
from conftest import write_idx_pair


class TestIdxParsing:
    def test_two_image_fixture_round_trip(self, tmp_path):
        images = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
        labels = np.array([7, 1], dtype=np.uint8)
        img_path, lbl_path = write_idx_pair(tmp_path, images, labels)
        ds = parse_idx(img_path, lbl_path)
        np.testing.assert_array_equal(ds.images[..., 0], images)
        np.testing.assert_array_equal(ds.labels, [7, 1])

    def test_wrong_images_magic_names_field(self, tmp_path):
        img_path, lbl_path = write_idx_pair(tmp_path, np.zeros((1, 2, 2), np.uint8), [0])
        raw = bytearray(img_path.read_bytes())
        raw[:4] = struct.pack(">I", 2049)  # label magic in the images file
        img_path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="images magic"):
            parse_idx(img_path, lbl_path)

    def test_wrong_labels_magic(self, tmp_path):
        img_path, lbl_path = write_idx_pair(tmp_path, np.zeros((1, 2, 2), np.uint8), [0])
        raw = bytearray(lbl_path.read_bytes())
        raw[:4] = struct.pack(">I", 2051)
        lbl_path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="labels magic"):
            parse_idx(img_path, lbl_path)

    def test_truncated_payload(self, tmp_path):
        img_path, lbl_path = write_idx_pair(tmp_path, np.zeros((3, 4, 4), np.uint8), [0, 1, 2])
        img_path.write_bytes(img_path.read_bytes()[:-5])
        with pytest.raises(TruncatedFileError):
            parse_idx(img_path, lbl_path)

    def test_count_mismatch(self, tmp_path):
        img_path, _ = write_idx_pair(tmp_path, np.zeros((3, 2, 2), np.uint8), [0, 1, 2], stem="a")
        _, lbl_path = write_idx_pair(tmp_path, np.zeros((2, 2, 2), np.uint8), [0, 1], stem="b")
        with pytest.raises(CountMismatchError):
            parse_idx(img_path, lbl_path)

    def test_gzip_transparency(self, tmp_path):
        images = np.arange(8, dtype=np.uint8).reshape(2, 2, 2)
        img_path, lbl_path = write_idx_pair(tmp_path, images, [1, 0])
        gz_img = tmp_path / "img.gz"
        gz_img.write_bytes(gzip.compress(img_path.read_bytes()))
        ds = parse_idx(gz_img, lbl_path)
        np.testing.assert_array_equal(ds.images[..., 0], images)

    def test_write_idx_rejects_multichannel(self, tmp_path):
        with pytest.raises(FormatError):
            write_idx(np.zeros((1, 2, 2, 3), np.uint8), [0], tmp_path / "i", tmp_path / "l")


class TestCifar100:
    def make_record(self, coarse, fine, value):
        return bytes([coarse, fine]) + bytes([value] * 3072)

    def test_single_record_round_trip(self, tmp_path):
        path = tmp_path / "train.bin"
        path.write_bytes(self.make_record(3, 42, 7))
        ds = parse_cifar100(path)
        assert len(ds) == 1
        assert ds.class_count == 100
        assert ds.labels[0] == 42  # fine label, not coarse
        np.testing.assert_array_equal(ds.images[0], np.full((32, 32, 3), 7, np.uint8))

    def test_channel_order(self, tmp_path):
        # planes are R then G then B
        payload = bytes([5, 9]) + bytes([10] * 1024) + bytes([20] * 1024) + bytes([30] * 1024)
        path = tmp_path / "train.bin"
        path.write_bytes(payload)
        ds = parse_cifar100(path)
        np.testing.assert_array_equal(ds.images[0, 0, 0], [10, 20, 30])

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "train.bin"
        path.write_bytes(self.make_record(0, 1, 2)[:-100])
        with pytest.raises(FormatError, match="3074"):
            parse_cifar100(path)


class TestSynthBlobs:
    def test_deterministic(self):
        a = synth_blobs(3, 10, 5, 4.0, seed=42)
        b = synth_blobs(3, 10, 5, 4.0, seed=42)
        assert a.images.tobytes() == b.images.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()

    def test_distinct_splits_share_nothing(self):
        a = synth_blobs(3, 10, 5, 4.0, seed=42, split=0)
        b = synth_blobs(3, 10, 5, 4.0, seed=42, split=1)
        assert a.images.tobytes() != b.images.tobytes()

    def test_linear_probe_reaches_full_accuracy_when_separated(self):
        from sklearn.linear_model import LogisticRegression

        ds = synth_blobs(2, 100, 6, 10.0, seed=0)
        X = ds.images.reshape(len(ds), -1).astype(np.float64)
        probe = LogisticRegression(max_iter=1000).fit(X, ds.labels)
        assert probe.score(X, ds.labels) == 1.0

    def test_zero_separation_is_chance_level(self):
        from sklearn.linear_model import LogisticRegression
        from sklearn.model_selection import train_test_split

        ds = synth_blobs(2, 300, 6, 0.0, seed=1)
        X = ds.images.reshape(len(ds), -1).astype(np.float64)
        X_tr, X_te, y_tr, y_te = train_test_split(X, ds.labels, random_state=0)
        probe = LogisticRegression(max_iter=1000).fit(X_tr, y_tr)
        assert probe.score(X_te, y_te) < 0.65

    def test_validation(self):
        with pytest.raises(ValueError):
            synth_blobs(1, 10, 5, 4.0, seed=0)
        with pytest.raises(ValueError):
            synth_blobs(2, 10, 5, -1.0, seed=0)

    def test_export_round_trip(self, tmp_path):
        ds = synth_blobs(3, 20, 4, 6.0, seed=5)
        export_idx(ds, tmp_path / "imgs", tmp_path / "lbls")
        back = parse_idx(tmp_path / "imgs", tmp_path / "lbls")
        assert len(back) == 60
        np.testing.assert_array_equal(back.labels, ds.labels)
        # quantization preserves geometry: the probe still separates classes
        from sklearn.linear_model import LogisticRegression

        X = back.images.reshape(60, -1).astype(np.float64)
        assert LogisticRegression(max_iter=1000).fit(X, back.labels).score(X, back.labels) == 1.0


def u8_dataset(m=10, h=4, w=4, k=3, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, size=(m, h, w, 1), dtype=np.uint8)
    labels = rng.integers(0, k, size=m).astype(np.int64)
    scaled = images.astype(np.float64) / 255.0
    return LabeledDataset(images, labels, k, (float(scaled.mean()),), (float(scaled.std()),))


class TestBatches:
    def test_remainder_sizes(self):
        ds = u8_dataset(m=10)
        sizes = [len(b) for b in batches(ds, 4, seed=0, epoch=0)]
        assert sizes == [4, 4, 2]

    def test_same_seed_epoch_identical(self):
        ds = u8_dataset(m=12)
        a = [b.labels.tolist() for b in batches(ds, 4, seed=3, epoch=5)]
        b = [b.labels.tolist() for b in batches(ds, 4, seed=3, epoch=5)]
        assert a == b

    def test_epochs_permute_differently(self):
        ds = u8_dataset(m=64)
        orders = set()
        for epoch in range(100):
            order = tuple(
                label for b in batches(ds, 64, seed=0, epoch=epoch) for label in b.labels
            )
            orders.add(order)
        assert len(orders) == 100

    @given(st.integers(min_value=1, max_value=20), st.integers(min_value=0, max_value=1000))
    @settings(max_examples=60, deadline=None)
    def test_every_sample_appears_exactly_once(self, batch_size, epoch):
        ds = u8_dataset(m=17)
        seen = np.concatenate(
            [b.inputs.data.reshape(len(b), -1)[:, :1] for b in batches(ds, batch_size, 1, epoch)]
        )
        assert seen.shape[0] == 17
        full = normalize_images(ds.images, ds.mean, ds.std)[:, 0, 0, :1]
        np.testing.assert_allclose(np.sort(seen, axis=0), np.sort(full, axis=0), rtol=1e-5)

    def test_normalized_mean_near_zero(self):
        train, _ = load_synth(seed=0, per_class_train=50)
        total, count = 0.0, 0
        for b in batches(train, 32, seed=0, epoch=0):
            total += float(b.inputs.data.sum())
            count += b.inputs.data.size
        assert abs(total / count) < 0.05

    def test_u8_normalization_layout(self):
        ds = u8_dataset(m=4, h=2, w=3)
        batch = next(batches(ds, 4, seed=0, epoch=0, shuffle=False))
        assert batch.inputs.shape == (4, 1, 2, 3)
        expected = (ds.images[0, 1, 2, 0] / 255.0 - ds.mean[0]) / ds.std[0]
        assert batch.inputs.data[0, 0, 1, 2] == pytest.approx(expected, rel=1e-6)

    def test_flip_is_deterministic_and_horizontal(self):
        ds = u8_dataset(m=8, h=2, w=4)
        a = [b.inputs.data.copy() for b in batches(ds, 8, seed=0, epoch=0, flip=True)]
        b = [b.inputs.data.copy() for b in batches(ds, 8, seed=0, epoch=0, flip=True)]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)
        plain = next(batches(ds, 8, seed=0, epoch=0, flip=False)).inputs.data
        flipped = a[0]
        for i in range(8):
            same = np.array_equal(flipped[i], plain[i])
            mirrored = np.array_equal(flipped[i], plain[i][:, :, ::-1])
            assert same or mirrored

    def test_bad_batch_size(self):
        with pytest.raises(ValueError):
            list(batches(u8_dataset(), 0, seed=0, epoch=0))


class TestLoadSynth:
    def test_test_split_reuses_train_statistics(self):
        train, test = load_synth(seed=3, per_class_train=20, per_class_test=10)
        assert train.mean == test.mean and train.std == test.std
        assert len(train) == 80 and len(test) == 40

    def test_dataset_invariants_enforced(self):
        with pytest.raises(CountMismatchError):
            LabeledDataset(np.zeros((3, 2, 2, 1), np.uint8), np.zeros(2, np.int64), 2, (0.5,), (0.5,))
        with pytest.raises(FormatError):
            LabeledDataset(np.zeros((2, 2, 2, 1), np.uint8), np.array([0, 5]), 2, (0.5,), (0.5,))
