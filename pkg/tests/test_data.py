import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stgan.data import (
    Dataset,
    IdxConsistencyError,
    IdxFormatError,
    InfeasibleSplitError,
    SplitSpec,
    concat,
    load_idx,
    pad_images,
    save_idx,
    stratified_split,
    synthetic_blobs,
    synthetic_digits,
    take_subset,
)


def write_idx_pair(tmp_path, pixels, labels, image_magic=0x803, label_magic=0x801,
                   label_count=None):
    """Hand-rolled IDX writer, independent of save_idx."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    n, rows, cols = pixels.shape
    img_path = tmp_path / "images.idx"
    lab_path = tmp_path / "labels.idx"
    with open(img_path, "wb") as f:
        f.write(struct.pack(">IIII", image_magic, n, rows, cols))
        f.write(pixels.tobytes())
    with open(lab_path, "wb") as f:
        f.write(struct.pack(">II", label_magic, label_count if label_count is not None else len(labels)))
        f.write(bytes(labels))
    return img_path, lab_path


class TestLoadIdx:
    def test_loads_counts_and_shape(self, tmp_path):
        pixels = np.zeros((10, 28, 28), dtype=np.uint8)
        img, lab = write_idx_pair(tmp_path, pixels, [0] * 10)
        ds = load_idx(img, lab)
        assert len(ds) == 10
        assert ds.image_shape == (28, 28)
        assert list(ds.labels) == [0] * 10

    def test_bad_image_magic_names_file(self, tmp_path):
        img, lab = write_idx_pair(tmp_path, np.zeros((2, 4, 4), np.uint8), [0, 1],
                                  image_magic=0x804)
        with pytest.raises(IdxFormatError, match="images.idx"):
            load_idx(img, lab)

    def test_bad_label_magic_names_file(self, tmp_path):
        img, lab = write_idx_pair(tmp_path, np.zeros((2, 4, 4), np.uint8), [0, 1],
                                  label_magic=0x99)
        with pytest.raises(IdxFormatError, match="labels.idx"):
            load_idx(img, lab)

    def test_count_mismatch(self, tmp_path):
        img, lab = write_idx_pair(tmp_path, np.zeros((3, 4, 4), np.uint8), [0, 1])
        with pytest.raises(IdxConsistencyError):
            load_idx(img, lab)

    def test_pixel_normalization_endpoints(self, tmp_path):
        pixels = np.zeros((1, 2, 2), dtype=np.uint8)
        pixels[0, 0, 0] = 255
        pixels[0, 0, 1] = 0
        img, lab = write_idx_pair(tmp_path, pixels, [7])
        ds = load_idx(img, lab)
        assert ds.images[0, 0, 0] == pytest.approx(1.0)
        assert ds.images[0, 0, 1] == pytest.approx(-1.0)

    def test_save_load_round_trip(self, tmp_path):
        ds = synthetic_digits(3, seed=5)
        save_idx(ds, tmp_path / "i.idx", tmp_path / "l.idx")
        back = load_idx(tmp_path / "i.idx", tmp_path / "l.idx")
        assert len(back) == len(ds)
        assert np.array_equal(back.labels, ds.labels)
        # uint8 quantization allows at most half a step of drift
        assert np.abs(back.images - ds.images).max() <= (1 / 127.5) / 2 + 1e-6

    def test_full_corpus_spans_exact_range(self, tmp_path):
        # a corpus using the whole byte range loads to exactly [-1, 1]
        ds = synthetic_digits(50, seed=9)
        save_idx(ds, tmp_path / "i.idx", tmp_path / "l.idx")
        back = load_idx(tmp_path / "i.idx", tmp_path / "l.idx")
        assert back.images.min() == -1.0
        assert back.images.max() == 1.0


class TestStratifiedSplit:
    @pytest.fixture
    def ds(self):
        return synthetic_digits(30, seed=11)

    def test_counts_and_disjoint(self, ds):
        lab, unlab = stratified_split(ds, SplitSpec(count_per_class=10, seed=0))
        assert len(lab) == 100
        assert len(lab) + len(unlab) == len(ds)
        assert not set(lab.ids) & set(unlab.ids)

    def test_stratification_exact(self, ds):
        lab, _ = stratified_split(ds, SplitSpec(count_per_class=7, seed=3))
        counts = np.bincount(lab.labels, minlength=10)
        assert list(counts) == [7] * 10

    def test_zero_count(self, ds):
        lab, unlab = stratified_split(ds, SplitSpec(count_per_class=0, seed=0))
        assert len(lab) == 0
        assert len(unlab) == len(ds)

    def test_deterministic(self, ds):
        spec = SplitSpec(count_per_class=5, seed=42)
        a1, b1 = stratified_split(ds, spec)
        a2, b2 = stratified_split(ds, spec)
        assert np.array_equal(a1.ids, a2.ids)
        assert np.array_equal(b1.ids, b2.ids)

    def test_infeasible(self, ds):
        with pytest.raises(InfeasibleSplitError):
            stratified_split(ds, SplitSpec(count_per_class=31, seed=0))

    def test_shadow_labels_kept_hidden(self, ds):
        lab, unlab = stratified_split(ds, SplitSpec(count_per_class=2, seed=0))
        assert unlab.labels is None
        shadow = unlab.shadow_map()
        for i, true in zip(ds.ids, ds.labels):
            if int(i) in shadow:
                assert shadow[int(i)] == int(true)

    @given(count=st.integers(0, 12), seed=st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_partition_property(self, count, seed):
        ds = synthetic_digits(12, seed=1)
        lab, unlab = stratified_split(ds, SplitSpec(count_per_class=count, seed=seed))
        assert len(lab) + len(unlab) == len(ds)
        assert set(lab.ids) | set(unlab.ids) == set(ds.ids)
        assert not set(lab.ids) & set(unlab.ids)
        if count:
            assert list(np.bincount(lab.labels, minlength=10)) == [count] * 10


def _linear_reference_error(train, test):
    """One-vs-all least-squares classifier; the independent oracle."""
    X = train.images.reshape(len(train), -1)
    X = np.hstack([X, np.ones((len(X), 1))])
    Y = np.eye(train.num_classes)[train.labels]
    W, *_ = np.linalg.lstsq(X, Y, rcond=None)
    Xt = test.images.reshape(len(test), -1)
    Xt = np.hstack([Xt, np.ones((len(Xt), 1))])
    pred = (Xt @ W).argmax(axis=1)
    return float(np.mean(pred != test.labels))


class TestSyntheticBlobs:
    def test_linearly_separable_when_far_apart(self):
        ds = synthetic_blobs(100, K=2, separation=6.0, seed=7)
        lab, rest = stratified_split(ds, SplitSpec(count_per_class=2, seed=0))
        test = Dataset(
            images=rest.images, ids=rest.ids, num_classes=2,
            labels=rest.shadow_labels,
        )
        assert _linear_reference_error(lab, test) < 0.05

    def test_deterministic(self):
        a = synthetic_blobs(5, K=3, separation=2.0, seed=9)
        b = synthetic_blobs(5, K=3, separation=2.0, seed=9)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_counting(self):
        ds = synthetic_blobs(1, K=3, separation=1.0, seed=0)
        assert len(ds) == 3
        assert sorted(ds.labels) == [0, 1, 2]

    def test_rejects_bad_args(self):
        with pytest.raises(ValueError):
            synthetic_blobs(0, K=2, separation=1.0, seed=0)
        with pytest.raises(ValueError):
            synthetic_blobs(1, K=1, separation=1.0, seed=0)
        with pytest.raises(ValueError):
            synthetic_blobs(1, K=2, separation=0.0, seed=0)


class TestSyntheticDigits:
    def test_deterministic(self):
        a = synthetic_digits(4, seed=13)
        b = synthetic_digits(4, seed=13)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_range_and_balance(self):
        ds = synthetic_digits(6, seed=2)
        assert ds.images.min() >= -1.0 and ds.images.max() <= 1.0
        assert list(np.bincount(ds.labels)) == [6] * 10

    def test_learnable(self):
        train = synthetic_digits(200, seed=21)
        test = synthetic_digits(40, seed=22)
        assert _linear_reference_error(train, test) < 0.15


class TestDatasetUtils:
    def test_pad_to_32(self):
        ds = synthetic_digits(1, seed=0, image_size=28)
        padded = pad_images(ds, 32)
        assert padded.image_shape == (32, 32)
        assert padded.images[0, 0, 0] == -1.0
        assert np.array_equal(padded.images[:, 2:30, 2:30], ds.images)

    def test_pad_noop_when_sized(self):
        ds = synthetic_digits(1, seed=0, image_size=28)
        assert pad_images(ds, 28) is ds

    def test_take_subset_deterministic(self):
        ds = synthetic_digits(10, seed=1)
        a = take_subset(ds, 30, seed=4)
        b = take_subset(ds, 30, seed=4)
        assert np.array_equal(a.ids, b.ids)
        assert len(a) == 30

    def test_concat_rejects_duplicate_ids(self):
        ds = synthetic_digits(1, seed=1)
        with pytest.raises(ValueError):
            concat([ds, ds])

    def test_unique_ids_enforced(self):
        with pytest.raises(ValueError):
            Dataset(
                images=np.zeros((2, 4, 4), np.float32),
                ids=np.array([1, 1]),
                num_classes=2,
            )

    def test_intensity_range_enforced(self):
        with pytest.raises(ValueError):
            Dataset(
                images=np.full((1, 4, 4), 1.5, np.float32),
                ids=np.array([0]),
                num_classes=2,
            )
