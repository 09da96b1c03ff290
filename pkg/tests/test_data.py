import struct

import numpy as np
import pytest

from daftlab.data import (
    BACKGROUND_THRESHOLD,
    CLASS_T_RANGES,
    DataFormatError,
    DomainDataset,
    SHOE_T_RANGE,
    SPLIT_EVAL20,
    SPLIT_TRAIN80,
    TOP_T_RANGE,
    assign_splits,
    color_rgb,
    load_dataset,
    make_colored_dataset,
    make_domain_suite,
    make_two_feature_dataset,
    parse_idx,
    save_dataset,
    split_domains,
    splitmix64,
)


# ---------------------------------------------------------------------------
# IDX parsing against hand-built byte blobs


def idx_images_blob(images):
    """Hand-assemble an IDX image file (big-endian) from a uint8 array."""
    n, h, w = images.shape
    blob = struct.pack(">IIII", 0x00000803, n, h, w)
    return blob + bytes(images.reshape(-1).tolist())


def idx_labels_blob(labels):
    blob = struct.pack(">II", 0x00000801, len(labels))
    return blob + bytes(labels)


def test_parse_idx_images_exact_bytes(tmp_path):
    imgs = np.array(
        [[[0, 255], [128, 64]],
         [[1, 2], [3, 4]]], dtype=np.uint8)
    path = tmp_path / "imgs.idx"
    path.write_bytes(idx_images_blob(imgs))
    got = parse_idx(str(path))
    assert got.shape == (2, 2, 2)
    np.testing.assert_allclose(got, imgs.astype(np.float32) / 255.0)


def test_parse_idx_labels_exact_bytes(tmp_path):
    path = tmp_path / "labels.idx"
    path.write_bytes(idx_labels_blob([0, 9, 4]))
    got = parse_idx(str(path))
    np.testing.assert_array_equal(got, [0, 9, 4])
    assert got.dtype == np.int64


@pytest.mark.parametrize("mutate, match", [
    (lambda b: b[:3], "truncated IDX header"),
    (lambda b: struct.pack(">I", 0x00000999) + b[4:], "bad IDX magic"),
    (lambda b: b[:10], "truncated IDX dimension header"),
    (lambda b: b[:-1], "truncated IDX payload"),
    (lambda b: b + b"\x00", "trailing bytes"),
    (lambda b: struct.pack(">IIII", 0x00000803, 2**31, 28, 28), "overflow|truncated"),
])
def test_parse_idx_corrupt_images(tmp_path, mutate, match):
    imgs = np.zeros((2, 2, 2), dtype=np.uint8)
    blob = idx_images_blob(imgs)
    path = tmp_path / "bad.idx"
    path.write_bytes(mutate(blob))
    with pytest.raises(DataFormatError, match=match):
        parse_idx(str(path))


@pytest.mark.parametrize("mutate, match", [
    (lambda b: b[:7], "truncated IDX dimension header"),
    (lambda b: b[:-1], "truncated IDX payload"),
    (lambda b: b + b"\x07", "trailing bytes"),
    (lambda b: b"\x00" * len(b), "bad IDX magic"),
])
def test_parse_idx_corrupt_labels(tmp_path, mutate, match):
    blob = idx_labels_blob([1, 2, 3])
    path = tmp_path / "bad.idx"
    path.write_bytes(mutate(blob))
    with pytest.raises(DataFormatError, match=match):
        parse_idx(str(path))


# ---------------------------------------------------------------------------
# coloring rules


def test_color_rgb_midpoint():
    assert color_rgb(0.5) == (0.5, 0.5, 0.0)
    assert color_rgb(0.0) == (1.0, 0.0, 0.0)
    assert color_rgb(1.0) == (0.0, 1.0, 0.0)


def test_correlated_regime_respects_class_ranges():
    ds = make_colored_dataset(n_per_class=100, seed=0, mode="train_correlated")
    t = ds.color_t
    tops = t[ds.labels == 0]
    shoes = t[ds.labels == 1]
    assert np.all((tops >= TOP_T_RANGE[0]) & (tops <= TOP_T_RANGE[1]))
    assert np.all((shoes >= SHOE_T_RANGE[0]) & (shoes <= SHOE_T_RANGE[1]))


def test_uncorrelated_regime_decorrelates_color_and_label():
    ds = make_colored_dataset(n_per_class=5000, seed=1, mode="test_uncorrelated")
    r = np.corrcoef(ds.color_t, ds.labels)[0, 1]
    assert abs(r) < 0.05
    assert ds.color_t.min() < 0.05 and ds.color_t.max() > 0.95


def test_background_pixels_carry_the_class_color():
    ds = make_colored_dataset(n_per_class=5, seed=2, mode="train_correlated")
    for img, t in zip(ds.images, ds.color_t):
        # background := pixels where the blue channel is nonzero can't happen
        # (color has b=0); instead find pixels matching (1-t, t, 0) exactly
        bg = (img[2] == 0.0) & np.isclose(img[0], 1.0 - t) & np.isclose(img[1], t)
        assert bg.mean() > 0.3  # silhouettes leave most of the canvas empty
        fg = ~bg
        # foreground is grayscale: all three channels equal and >= threshold
        np.testing.assert_array_equal(img[0][fg], img[1][fg])
        np.testing.assert_array_equal(img[0][fg], img[2][fg])
        assert np.all(img[0][fg] >= BACKGROUND_THRESHOLD)


def test_pixels_in_unit_range():
    ds = make_colored_dataset(n_per_class=50, seed=3, mode="test_uncorrelated")
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert ds.images.dtype == np.float32


def test_color_threshold_classifier_separates_train_not_test():
    # mean green-minus-red over background pixels tracks t; thresholding t at
    # the midpoint of the overlap region must solve the correlated regime but
    # be at chance on the uncorrelated one
    cut = 0.5 * (SHOE_T_RANGE[0] + TOP_T_RANGE[1])

    def color_pred(ds):
        preds = np.empty(len(ds), dtype=np.int64)
        for i, img in enumerate(ds.images):
            bg = img[2] == 0.0
            t_est = img[1][bg].mean()  # green channel == t on background
            preds[i] = int(t_est > cut)
        return preds

    train = make_colored_dataset(n_per_class=250, seed=4, mode="train_correlated")
    test = make_colored_dataset(n_per_class=250, seed=5, mode="test_uncorrelated")
    assert np.mean(color_pred(train) == train.labels) >= 0.95
    assert abs(np.mean(color_pred(test) == test.labels) - 0.5) <= 0.03


def test_dataset_generation_is_seed_deterministic():
    a = make_colored_dataset(n_per_class=20, seed=9)
    b = make_colored_dataset(n_per_class=20, seed=9)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.split_tags, b.split_tags)
    c = make_colored_dataset(n_per_class=20, seed=10)
    assert not np.array_equal(a.images, c.images)


def test_splitmix64_spreads_seeds():
    vals = {splitmix64(0, i) for i in range(1000)}
    assert len(vals) == 1000
    assert splitmix64(3, 5) == splitmix64(3, 5)
    assert splitmix64(3, 5) != splitmix64(4, 5)


# ---------------------------------------------------------------------------
# two-feature toy dataset


def test_two_feature_agreement_rate():
    ds = make_two_feature_dataset(20000, seed=0, spurious_strength=0.8, mode="train")
    sign = 2 * ds.labels - 1
    f1 = ds.images[:, 1, 0, 0]
    agree = np.mean(np.sign(f1) == sign)
    assert abs(agree - 0.9) < 0.01  # 0.5 + 0.8/2


def test_two_feature_test_mode_is_coin_flip():
    ds = make_two_feature_dataset(20000, seed=1, spurious_strength=0.8, mode="test")
    sign = 2 * ds.labels - 1
    agree = np.mean(np.sign(ds.images[:, 1, 0, 0]) == sign)
    assert abs(agree - 0.5) < 0.02


def test_two_feature_robust_feature_is_aligned():
    ds = make_two_feature_dataset(20000, seed=2, spurious_strength=0.0, mode="train")
    sign = 2 * ds.labels - 1
    agree = np.mean(np.sign(ds.images[:, 0, 0, 0]) == sign)
    assert agree > 0.95  # N(label_sign, 0.5) rarely crosses zero


# ---------------------------------------------------------------------------
# domains and splits


def test_assign_splits_is_80_20_within_one():
    for n in [10, 101, 257]:
        tags = assign_splits(n, np.random.default_rng(0))
        n_train = int(np.sum(tags == SPLIT_TRAIN80))
        assert abs(n_train - 0.8 * n) <= 1
        assert n_train + int(np.sum(tags == SPLIT_EVAL20)) == n


def test_domain_suite_structure():
    ds = make_domain_suite(n_per_class_per_domain=10, seed=0)
    assert ds.domains == [0, 1, 2, 3, 4]
    for d in range(5):
        sub_labels = ds.labels[ds.domain_ids == d]
        assert len(sub_labels) == 20
        assert set(sub_labels.tolist()) == {0, 1}
    # correlated domains keep t within class ranges; domain 4 roams freely
    for d in range(4):
        mask = ds.domain_ids == d
        for cls in (0, 1):
            lo, hi = CLASS_T_RANGES[cls]
            ts = ds.color_t[mask & (ds.labels == cls)]
            assert np.all((ts >= lo) & (ts <= hi))


def test_domain_suite_domains_are_hue_shifted():
    ds = make_domain_suite(n_per_class_per_domain=50, seed=1)
    means = [ds.color_t[(ds.domain_ids == d) & (ds.labels == 0)].mean() for d in range(4)]
    assert means == sorted(means)  # quarters progress across the class range


def test_split_domains_partition_and_audit_log():
    ds = make_domain_suite(n_per_class_per_domain=25, seed=2)
    train, heldout = split_domains(ds, holdout_domain=3)
    assert 3 not in set(train.domain_ids.tolist())
    assert set(heldout.domain_ids.tolist()) == {3}
    assert np.all(train.split_tags == SPLIT_TRAIN80)
    assert np.all(heldout.split_tags == SPLIT_EVAL20)
    logged_domains = {entry[0] for entry in ds.access_log}
    assert logged_domains == {0, 1, 2, 3, 4}
    with pytest.raises(ValueError):
        split_domains(ds, holdout_domain=7)


def test_take_filters_and_logs_purpose():
    ds = make_domain_suite(n_per_class_per_domain=5, seed=3)
    sub = ds.take(domains=[1, 2], split=SPLIT_TRAIN80, purpose="unit-test")
    assert set(sub.domain_ids.tolist()) <= {1, 2}
    assert np.all(sub.split_tags == SPLIT_TRAIN80)
    assert (1, SPLIT_TRAIN80, "unit-test") in ds.access_log
    assert all(entry[0] in (1, 2) for entry in ds.access_log)


# ---------------------------------------------------------------------------
# serialization


def test_dataset_roundtrip(tmp_path):
    ds = make_domain_suite(n_per_class_per_domain=6, seed=4, image_size=12)
    path = str(tmp_path / "d.bin")
    save_dataset(ds, path)
    back = load_dataset(path)
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.domain_ids, ds.domain_ids)
    np.testing.assert_array_equal(back.split_tags, ds.split_tags)


def test_dataset_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"WRONGMAG" + b"\x00" * 40)
    with pytest.raises(DataFormatError, match="magic"):
        load_dataset(str(path))


def test_dataset_unsupported_version(tmp_path):
    ds = make_colored_dataset(n_per_class=2, seed=0, image_size=8)
    path = tmp_path / "d.bin"
    save_dataset(ds, str(path))
    raw = bytearray(path.read_bytes())
    raw[8] = 2  # version field (little-endian u4 right after the magic)
    bad = tmp_path / "v2.bin"
    bad.write_bytes(bytes(raw))
    with pytest.raises(DataFormatError, match="version"):
        load_dataset(str(bad))


def test_dataset_truncated_payload(tmp_path):
    ds = make_colored_dataset(n_per_class=2, seed=0, image_size=8)
    path = tmp_path / "d.bin"
    save_dataset(ds, str(path))
    raw = path.read_bytes()
    trunc = tmp_path / "t.bin"
    trunc.write_bytes(raw[:-5])
    with pytest.raises(DataFormatError, match="truncated"):
        load_dataset(str(trunc))


def test_domain_dataset_length_mismatch_rejected():
    with pytest.raises(ValueError):
        DomainDataset(images=np.zeros((3, 1, 2, 2), dtype=np.float32),
                      labels=np.zeros(2, dtype=np.int64),
                      domain_ids=np.zeros(3, dtype=np.int64),
                      split_tags=np.zeros(3, dtype=np.uint8))
