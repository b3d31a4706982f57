import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles as O
from esanet import data as D
from esanet.errors import ConfigurationError, UsageError
from esanet.metrics import ConfusionMatrix, argmax_classes, segmentation_metrics

SPEC = D.ToyDatasetSpec(train_samples=16, val_samples=8)


def test_spec_validation():
    with pytest.raises(ConfigurationError, match="height"):
        D.ToyDatasetSpec(height=48)
    with pytest.raises(ConfigurationError):
        D.ToyDatasetSpec(num_classes=1)
    with pytest.raises(UsageError):
        SPEC.split_size("holdout")


def test_generation_is_deterministic_and_valid():
    a, b = D.generate_toy_rgbd(SPEC, "train", 3), D.generate_toy_rgbd(SPEC, "train", 3)
    assert all(np.array_equal(x, y) for x, y in ((a.rgb, b.rgb), (a.depth, b.depth),
                                                  (a.labels, b.labels)))
    c = D.generate_toy_rgbd(SPEC, "val", 3)
    assert not np.array_equal(a.labels, c.labels)
    assert a.rgb.shape == (1, 3, 64, 64) and a.depth.shape == (1, 1, 64, 64)
    assert a.labels.dtype == np.uint8
    assert 0 <= a.rgb.min() and a.rgb.max() <= 1
    valid = a.depth[a.depth > 0]
    assert np.isfinite(a.depth).all() and valid.min() >= 0.5 and valid.max() <= 10
    assert set(np.unique(a.labels)) <= {0, 1, 2, 3, D.VOID}


def test_generation_audit_over_100_samples():
    spec = D.ToyDatasetSpec(train_samples=100)
    seen = set()
    invalid = 0
    for i in range(100):
        s = D.generate_toy_rgbd(spec, "train", i)
        seen |= set(np.unique(s.labels).tolist())
        invalid += int((s.depth == 0).sum())
    assert seen == {0, 1, 2, 3, D.VOID}
    assert 0.015 < invalid / (100 * 64 * 64) < 0.025


def _class_pixels(spec, cls, n=60):
    rgb, dep = [], []
    for i in range(n):
        s = D.generate_toy_rgbd(spec, "train", i)
        m = s.labels[0, 0] == cls
        rgb.append(s.rgb[0][:, m])
        dep.append(s.depth[0, 0][m & (s.depth[0, 0] > 0)])
    return np.concatenate(rgb, 1), np.concatenate(dep)


def test_depth_only_class_shares_color_but_not_depth():
    spec = D.ToyDatasetSpec(train_samples=60)
    rgb_a, dep_a = _class_pixels(spec, 2)
    rgb_b, dep_b = _class_pixels(spec, 3)
    assert np.abs(rgb_a.mean(1) - rgb_b.mean(1)).max() < 0.03
    assert dep_a.max() < dep_b.min()
    plain = D.ToyDatasetSpec(train_samples=60, depth_only_class=False)
    rgb_a, _ = _class_pixels(plain, 2)
    rgb_b, _ = _class_pixels(plain, 3)
    assert np.abs(rgb_a.mean(1) - rgb_b.mean(1)).max() > 0.1


def test_augment_identity():
    s = D.generate_toy_rgbd(SPEC, "train", 0)
    t = D.apply_augment(s, D.AugmentParams())
    assert np.array_equal(t.rgb, s.rgb) and np.array_equal(t.depth, s.depth)
    assert np.array_equal(t.labels, s.labels)


def test_flip_twice_is_identity():
    s = D.generate_toy_rgbd(SPEC, "train", 1)
    p = D.AugmentParams(flip=True)
    t = D.apply_augment(D.apply_augment(s, p), p)
    assert np.array_equal(t.rgb, s.rgb) and np.array_equal(t.labels, s.labels)


def test_augment_label_set_audit():
    rng = np.random.default_rng(0)
    for i in range(100):
        s = D.generate_toy_rgbd(SPEC, "train", i % 16)
        t = D.augment(s, rng)
        assert set(np.unique(t.labels)) <= set(np.unique(s.labels))
        assert t.rgb.shape == s.rgb.shape and t.labels.dtype == np.uint8
        assert 0 <= t.rgb.min() and t.rgb.max() <= 1


def test_augment_scales_depth_metrically():
    s = D.generate_toy_rgbd(SPEC, "train", 2)
    s.depth[:] = 4.0
    t = D.apply_augment(s, D.AugmentParams(scale=1.25, crop_y=3, crop_x=5))
    assert np.allclose(t.depth, 4.0 / 1.25)


def test_augment_never_mixes_invalid_depth():
    s = D.generate_toy_rgbd(SPEC, "train", 2)
    s.depth[:] = 4.0
    s.depth[0, 0, ::7, ::5] = 0.0
    t = D.apply_augment(s, D.AugmentParams(scale=1.3, crop_y=4, crop_x=4))
    v = t.depth[t.depth > 0]
    assert np.allclose(v, 4.0 / 1.3)


def test_hsv_jitter_only_touches_rgb():
    s = D.generate_toy_rgbd(SPEC, "train", 4)
    t = D.apply_augment(s, D.AugmentParams(hue=0.02, saturation=0.1, value=-0.1))
    assert not np.array_equal(t.rgb, s.rgb)
    assert np.array_equal(t.depth, s.depth) and np.array_equal(t.labels, s.labels)


@pytest.mark.parametrize("freq,expected", [((0.2, 0.8), (2.5, 0.625)),
                                           ((0.1, 0.3, 0.6), (3.0, 1.0, 0.5)),
                                           ((0.25,) * 4, (1.0,) * 4)])
def test_weights_hand_examples(freq, expected):
    assert np.allclose(D.weights_from_frequencies(freq), expected)


def test_class_frequency_definition():
    maps = [np.array([[0, 0, 1, D.VOID]]), np.array([[2, 2, 2, 0]])]
    f = D.class_frequencies(maps, 3)
    # class 0: 3 px over images 1 and 2 (3 + 4 scored px); class 1: 1/3; class 2: 3/4
    assert np.allclose(f, [3 / 7, 1 / 3, 3 / 4])
    w = D.median_frequency_weights(maps, 3)
    assert w[0] == pytest.approx(1.0)
    assert np.all(np.diff(w[np.argsort(f)]) < 0)
    with pytest.raises(UsageError, match=r"\[3\]"):
        D.class_frequencies(maps, 4)


def test_downscale_labels():
    lab = np.arange(64, dtype=np.uint8).reshape(1, 1, 8, 8)
    assert np.array_equal(D.downscale_labels(lab, 1), lab)
    assert (D.downscale_labels(np.full((1, 1, 8, 8), 7), 4) == 7).all()
    for f in (2, 4, 8):
        out = D.downscale_labels(lab, f)
        for i in range(8 // f):
            for j in range(8 // f):
                assert out[0, 0, i, j] == lab[0, 0, f * i + f // 2, f * j + f // 2]
    checker = (np.indices((8, 8)).sum(0) % 2).astype(np.uint8)
    assert (D.downscale_labels(checker, 2) == 0).all()
    with pytest.raises(UsageError):
        D.downscale_labels(lab, 3)


def test_normalization():
    samples = [D.generate_toy_rgbd(SPEC, "train", i) for i in range(8)]
    st_ = D.compute_stats(samples)
    dep = np.concatenate([s.depth.ravel() for s in samples])
    assert st_.depth_mean == pytest.approx(dep[dep > 0].mean(), rel=1e-6)
    z = D.normalize_depth(samples[0].depth, st_)
    assert (z[samples[0].depth == 0] == 0).all()
    r = np.concatenate([D.normalize_rgb(s.rgb, st_) for s in samples])
    assert np.allclose(r.mean(axis=(0, 2, 3)), 0, atol=1e-4)
    assert np.allclose(r.std(axis=(0, 2, 3)), 1, atol=1e-3)
    assert D.InputStats.from_dict(st_.to_dict()) == st_


def test_dataset_write_and_load(tmp_path):
    spec = D.ToyDatasetSpec(train_samples=3, val_samples=2)
    D.write_dataset(spec, tmp_path)
    ds = D.load_dataset(tmp_path, "train")
    assert len(ds) == 3 and ds.spec == spec
    for i in range(3):
        a, b = ds[i], D.generate_toy_rgbd(spec, "train", i)
        assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.labels, b.labels)
    with pytest.raises(IndexError):
        ds[3]
    with pytest.raises(FileNotFoundError):
        D.load_dataset(tmp_path / "none", "train")


# ---------------------------------------------------------------- metrics

def test_perfect_prediction():
    lab = np.random.default_rng(0).integers(0, 4, (2, 8, 8))
    assert ConfusionMatrix(4).update(lab, lab).miou() == 1.0


def test_constant_prediction_hand_case():
    truth = np.array([[0, 0, 1, 1]])
    m = segmentation_metrics(ConfusionMatrix(2).update(np.zeros_like(truth), truth))
    assert np.allclose(m.iou, [0.5, 0.0]) and m.miou == 0.25


def test_random_case_matches_counting_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        truth = rng.integers(0, 3, (4, 4))
        truth[rng.random((4, 4)) < 0.2] = D.VOID
        pred = rng.integers(0, 3, (4, 4))
        cm = ConfusionMatrix(3).update(pred, truth)
        ref = O.confusion(pred, truth, 3)
        assert np.array_equal(cm.counts, ref)
        assert np.isclose(cm.miou(), O.miou_from_counts(pred, truth, 3), equal_nan=True)


def test_absent_classes_excluded_and_void_ignored():
    truth = np.array([0, 0, 255, 1])
    pred = np.array([0, 0, 2, 1])
    cm = ConfusionMatrix(3).update(pred, truth)
    assert np.isnan(cm.iou()[2]) and cm.miou() == 1.0 and cm.total == 3


def test_merge_is_order_free():
    rng = np.random.default_rng(2)
    parts = [(rng.integers(0, 3, 16), rng.integers(0, 3, 16)) for _ in range(5)]
    a, b = ConfusionMatrix(3), ConfusionMatrix(3)
    for p, t in parts:
        a.merge(ConfusionMatrix(3).update(p, t))
    for p, t in reversed(parts):
        b.merge(ConfusionMatrix(3).update(p, t))
    assert np.array_equal(a.counts, b.counts)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_miou_permutation_invariant_and_bounded(seed):
    rng = np.random.default_rng(seed)
    truth, pred = rng.integers(0, 4, 30), rng.integers(0, 4, 30)
    perm = rng.permutation(4)
    m1 = ConfusionMatrix(4).update(pred, truth).miou()
    m2 = ConfusionMatrix(4).update(perm[pred], perm[truth]).miou()
    assert 0 <= m1 <= 1 and np.isclose(m1, m2)


def test_argmax_ties_go_low():
    logits = np.zeros((1, 3, 1, 2))
    logits[0, 2, 0, 1] = 1
    assert argmax_classes(logits).tolist() == [[[0, 2]]]


def test_metric_errors():
    with pytest.raises(UsageError):
        ConfusionMatrix(2).update(np.array([0, 1]), np.array([0]))
    with pytest.raises(UsageError):
        ConfusionMatrix(2).update(np.array([0, 5]), np.array([0, 1]))
    with pytest.raises(UsageError):
        ConfusionMatrix(2).merge(ConfusionMatrix(3))
