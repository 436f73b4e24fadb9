import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cardioscope.errors import BBoxOutOfRange, EmptyCohort, NoPositiveSlices
from cardioscope.io import VoxelVolume
from cardioscope.locator import (Axis, BBox3D, HeartLocator, LocatorTrainConfig, SliceClassifier, bbox_iou,
                                 center_fallback_bbox, classify_slices, combine_to_bbox, crop_heart, longest_run,
                                 slice_accuracy, train_slice_classifier)
from cardioscope.phantom import PhantomParams, generate_cohort

QUICK = LocatorTrainConfig(steps=30, batch_size=8, input_size=32, channels=(4, 8, 8), seed=1)


@pytest.mark.parametrize("p, run", [
    ([0.1, 0.2, 0.9, 0.8, 0.7, 0.1], (2, 5)),
    ([0.9, 0.1, 0.9, 0.9], (2, 4)),
    ([0.9, 0.1, 0.9, 0.1], (0, 1)),       # equal lengths: earliest
    ([0.6, 0.7, 0.8], (0, 3)),
    ([0.1, 0.5], (1, 2)),                 # threshold is inclusive
    ([0.1, 0.2], None),
])
def test_longest_run(p, run):
    assert longest_run(p, 0.5) == run


def test_combine_examples():
    p = [0.1, 0.2, 0.9, 0.8, 0.7, 0.1]
    assert combine_to_bbox(p, p, p, 0.5, 0).ranges == ((2, 5),) * 3
    assert combine_to_bbox(p, p, p, 0.5, 1).ranges == ((1, 6),) * 3
    assert combine_to_bbox(p, p, p, 0.5, 10).ranges == ((0, 6),) * 3
    with pytest.raises(NoPositiveSlices):
        combine_to_bbox(p, [0.1] * 6, p)


def test_combine_axis_order():
    ax, cor, sag = [0, 1, 1, 0], [1, 0, 0], [0, 0, 0, 0, 1]
    assert combine_to_bbox(ax, cor, sag, 0.5, 0).ranges == ((4, 5), (0, 1), (1, 3))


def test_combine_rejects_bad_threshold():
    with pytest.raises(ValueError):
        combine_to_bbox([1], [1], [1], threshold=1.0)


probs = st.lists(st.floats(0, 1), min_size=1, max_size=30)


@given(probs, probs, probs, st.floats(0.01, 0.98), st.floats(0.01, 0.98))
def test_combine_monotone_in_threshold(a, c, s, t1, t2):
    lo, hi = sorted((t1, t2))
    try:
        high = combine_to_bbox(a, c, s, hi, 0)
    except NoPositiveSlices:
        return
    low = combine_to_bbox(a, c, s, lo, 0)
    for (l0, l1), (h0, h1) in zip(low.ranges, high.ranges):
        # every high-threshold run sits inside a low-threshold run, so the
        # longest low run is at least as long
        assert l1 - l0 >= h1 - h0


def test_margin_clamp_can_break_monotonicity():
    # earliest-wins tie picks the edge run at the lower threshold; clamping
    # then trims its margin while the interior run keeps both sides
    s = [0.5, 0.0, 1.0, 0.0]
    low = combine_to_bbox([1.0], [1.0], s, 0.5, 1).ranges[0]
    high = combine_to_bbox([1.0], [1.0], s, 0.75, 1).ranges[0]
    assert (low, high) == ((0, 2), (1, 4))


@settings(max_examples=50, deadline=None)
@given(st.tuples(*[st.integers(1, 12)] * 3), st.floats(0.01, 0.99), st.integers(0, 20), st.integers(0, 2**31))
def test_crop_never_out_of_bounds(shape, threshold, margin, seed):
    r = np.random.default_rng(seed)
    v = VoxelVolume(r.normal(size=shape), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
    p = [r.uniform(size=n) for n in (shape[2], shape[1], shape[0])]
    try:
        b = combine_to_bbox(*p, threshold, margin)
    except NoPositiveSlices:
        b = center_fallback_bbox(shape)
    out = crop_heart(v, b)
    assert out.shape == b.extent


def test_crop_heart_examples(rng):
    v = VoxelVolume(rng.normal(size=(30, 30, 30)), (0.5, 0.7, 2.0), (1.0, 2.0, 3.0))
    full = crop_heart(v, BBox3D(((0, 30),) * 3))
    np.testing.assert_array_equal(full.data, v.data)
    assert full.origin == v.origin
    c = crop_heart(v, BBox3D(((10, 20),) * 3))
    assert c.shape == (10, 10, 10)
    assert c.origin == pytest.approx((1.0 + 10 * 0.5, 2.0 + 10 * 0.7, 3.0 + 10 * 2.0))
    np.testing.assert_array_equal(c.data, v.data[10:20, 10:20, 10:20])
    with pytest.raises(BBoxOutOfRange):
        crop_heart(v, BBox3D(((10, 31), (0, 1), (0, 1))))


def test_bbox_iou():
    a = BBox3D(((0, 10),) * 3)
    assert bbox_iou(a, a) == 1.0
    assert bbox_iou(a, BBox3D(((10, 20),) * 3)) == 0.0
    half = BBox3D(((0, 5), (0, 10), (0, 10)))
    assert bbox_iou(a, half) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        BBox3D(((0, 0), (0, 1), (0, 1)))


def test_fallback_box_is_centred():
    assert center_fallback_bbox((64, 64, 10)).ranges == ((16, 48), (16, 48), (2, 7))
    assert center_fallback_bbox((1, 1, 1)).ranges == ((0, 1),) * 3


def test_empty_cohort():
    with pytest.raises(EmptyCohort):
        train_slice_classifier([], Axis.AXIAL, QUICK)


@pytest.fixture(scope="module")
def quick_clf(small_cohort):
    return train_slice_classifier(small_cohort, Axis.CORONAL, QUICK)


def test_classify_shape_and_range(quick_clf, small_cohort):
    from cardioscope.io import load_volume
    v = load_volume(small_cohort.resolve(small_cohort.subjects[0]))
    p = classify_slices(v, quick_clf)
    assert p.shape == (v.shape[1],)
    assert np.all((p >= 0) & (p <= 1))


def test_duplicated_slices_equal_probabilities(quick_clf, rng):
    sl = rng.uniform(-1000, 500, size=(20, 1, 20))
    v = VoxelVolume(np.repeat(sl, 7, axis=1), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
    p = classify_slices(v, quick_clf)
    assert np.all(p == p[0])


def test_training_is_deterministic(quick_clf, small_cohort):
    again = train_slice_classifier(small_cohort, Axis.CORONAL, QUICK)
    for a, b in zip(quick_clf.net.state_dict().values(), again.net.state_dict().values()):
        assert torch.equal(a, b)


def test_save_load_roundtrip(quick_clf, tmp_path, rng):
    path = tmp_path / "clf.pt"
    quick_clf.save(path)
    back = SliceClassifier.load(path)
    assert back.axis is Axis.CORONAL and back.meta["seed"] == 1 and back.meta["steps"] == 30
    x = torch.from_numpy(rng.normal(size=(5, 1, 32, 32)).astype(np.float32))
    np.testing.assert_array_equal(back.predict(x), quick_clf.predict(x))


def test_locator_save_load_and_fallback(quick_clf, tmp_path):
    import dataclasses
    clfs = [dataclasses.replace(quick_clf, axis=a) for a in (Axis.AXIAL, Axis.CORONAL, Axis.SAGITTAL)]
    loc = HeartLocator(*clfs, threshold=0.99, margin_vox=2)
    loc.save(tmp_path / "loc")
    back = HeartLocator.load(tmp_path / "loc")
    assert (back.threshold, back.margin_vox) == (0.99, 2)
    air = VoxelVolume(np.full((16, 16, 16), -1000.0), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
    box, warnings = back.locate(air)
    if warnings:
        assert box == center_fallback_bbox(air.shape)


@pytest.mark.slow
class TestTrainedAxial:
    """20 phantoms, 2,000 steps, checked on 10 held-out phantoms."""

    @pytest.fixture(scope="class")
    def trained(self, tmp_path_factory):
        train = generate_cohort(20, PhantomParams(), seed=101, out_dir=tmp_path_factory.mktemp("loc_train"))
        held = generate_cohort(10, PhantomParams(), seed=202, out_dir=tmp_path_factory.mktemp("loc_val"))
        clf = train_slice_classifier(train, Axis.AXIAL, LocatorTrainConfig(steps=2000, seed=5), validation=held)
        return clf, held

    def test_validation_accuracy(self, trained):
        clf, held = trained
        assert clf.meta["val_accuracy"] == slice_accuracy(clf, held)
        assert clf.meta["val_accuracy"] > 0.8

    def test_all_air_slice(self, trained):
        clf, _ = trained
        from cardioscope.locator import _to_slices
        air = _to_slices(np.full((64, 64, 1), -1000.0), Axis.AXIAL, clf.input_size)
        assert clf.predict(air)[0] < 0.5

    def test_inside_exceeds_outside(self, trained):
        from cardioscope.io import load_volume
        clf, held = trained
        for s, t in zip(held.subjects, held.require_truth()):
            p = classify_slices(load_volume(held.resolve(s)), clf)
            z0, z1 = t.heart_bbox[2]
            inside = np.zeros(p.size, bool)
            inside[z0:z1] = True
            assert p[inside].mean() > p[~inside].mean()
