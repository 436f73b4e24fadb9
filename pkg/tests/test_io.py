import os

import nibabel as nib
import numpy as np
import pytest

from cardioscope.errors import (DuplicateSubjectId, MalformedHeader, MissingFile, MissingTruth,
                                NonPositiveSpacing, UnknownLabel, UnwritablePath)
from cardioscope.io import (CohortManifest, IntensitySpace, Label, PhantomTruth, SubjectRecord, VoxelVolume,
                            load_manifest, load_volume, metadata_path, save_manifest, save_volume,
                            subjects_from_labels)


def hu_volume(shape=(8, 9, 10), spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), seed=0):
    data = np.random.default_rng(seed).uniform(-1000, 1500, shape).astype(np.float32)
    return VoxelVolume(data, spacing, origin)


def test_volume_invariants():
    with pytest.raises(ValueError):
        VoxelVolume(np.zeros((2, 2, 2)), (1, 0, 1))
    with pytest.raises(ValueError):
        VoxelVolume(np.zeros((2, 2, 2)), (1, np.inf, 1))
    with pytest.raises(ValueError):
        VoxelVolume(np.zeros((0, 2, 2)), (1, 1, 1))
    with pytest.raises(ValueError):
        VoxelVolume(np.full((2, 2, 2), 1.5), (1, 1, 1), intensity_space=IntensitySpace.UNIT)
    v = VoxelVolume(np.full((2, 2, 2), 0.5), (1, 1, 1), intensity_space=IntensitySpace.UNIT)
    assert v.shape == (2, 2, 2)


def test_roundtrip_64_cube(tmp_path):
    v = hu_volume((64, 64, 64))
    save_volume(v, tmp_path / "a.nii")
    w = load_volume(tmp_path / "a.nii")
    assert w.shape == (64, 64, 64)
    assert w.spacing == (1.0, 1.0, 1.0)
    np.testing.assert_array_equal(w.data, v.data)
    assert w.intensity_space is IntensitySpace.HU


@pytest.mark.parametrize("spacing", [(0.7, 0.7, 2.5), (0.49, 0.49, 1.0), (1.25, 1.25, 1.5)])
def test_spacing_read_back_exactly(tmp_path, spacing):
    save_volume(hu_volume(spacing=spacing, origin=(-10.3, 4.1, 0.25)), tmp_path / "s.nii.gz")
    w = load_volume(tmp_path / "s.nii.gz")
    assert w.spacing == spacing
    assert w.origin == (-10.3, 4.1, 0.25)


def test_random_32_roundtrip_identical(tmp_path):
    v = hu_volume((32, 32, 32), seed=5)
    save_volume(v, tmp_path / "r.nii")
    np.testing.assert_array_equal(load_volume(tmp_path / "r.nii").data, v.data)


def test_unit_space_survives_roundtrip(tmp_path):
    v = VoxelVolume(np.linspace(0, 1, 27).reshape(3, 3, 3), (1, 1, 1), intensity_space=IntensitySpace.UNIT)
    save_volume(v, tmp_path / "u.nii")
    assert load_volume(tmp_path / "u.nii").intensity_space is IntensitySpace.UNIT


def test_foreign_nifti_defaults_to_hu(tmp_path):
    nib.save(nib.Nifti1Image(np.zeros((4, 4, 4), np.int16), np.diag([2.0, 2.0, 3.0, 1.0])), str(tmp_path / "f.nii"))
    v = load_volume(tmp_path / "f.nii")
    assert v.intensity_space is IntensitySpace.HU and v.spacing == (2.0, 2.0, 3.0)


@pytest.mark.filterwarnings("ignore:Extension size")
def test_load_errors(tmp_path):
    with pytest.raises(MissingFile):
        load_volume(tmp_path / "nope.nii")
    save_volume(hu_volume((16, 16, 16)), tmp_path / "t.nii")
    raw = (tmp_path / "t.nii").read_bytes()
    (tmp_path / "trunc.nii").write_bytes(raw[:200])
    with pytest.raises(MalformedHeader):
        load_volume(tmp_path / "trunc.nii")
    (tmp_path / "garbage.nii").write_bytes(b"not a nifti file at all" * 20)
    with pytest.raises(MalformedHeader):
        load_volume(tmp_path / "garbage.nii")


def test_zero_spacing_rejected(tmp_path):
    img = nib.Nifti1Image(np.zeros((4, 4, 4), np.float32), np.eye(4))
    img.header.set_zooms((1.0, 0.0, 1.0))
    nib.save(img, str(tmp_path / "z.nii"))
    with pytest.raises(NonPositiveSpacing):
        load_volume(tmp_path / "z.nii")


def test_save_into_missing_directory(tmp_path):
    with pytest.raises(UnwritablePath):
        save_volume(hu_volume(), tmp_path / "missing" / "a.nii")


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_save_into_read_only_directory(tmp_path):
    ro = tmp_path / "ro"
    ro.mkdir()
    ro.chmod(0o500)
    try:
        with pytest.raises(UnwritablePath):
            save_volume(hu_volume(), ro / "a.nii")
    finally:
        ro.chmod(0o700)


def test_label_parsing_is_case_sensitive():
    assert Label.parse("NON_SURVIVOR").positive
    assert not Label.parse("SURVIVOR").positive
    with pytest.raises(UnknownLabel):
        Label.parse("survivor")


def write_csv(path, rows):
    path.write_text("subject_id,volume_path,label\n" + "".join(f"{a},{b},{c}\n" for a, b, c in rows))


def test_manifest_counts(tmp_path):
    write_csv(tmp_path / "m.csv", [("a", "a.nii", "SURVIVOR"), ("b", "b.nii", "SURVIVOR"),
                                   ("c", "c.nii", "NON_SURVIVOR")])
    m = load_manifest(tmp_path / "m.csv")
    assert m.counts() == (2, 1)
    assert list(m.labels()) == [0, 0, 1]


def test_full_cohort_counts():
    ids = [f"s{i}" for i in range(1583)]
    m = CohortManifest(subjects_from_labels(ids, [1] * 395 + [0] * 1188))
    assert m.counts() == (1188, 395)


def test_manifest_errors(tmp_path):
    write_csv(tmp_path / "d.csv", [("a", "a.nii", "SURVIVOR"), ("a", "b.nii", "NON_SURVIVOR")])
    with pytest.raises(DuplicateSubjectId):
        load_manifest(tmp_path / "d.csv")
    write_csv(tmp_path / "u.csv", [("a", "a.nii", "DEAD")])
    with pytest.raises(UnknownLabel):
        load_manifest(tmp_path / "u.csv")
    with pytest.raises(MissingFile):
        load_manifest(tmp_path / "u.csv".replace("u", "none"))


def test_manifest_roundtrip_with_truth(tmp_path):
    t = PhantomTruth(((1, 5), (2, 6), (3, 7)), 0.1 + 0.2, 0.123456789012345, 99)
    m = CohortManifest([SubjectRecord("p0", "volumes/p0.nii", Label.NON_SURVIVOR, t),
                        SubjectRecord("p1", "volumes/p1.nii", Label.SURVIVOR, t)], {"generator_seed": "4"})
    save_manifest(m, tmp_path / "m.csv")
    back = load_manifest(tmp_path / "m.csv")
    assert back.ids == ["p0", "p1"]
    assert back.subjects[0].truth == t  # floats survive via repr
    assert back.metadata["generator_seed"] == "4"
    assert metadata_path(tmp_path / "m.csv").is_file()
    assert back.resolve(back.subjects[0]) == tmp_path / "volumes/p0.nii"


def test_partial_truth_rejected(tmp_path):
    (tmp_path / "p.csv").write_text(
        "subject_id,volume_path,label,bbox_x0,bbox_x1,bbox_y0,bbox_y1,bbox_z0,bbox_z1,"
        "calcium_volume_mm3,risk_probability,generator_seed\n"
        "a,a.nii,SURVIVOR,1,2,1,2,1,2,,0.5,3\n")
    with pytest.raises(MissingTruth):
        load_manifest(tmp_path / "p.csv")


def test_check_paths(tmp_path):
    write_csv(tmp_path / "m.csv", [("a", "a.nii", "SURVIVOR")])
    with pytest.raises(MissingFile):
        load_manifest(tmp_path / "m.csv", check_paths=True)
