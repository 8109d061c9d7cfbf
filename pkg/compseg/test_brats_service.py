import logging

import nibabel as nib
import numpy as np
import pytest

from compseg.errors import IngestionError, MissingArtifactError
from compseg.services.brats_service import (
    find_brats_files,
    load_brats_dataset,
    load_brats_volume,
    normalize_intensity,
    remap_labels,
)


def write_subject(root, subject_id, shape=(48, 48, 10), labels=None, seed=0, mismatch=None):
    """BraTS-style subject directory with synthetic NIfTI volumes (H x W x S on disk)."""
    rng = np.random.default_rng(seed)
    folder = root / subject_id
    folder.mkdir(parents=True)
    brain = np.zeros(shape, dtype=bool)
    brain[4:-4, 4:-4, :] = True
    for suffix in ("t1", "t1ce", "t2", "flair"):
        data_shape = mismatch if suffix == "t2" and mismatch else shape
        data = np.zeros(data_shape, dtype=np.float32)
        if data_shape == shape:
            data[brain] = rng.uniform(100, 1000, size=int(brain.sum()))
        nib.save(nib.Nifti1Image(data, np.eye(4)), folder / f"{subject_id}_{suffix}.nii.gz")
    if labels is None:
        labels = np.zeros(shape, dtype=np.uint8)
        labels[20:28, 20:28, 3:7] = 2
        labels[22:26, 22:26, 4:6] = 4
        labels[23:25, 23:25, 5] = 1
    nib.save(nib.Nifti1Image(labels, np.eye(4)), folder / f"{subject_id}_seg.nii.gz")
    return folder


def test_load_volume_shapes_and_labels(tmp_path):
    folder = write_subject(tmp_path, "BraTS_001")
    volume = load_brats_volume(find_brats_files(folder), image_size=16)
    assert volume.modalities.shape == (4, 10, 16, 16)
    assert volume.mask.shape == (10, 16, 16)
    assert set(np.unique(volume.mask)) <= {0, 1, 2, 3}
    assert (volume.annotations["WT"].bottom_slice, volume.annotations["WT"].top_slice) == (3, 6)
    assert volume.annotations["NE"].as_range() in ([5, 5], None)


def test_nearest_downscale_keeps_label_set(tmp_path):
    labels = np.zeros((48, 48, 4), dtype=np.uint8)
    labels[10:30, 10:30, 1:3] = 2
    folder = write_subject(tmp_path, "s", shape=(48, 48, 4), labels=labels)
    volume = load_brats_volume(find_brats_files(folder), image_size=16)
    assert set(np.unique(volume.mask)) <= {0, 1}


def test_background_only_mask_gives_absent_annotations(tmp_path):
    folder = write_subject(tmp_path, "empty", labels=np.zeros((48, 48, 10), dtype=np.uint8))
    volume = load_brats_volume(find_brats_files(folder), image_size=16)
    assert not any(a.present for a in volume.annotations.values())


def test_normalize_intensity_over_brain_voxels():
    v = np.zeros((2, 4, 4))
    v[:, 1:3, 1:3] = np.arange(8).reshape(2, 2, 2) + 1
    out = normalize_intensity(v)
    brain = v != 0
    assert out[brain].mean() == pytest.approx(0.0, abs=1e-6)
    assert out[brain].std() == pytest.approx(1.0, abs=1e-6)
    assert (out[~brain] == 0).all()


def test_remap_labels(tmp_path):
    labels = np.array([0, 1, 2, 4])
    assert remap_labels(labels, tmp_path / "seg.nii").tolist() == [0, 3, 1, 2]
    with pytest.raises(IngestionError, match="seg.nii"):
        remap_labels(np.array([0, 5]), tmp_path / "seg.nii")


def test_shape_mismatch_names_file(tmp_path):
    folder = write_subject(tmp_path, "bad", mismatch=(40, 48, 10))
    with pytest.raises(IngestionError, match="bad_t2"):
        load_brats_volume(find_brats_files(folder), image_size=16)


def test_missing_modality(tmp_path):
    folder = write_subject(tmp_path, "x")
    (folder / "x_flair.nii.gz").unlink()
    with pytest.raises(MissingArtifactError):
        find_brats_files(folder)


def test_dataset_split(tmp_path):
    for i in range(5):
        write_subject(tmp_path, f"BraTS_{i:03d}", shape=(32, 32, 4), seed=i)
    volumes = load_brats_dataset(tmp_path, seed=0, image_size=16)
    splits = [v.split for v in volumes]
    assert splits.count("train") == 3 and splits.count("val") == 1 and splits.count("test") == 1


def test_small_subject_sets_warn_and_skip_validation(tmp_path, caplog):
    with pytest.raises(MissingArtifactError):
        load_brats_dataset(tmp_path, image_size=16)
    write_subject(tmp_path, "BraTS_000", shape=(32, 32, 4))
    with caplog.at_level(logging.WARNING):
        assert [v.split for v in load_brats_dataset(tmp_path, image_size=16)] == ["train"]
    assert "only 1 BraTS subjects" in caplog.text
    write_subject(tmp_path, "BraTS_001", shape=(32, 32, 4), seed=1)
    assert sorted(v.split for v in load_brats_dataset(tmp_path, seed=2, image_size=16)) == ["test", "train"]


@pytest.mark.slow
def test_full_size_ingestion(tmp_path):
    folder = write_subject(tmp_path, "full", shape=(240, 240, 155))
    volume = load_brats_volume(find_brats_files(folder))
    assert volume.modalities.shape == (4, 155, 128, 128)
