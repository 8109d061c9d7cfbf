#BraTS NIfTI ingestion into VolumeRecords
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import nibabel as nib
import numpy as np
import torch
import torch.nn.functional as F

from compseg.config import MODALITIES, SPLITS
from compseg.errors import IngestionError, MissingArtifactError
from compseg.services.data import VolumeRecord, annotations_from_mask, split_counts

logger = logging.getLogger(__name__)

# BraTS file code -> internal code (1 ED, 2 ET, 3 NE)
BRATS_LABEL_MAP: Dict[int, int] = {0: 0, 2: 1, 4: 2, 1: 3}

# file suffix per modality, in MODALITIES order
MODALITY_SUFFIXES: Dict[str, str] = {"T1": "t1", "T1Gd": "t1ce", "T2": "t2", "FLAIR": "flair"}
MASK_SUFFIX = "seg"
NIFTI_EXTENSIONS = (".nii.gz", ".nii")


@dataclass
class BratsFiles:
    subject_id: str
    modalities: Dict[str, Path]
    mask: Path


def _find_file(subject_dir: Path, suffix: str) -> Optional[Path]:
    for ext in NIFTI_EXTENSIONS:
        candidate = subject_dir / f"{subject_dir.name}_{suffix}{ext}"
        if candidate.exists():
            return candidate
    return None


def find_brats_files(subject_dir: Path) -> BratsFiles:
    """Locate `<id>_{t1,t1ce,t2,flair,seg}.nii[.gz]` inside one subject directory."""
    subject_dir = Path(subject_dir)
    found: Dict[str, Path] = {}
    for name in MODALITIES:
        path = _find_file(subject_dir, MODALITY_SUFFIXES[name])
        if path is None:
            raise MissingArtifactError(f"{subject_dir}: no {MODALITY_SUFFIXES[name]} volume")
        found[name] = path
    mask = _find_file(subject_dir, MASK_SUFFIX)
    if mask is None:
        raise MissingArtifactError(f"{subject_dir}: no {MASK_SUFFIX} volume")
    return BratsFiles(subject_id=subject_dir.name, modalities=found, mask=mask)


def _read(path: Path) -> np.ndarray:
    try:
        data = np.asanyarray(nib.load(str(path)).dataobj)
    except Exception as e:
        raise IngestionError(f"{path.name}: cannot read NIfTI volume ({e})") from e
    if data.ndim != 3:
        raise IngestionError(f"{path.name}: expected a 3D volume, got shape {data.shape}")
    # H x W x S on disk -> S x H x W
    return np.moveaxis(data, -1, 0)


def normalize_intensity(volume: np.ndarray) -> np.ndarray:
    """Zero mean / unit variance over nonzero (brain) voxels; background stays 0."""
    out = np.zeros(volume.shape, dtype=np.float32)
    brain = volume != 0
    if not brain.any():
        return out
    values = volume[brain].astype(np.float64)
    std = values.std()
    out[brain] = (values - values.mean()) / (std if std > 0 else 1.0)
    return out


def remap_labels(labels: np.ndarray, source: Path) -> np.ndarray:
    codes = np.unique(labels)
    unknown = [int(c) for c in codes if int(c) not in BRATS_LABEL_MAP or c != int(c)]
    if unknown:
        raise IngestionError(f"{source.name}: unknown label codes {unknown}")
    lut = np.zeros(max(BRATS_LABEL_MAP) + 1, dtype=np.uint8)
    for k, v in BRATS_LABEL_MAP.items():
        lut[k] = v
    return lut[labels.astype(np.int64)]


def _resize(volume: np.ndarray, size: int, mode: str) -> np.ndarray:
    # slices as the batch axis, one channel
    t = torch.from_numpy(np.ascontiguousarray(volume, dtype=np.float32)).unsqueeze(1)
    out = F.interpolate(t, size=(size, size), mode=mode)
    return out.squeeze(1).numpy()


def load_brats_volume(files: BratsFiles, image_size: int = 128, split: str = "train") -> VolumeRecord:
    arrays = {name: _read(path) for name, path in files.modalities.items()}
    labels = _read(files.mask)
    for name, arr in arrays.items():
        if arr.shape != labels.shape:
            raise IngestionError(
                f"{files.modalities[name].name}: shape {arr.shape} does not match mask {files.mask.name} {labels.shape}"
            )

    modalities = np.stack(
        [_resize(normalize_intensity(arrays[name]), image_size, "area") for name in MODALITIES]
    ).astype(np.float32)
    mask = _resize(remap_labels(labels, files.mask), image_size, "nearest").round().astype(np.uint8)
    return VolumeRecord(
        modalities=modalities,
        mask=mask,
        annotations=annotations_from_mask(mask),
        subject_id=files.subject_id,
        split=split,
    )


def load_brats_dataset(root: Path, seed: int = 0, image_size: int = 128) -> List[VolumeRecord]:
    """Every subject directory under `root`, split at the reference ratio by a seeded shuffle."""
    root = Path(root)
    if not root.is_dir():
        raise MissingArtifactError(f"BraTS root not found: {root}")
    subjects = sorted(p for p in root.iterdir() if p.is_dir())
    if not subjects:
        raise MissingArtifactError(f"no subject directories under {root}")
    if len(subjects) < len(SPLITS):
        # too few to fill every split: train first, then test
        counts = (1, 0, len(subjects) - 1)
        logger.warning("only %d BraTS subjects under %s; split %s", len(subjects), root, dict(zip(SPLITS, counts)))
    else:
        counts = split_counts(len(subjects))
    order = np.random.default_rng(seed).permutation(len(subjects))
    split_of: Dict[int, str] = {}
    start = 0
    for name, n in zip(SPLITS, counts):
        for i in order[start:start + n]:
            split_of[int(i)] = name
        start += n

    volumes = []
    for i, subject_dir in enumerate(subjects):
        volumes.append(load_brats_volume(find_brats_files(subject_dir), image_size, split_of[i]))
        logger.info("ingested %s (%s)", subject_dir.name, split_of[i])
    return volumes
