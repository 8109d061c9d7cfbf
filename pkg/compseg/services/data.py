# synthetic multi-modal volumes, slice sample streams and on-disk datasets
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from compseg.config import SPLIT_RATIO, SPLITS, SyntheticSpec, TaskMode, config_hash
from compseg.errors import ConfigError, MissingArtifactError, ShapeError
from compseg.services.supervision import (
    ED,
    ET,
    NE,
    STRUCTURE_LABELS,
    SliceSample,
    TwoPointAnnotation,
    WeakLabel,
    two_point_from_mask,
    weak_label_for_slice,
)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
DATASET_FORMAT_VERSION = 1


@dataclass
class TumourGeometry:
    """Nested ellipsoids: ED outer shell, ET at `et_scale`, NE core at `ne_scale`."""

    centre: Tuple[float, int, int]  # (slice, row, col); row/col on the pixel grid
    semi_axes: Tuple[float, float, float]  # ED semi-axes (slices, rows, cols)
    et_scale: float
    ne_scale: float

    def _slice_term(self, z: np.ndarray) -> np.ndarray:
        return ((z - self.centre[0]) / self.semi_axes[0]) ** 2

    def slice_range(self, scale: float, slice_count: int) -> Optional[Tuple[int, int]]:
        """Slices whose cross-section of the scaled ellipsoid contains the in-plane centre."""
        z = np.arange(slice_count, dtype=np.float64)
        hits = np.flatnonzero(self._slice_term(z) <= scale ** 2)
        return (int(hits[0]), int(hits[-1])) if hits.size else None

    def planted_ranges(self, slice_count: int) -> Dict[str, Optional[Tuple[int, int]]]:
        wt = self.slice_range(1.0, slice_count)
        return {"WT": wt, "ED": wt, "ET": self.slice_range(self.et_scale, slice_count),
                "NE": self.slice_range(self.ne_scale, slice_count)}

    def render(self, shape: Tuple[int, int, int]) -> np.ndarray:
        s, h, w = shape
        z = np.arange(s, dtype=np.float64)[:, None, None]
        y = np.arange(h, dtype=np.float64)[None, :, None]
        x = np.arange(w, dtype=np.float64)[None, None, :]
        q = self._slice_term(z) + ((y - self.centre[1]) / self.semi_axes[1]) ** 2 + ((x - self.centre[2]) / self.semi_axes[2]) ** 2
        labels = np.zeros(shape, dtype=np.uint8)
        labels[q <= 1.0] = ED
        labels[q <= self.et_scale ** 2] = ET
        labels[q <= self.ne_scale ** 2] = NE
        return labels


@dataclass
class VolumeRecord:
    modalities: np.ndarray  # 4 x S x H x W, (T1, T1Gd, T2, FLAIR)
    mask: np.ndarray  # S x H x W, 0 background, 1 ED, 2 ET, 3 NE
    annotations: Dict[str, TwoPointAnnotation]
    subject_id: str
    split: str
    planted: Optional[TumourGeometry] = None

    def __post_init__(self) -> None:
        if self.modalities.ndim != 4 or self.modalities.shape[0] != 4:
            raise ShapeError(f"{self.subject_id}: modalities must be 4 x S x H x W, got {self.modalities.shape}")
        if self.mask.shape != self.modalities.shape[1:]:
            raise ShapeError(f"{self.subject_id}: mask shape {self.mask.shape} != image shape {self.modalities.shape[1:]}")
        if self.split not in SPLITS:
            raise ShapeError(f"{self.subject_id}: unknown split {self.split!r}")

    @property
    def slice_count(self) -> int:
        return int(self.mask.shape[0])


def annotations_from_mask(mask: np.ndarray) -> Dict[str, TwoPointAnnotation]:
    return {s: two_point_from_mask(mask, s) for s in STRUCTURE_LABELS}


def split_counts(total: int) -> Tuple[int, int, int]:
    """
    Train/val/test counts at the reference ratio, largest-remainder rounding,
    with at least one volume per split.
    """
    if total < len(SPLITS):
        raise ConfigError(f"need at least {len(SPLITS)} volumes to fill every split, got {total}")
    weight = sum(SPLIT_RATIO)
    exact = [total * r / weight for r in SPLIT_RATIO]
    counts = [math.floor(e) for e in exact]
    by_remainder = sorted(range(len(exact)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in by_remainder[: total - sum(counts)]:
        counts[i] += 1
    for i in range(len(counts)):
        if counts[i] == 0:
            donor = max(range(len(counts)), key=lambda k: counts[k])
            counts[donor] -= 1
            counts[i] += 1
    return counts[0], counts[1], counts[2]


def _ellipse_mask(shape: Tuple[int, int, int], centre: Sequence[float], axes: Sequence[float]) -> np.ndarray:
    s, h, w = shape
    z = np.arange(s)[:, None, None]
    y = np.arange(h)[None, :, None]
    x = np.arange(w)[None, None, :]
    return ((z - centre[0]) / axes[0]) ** 2 + ((y - centre[1]) / axes[1]) ** 2 + ((x - centre[2]) / axes[2]) ** 2 <= 1.0


def _random_geometry(spec: SyntheticSpec, rng: np.random.Generator) -> TumourGeometry:
    n, s = spec.image_size, spec.slice_count
    rz = max(1.0, rng.uniform(*spec.ed_extent_range) * s)
    ry = rng.uniform(*spec.ed_radius_range) * n
    rx = rng.uniform(*spec.ed_radius_range) * n
    # slices outside the volume are clipped by slice_range and render alike
    cz = rng.uniform(rz, s - 1 - rz) if s - 1 > 2 * rz else (s - 1) / 2.0
    offset = 0.15 * n
    cy = int(round(n / 2 + rng.uniform(-offset, offset)))
    cx = int(round(n / 2 + rng.uniform(-offset, offset)))
    return TumourGeometry(centre=(float(cz), cy, cx), semi_axes=(rz, ry, rx), et_scale=spec.et_scale, ne_scale=spec.ne_scale)


def generate_volume(spec: SyntheticSpec, rng: np.random.Generator, subject_id: str, split: str) -> VolumeRecord:
    n, s = spec.image_size, spec.slice_count
    shape = (s, n, n)
    jitter = rng.uniform(0.92, 1.08, size=3)
    centre = ((s - 1) / 2.0, (n - 1) / 2.0, (n - 1) / 2.0)
    brain = _ellipse_mask(shape, centre, (0.6 * s * jitter[0], 0.42 * n * jitter[1], 0.36 * n * jitter[2]))
    ventricle_axes = (0.3 * s, 0.14 * n, 0.045 * n)
    csf = _ellipse_mask(shape, (centre[0], centre[1], centre[2] - 0.07 * n), ventricle_axes)
    csf |= _ellipse_mask(shape, (centre[0], centre[1], centre[2] + 0.07 * n), ventricle_axes)
    csf &= brain

    geometry = _random_geometry(spec, rng) if rng.random() < spec.tumour_probability else None
    mask = geometry.render(shape) if geometry is not None else np.zeros(shape, dtype=np.uint8)

    tissue = np.zeros(shape, dtype=np.int8) - 1
    tissue[brain] = 0
    tissue[csf] = 1
    for code in (ED, ET, NE):
        tissue[mask == code] = 1 + code
    table = [spec.contrast[k] for k in ("brain", "csf", "ed", "et", "ne")]

    modalities = np.zeros((4,) + shape, dtype=np.float32)
    for m in range(4):
        lut = np.array([0.0] + [row[m] for row in table], dtype=np.float64)
        img = lut[tissue + 1]
        img = gaussian_filter(img, sigma=(0, 1.0, 1.0))
        img = img + rng.normal(0.0, spec.noise, size=shape)
        modalities[m] = np.clip(img, 0.0, 1.0)

    return VolumeRecord(
        modalities=modalities,
        mask=mask,
        annotations=annotations_from_mask(mask),
        subject_id=subject_id,
        split=split,
        planted=geometry,
    )


def generate_synthetic_dataset(spec: SyntheticSpec) -> List[VolumeRecord]:
    """Deterministic for a given spec: one child seed per volume, seeded split permutation."""
    counts = split_counts(spec.volumes)
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.volumes + 1)
    order = np.random.default_rng(seeds[-1]).permutation(spec.volumes)
    split_of = np.empty(spec.volumes, dtype=object)
    bounds = np.cumsum((0,) + counts)
    for k, name in enumerate(SPLITS):
        split_of[order[bounds[k]:bounds[k + 1]]] = name

    volumes = [
        generate_volume(spec, np.random.default_rng(seeds[i]), f"synth-{i:04d}", str(split_of[i]))
        for i in range(spec.volumes)
    ]
    logger.info("generated %d synthetic volumes (train/val/test = %d/%d/%d)", spec.volumes, *counts)
    return volumes


#slice samples

def make_slice_samples(
    volume: VolumeRecord,
    task_mode: TaskMode,
    weak_mode: Optional[TaskMode] = None,
    label_source: str = "annotation",
) -> List[SliceSample]:
    """
    One sample per slice. Weak labels come from the 2-point annotations
    (`label_source="annotation"`) or from the pixel mask (`"mask"`). Pixel
    masks are attached but flagged unavailable until subset sampling.
    """
    weak_mode = weak_mode or task_mode
    if label_source not in ("annotation", "mask"):
        raise ConfigError(f"label_source must be 'annotation' or 'mask', got {label_source!r}")
    n_classes = 2 if task_mode == "whole" else 4
    samples: List[SliceSample] = []
    for s in range(volume.slice_count):
        labels = volume.mask[s]
        label_map = (labels > 0).astype(np.uint8) if task_mode == "whole" else labels.astype(np.uint8)
        if label_source == "annotation":
            weak = weak_label_for_slice(volume.annotations, s, weak_mode)
        else:
            structures = ("WT",) if weak_mode == "whole" else ("ED", "ET", "NE")
            weak = WeakLabel(np.array([int(np.isin(labels, STRUCTURE_LABELS[k]).any()) for k in structures], dtype=np.int64))
        samples.append(SliceSample(
            image=volume.modalities[:, s],
            weak_label=weak,
            volume_id=volume.subject_id,
            slice_index=s,
            n_classes=n_classes,
            label_map=label_map,
            has_pixel_label=False,
        ))
    return samples


def samples_for_split(
    volumes: Iterable[VolumeRecord],
    split: str,
    task_mode: TaskMode,
    weak_mode: Optional[TaskMode] = None,
) -> List[SliceSample]:
    samples: List[SliceSample] = []
    for v in volumes:
        if v.split == split:
            samples.extend(make_slice_samples(v, task_mode, weak_mode))
    return samples


def labeled_count(fraction: float, n: int) -> int:
    # rounding guards float noise such as 0.07 * 100 = 7.000000000000001
    return int(math.ceil(round(fraction * n, 9)))


def sample_labeled_subset(samples: Sequence[SliceSample], fraction: float, seed: int) -> List[SliceSample]:
    """
    Keep pixel masks on ceil(fraction * N) slices drawn globally without
    replacement. One seeded permutation is cut at the prefix, so smaller
    fractions are subsets of larger ones for the same seed.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"label fraction must lie in (0, 1], got {fraction}")
    n = len(samples)
    chosen = set(np.random.default_rng(seed).permutation(n)[: labeled_count(fraction, n)].tolist())
    return [replace(sample, has_pixel_label=i in chosen) for i, sample in enumerate(samples)]


#persistence

def _annotation_ranges(volume: VolumeRecord) -> Dict[str, Optional[List[int]]]:
    return {k: a.as_range() for k, a in volume.annotations.items()}


def save_dataset(volumes: Sequence[VolumeRecord], out_dir: Path, seed: int, spec: Optional[SyntheticSpec] = None) -> Path:
    out_dir = Path(out_dir)
    entries = []
    for v in volumes:
        target = out_dir / v.split / f"{v.subject_id}.npz"
        target.parent.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(target, modalities=v.modalities, mask=v.mask)
        entries.append({
            "subject_id": v.subject_id,
            "split": v.split,
            "slice_count": v.slice_count,
            "file": f"{v.split}/{v.subject_id}.npz",
            "annotations": _annotation_ranges(v),
        })
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "seed": seed,
        "spec_hash": config_hash(spec) if spec is not None else None,
        "volumes": entries,
    }
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    logger.info("dataset written to %s (%d volumes)", out_dir, len(entries))
    return path


def manifest_hash(data_dir: Path) -> str:
    path = Path(data_dir) / MANIFEST_NAME
    if not path.exists():
        raise MissingArtifactError(f"dataset manifest not found: {path}")
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _annotations_from_manifest(raw: Dict[str, Optional[List[int]]], slice_count: int) -> Dict[str, TwoPointAnnotation]:
    out: Dict[str, TwoPointAnnotation] = {}
    for structure, rng in raw.items():
        if rng is None:
            out[structure] = TwoPointAnnotation(structure, slice_count)
        else:
            out[structure] = TwoPointAnnotation(structure, slice_count, int(rng[0]), int(rng[1]))
    return out


def load_dataset(data_dir: Path, splits: Optional[Iterable[str]] = None) -> List[VolumeRecord]:
    data_dir = Path(data_dir)
    path = data_dir / MANIFEST_NAME
    if not path.exists():
        raise MissingArtifactError(f"dataset manifest not found: {path}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported dataset format_version {manifest.get('format_version')!r}")
    wanted = set(splits) if splits is not None else set(SPLITS)
    volumes: List[VolumeRecord] = []
    for entry in manifest["volumes"]:
        if entry["split"] not in wanted:
            continue
        file = data_dir / entry["file"]
        if not file.exists():
            raise MissingArtifactError(f"volume file listed in manifest is missing: {file}")
        with np.load(file) as arrays:
            modalities, mask = arrays["modalities"], arrays["mask"]
        volumes.append(VolumeRecord(
            modalities=modalities,
            mask=mask,
            annotations=_annotations_from_manifest(entry["annotations"], int(entry["slice_count"])),
            subject_id=entry["subject_id"],
            split=entry["split"],
        ))
    return volumes
