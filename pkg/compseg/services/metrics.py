# volume-wise dice and hd95 with per-class mean/std aggregation
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np
import torch
from scipy.ndimage import binary_erosion, distance_transform_edt, generate_binary_structure

from compseg.errors import ShapeError
from compseg.services.model import ModelBundle, run_pipeline

if TYPE_CHECKING:
    from compseg.services.data import VolumeRecord

logger = logging.getLogger(__name__)

WHOLE_CLASSES: Tuple[str, ...] = ("WT",)
SUB_CLASSES: Tuple[str, ...] = ("ED", "ET", "NE")

# S x 4 x H x W images -> S x C x H x W class probabilities
Predictor = Callable[[torch.Tensor], torch.Tensor]


def _pair(pred: np.ndarray, gt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ShapeError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    return p, g


def dice_score_volume(pred: np.ndarray, gt: np.ndarray) -> float:
    """100 * 2|P & G| / (|P| + |G|); two empty masks agree perfectly (100)."""
    p, g = _pair(pred, gt)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 100.0
    return 100.0 * 2.0 * int(np.logical_and(p, g).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """
    Foreground voxels with at least one background 6-neighbour. Voxels outside
    the array count as background.
    """
    m = np.asarray(mask).astype(bool)
    if m.ndim != 3:
        raise ShapeError(f"boundary expects an S x H x W mask, got shape {m.shape}")
    structure = generate_binary_structure(3, 1)
    return m & ~binary_erosion(m, structure=structure, border_value=0)


def _surface_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    # distance from each boundary voxel of src to the nearest boundary voxel of dst
    return distance_transform_edt(~dst)[src]


def hausdorff95(pred: np.ndarray, gt: np.ndarray, percentile: float = 95.0) -> Optional[float]:
    """
    Symmetric percentile Hausdorff distance between boundary sets, voxel units.
    Both empty -> 0.0; exactly one empty -> None (undefined, excluded upstream).
    """
    p, g = _pair(pred, gt)
    if p.ndim != 3:
        raise ShapeError(f"hausdorff95 expects S x H x W masks, got shape {p.shape}")
    p_any, g_any = bool(p.any()), bool(g.any())
    if not p_any and not g_any:
        return 0.0
    if p_any != g_any:
        return None
    bp, bg = boundary(p), boundary(g)
    d_pg = _surface_distances(bp, bg)
    d_gp = _surface_distances(bg, bp)
    return float(max(np.percentile(d_pg, percentile), np.percentile(d_gp, percentile)))


def hausdorff_distance(pred: np.ndarray, gt: np.ndarray) -> Optional[float]:
    return hausdorff95(pred, gt, percentile=100.0)


@dataclass
class VolumeScores:
    dice_percent: float
    hd95: Optional[float]


@dataclass
class ClassAggregate:
    dice_mean: float
    dice_std: float
    hd_mean: Optional[float]
    hd_std: Optional[float]
    hd_excluded: int = 0


@dataclass
class MetricsReport:
    task_mode: str
    classes: Tuple[str, ...]
    per_volume: Dict[str, Dict[str, VolumeScores]] = field(default_factory=dict)
    aggregate: Dict[str, ClassAggregate] = field(default_factory=dict)

    @classmethod
    def from_scores(cls, task_mode: str, per_volume: Dict[str, Dict[str, VolumeScores]]) -> "MetricsReport":
        classes = WHOLE_CLASSES if task_mode == "whole" else SUB_CLASSES
        aggregate: Dict[str, ClassAggregate] = {}
        for c in classes:
            dice = np.array([scores[c].dice_percent for scores in per_volume.values()], dtype=np.float64)
            hd_all = [scores[c].hd95 for scores in per_volume.values()]
            hd = np.array([h for h in hd_all if h is not None], dtype=np.float64)
            excluded = len(hd_all) - hd.size
            if excluded:
                logger.info("class %s: %d of %d volumes have undefined HD95 (one mask empty), excluded",
                            c, excluded, len(hd_all))
            aggregate[c] = ClassAggregate(
                dice_mean=float(dice.mean()),
                dice_std=float(dice.std()),
                hd_mean=float(hd.mean()) if hd.size else None,
                hd_std=float(hd.std()) if hd.size else None,
                hd_excluded=excluded,
            )
        return cls(task_mode=task_mode, classes=classes, per_volume=per_volume, aggregate=aggregate)

    @property
    def mean_dice(self) -> float:
        return float(np.mean([a.dice_mean for a in self.aggregate.values()]))


def class_masks(labels: np.ndarray, task_mode: str) -> Dict[str, np.ndarray]:
    """Binary per-class masks from a label volume (internal codes 1/2/3 = ED/ET/NE)."""
    if task_mode == "whole":
        return {"WT": labels > 0}
    return {name: labels == code for code, name in enumerate(SUB_CLASSES, start=1)}


def predict_volume(volume: "VolumeRecord", predictor: Predictor, batch_size: int = 32) -> np.ndarray:
    """Slice-wise inference stacked back into an S x H x W argmax label volume."""
    images = torch.from_numpy(np.ascontiguousarray(volume.modalities.transpose(1, 0, 2, 3), dtype=np.float32))
    labels: List[np.ndarray] = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            probs = predictor(images[start:start + batch_size])
            labels.append(probs.argmax(dim=1).cpu().numpy())
    return np.concatenate(labels, axis=0)


def evaluate_predictor(volumes: Iterable["VolumeRecord"], predictor: Predictor, task_mode: str, batch_size: int = 32) -> MetricsReport:
    volumes = list(volumes)
    if not volumes:
        raise ShapeError("evaluation split is empty")
    per_volume: Dict[str, Dict[str, VolumeScores]] = {}
    for volume in volumes:
        pred = class_masks(predict_volume(volume, predictor, batch_size), task_mode)
        gt = class_masks(volume.mask, task_mode)
        per_volume[volume.subject_id] = {
            c: VolumeScores(dice_percent=dice_score_volume(pred[c], gt[c]), hd95=hausdorff95(pred[c], gt[c]))
            for c in gt
        }
    return MetricsReport.from_scores(task_mode, per_volume)


def model_predictor(model: torch.nn.Module, bank: Optional[torch.nn.Module] = None) -> Predictor:
    """Wrap either a compositional bundle (+ kernel bank) or a UNet baseline."""
    if isinstance(model, ModelBundle):
        if bank is None:
            raise ShapeError("a compositional model needs its kernel bank for inference")
        return lambda x: run_pipeline(x, model, bank).soft_mask
    return model


def evaluate_model(
    volumes: Iterable["VolumeRecord"],
    model: torch.nn.Module,
    bank: Optional[torch.nn.Module],
    task_mode: str,
    batch_size: int = 32,
) -> MetricsReport:
    was_training = model.training
    model.eval()
    try:
        return evaluate_predictor(volumes, model_predictor(model, bank), task_mode, batch_size)
    finally:
        model.train(was_training)
