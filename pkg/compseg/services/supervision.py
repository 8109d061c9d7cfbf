# weak labels from 2-point annotations, loss terms and the mixed-supervision training loops
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset, Sampler

from compseg.config import TrainingConfig
from compseg.errors import ConfigError, ShapeError
from compseg.services.metrics import MetricsReport, evaluate_model
from compseg.services.model import (
    ModelBundle,
    UNetSegmenter,
    build_bundle,
    build_unet,
    harvest_features,
    pretrain_reconstruction,
    run_pipeline,
)
from compseg.services.vmf_core import KernelBank, clustering_loss, init_kernels_kmeans, renormalize_kernels

if TYPE_CHECKING:
    from compseg.services.data import VolumeRecord

logger = logging.getLogger(__name__)

DICE_EPS = 1e-6

# internal label codes
BACKGROUND, ED, ET, NE = 0, 1, 2, 3
SUB_REGIONS: Tuple[str, str, str] = ("ED", "ET", "NE")
STRUCTURE_LABELS: Dict[str, Tuple[int, ...]] = {
    "WT": (ED, ET, NE),
    "ED": (ED,),
    "ET": (ET,),
    "NE": (NE,),
}


#annotation types

@dataclass(frozen=True)
class TwoPointAnnotation:
    """Bottom/top slice of one structure; both None when the structure is absent."""

    structure_id: str
    slice_count: int
    bottom_slice: Optional[int] = None
    top_slice: Optional[int] = None

    def __post_init__(self) -> None:
        if self.structure_id not in STRUCTURE_LABELS:
            raise ShapeError(f"unknown structure {self.structure_id!r}")
        if (self.bottom_slice is None) != (self.top_slice is None):
            raise ShapeError(f"{self.structure_id}: bottom and top must both be set or both absent")
        if self.present and not 0 <= self.bottom_slice <= self.top_slice < self.slice_count:
            raise ShapeError(
                f"{self.structure_id}: need 0 <= bottom <= top < {self.slice_count}, "
                f"got [{self.bottom_slice}, {self.top_slice}]"
            )

    @property
    def present(self) -> bool:
        return self.bottom_slice is not None

    def as_range(self) -> Optional[List[int]]:
        return [self.bottom_slice, self.top_slice] if self.present else None


@dataclass(frozen=True)
class WeakLabel:
    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values)
        if v.ndim != 1 or v.shape[0] not in (1, 3):
            raise ShapeError(f"weak label must be a 1- or 3-vector, got shape {v.shape}")
        if not np.isin(v, (0, 1)).all():
            raise ShapeError(f"weak label entries must be binary, got {v.tolist()}")

    @property
    def width(self) -> int:
        return int(np.asarray(self.values).shape[0])


@dataclass(frozen=True)
class SliceSample:
    """
    One 2D slice. `label_map` holds class indices (H x W); the one-hot
    `pixel_mask` is derived from it. `has_pixel_label` says whether the mask
    may be used for training.
    """

    image: np.ndarray
    weak_label: WeakLabel
    volume_id: str
    slice_index: int
    n_classes: int
    label_map: Optional[np.ndarray] = None
    has_pixel_label: bool = False

    @property
    def pixel_mask(self) -> Optional[np.ndarray]:
        if self.label_map is None:
            return None
        return (np.arange(self.n_classes)[:, None, None] == self.label_map[None]).astype(np.float32)


def presence_from_two_point(annotation: Optional[TwoPointAnnotation], slice_index: int) -> int:
    if annotation is None or not annotation.present:
        if annotation is not None and not 0 <= slice_index < annotation.slice_count:
            raise ShapeError(f"slice {slice_index} outside volume of {annotation.slice_count} slices")
        return 0
    if not 0 <= slice_index < annotation.slice_count:
        raise ShapeError(f"slice {slice_index} outside volume of {annotation.slice_count} slices")
    return int(annotation.bottom_slice <= slice_index <= annotation.top_slice)


def _check_label_volume(volume_mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(volume_mask)
    if mask.ndim != 3:
        raise ShapeError(f"label volume must be S x H x W, got shape {mask.shape}")
    bad = np.setdiff1d(np.unique(mask), (BACKGROUND, ED, ET, NE))
    if bad.size:
        raise ShapeError(f"label volume holds unknown class ids {bad.tolist()}")
    return mask


def two_point_from_mask(volume_mask: np.ndarray, structure_id: str) -> TwoPointAnnotation:
    """Simulated 2-point annotation: first and last slice containing the structure."""
    mask = _check_label_volume(volume_mask)
    if structure_id not in STRUCTURE_LABELS:
        raise ShapeError(f"unknown structure {structure_id!r}")
    hits = np.isin(mask, STRUCTURE_LABELS[structure_id]).any(axis=(1, 2))
    slices = np.flatnonzero(hits)
    if slices.size == 0:
        return TwoPointAnnotation(structure_id, mask.shape[0])
    return TwoPointAnnotation(structure_id, mask.shape[0], int(slices[0]), int(slices[-1]))


def weak_label_for_slice(annotations: Dict[str, TwoPointAnnotation], slice_index: int, weak_mode: str) -> WeakLabel:
    structures = ("WT",) if weak_mode == "whole" else SUB_REGIONS
    return WeakLabel(np.array([presence_from_two_point(annotations.get(s), slice_index) for s in structures], dtype=np.int64))


#loss terms

def weak_loss(predicted: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over the K entries and the batch."""
    if predicted.shape != target.shape:
        raise ShapeError(f"weak prediction shape {tuple(predicted.shape)} != target shape {tuple(target.shape)}")
    return (predicted - target.to(predicted.dtype)).abs().mean()


def _check_one_hot(target: torch.Tensor) -> None:
    binary = (target == 0) | (target == 1)
    if not bool(binary.all()) or not bool((target.sum(dim=1) == 1).all()):
        raise ShapeError("dice target must be one-hot over the class axis")


def dice_loss(predicted: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """
    1 - mean over batch and foreground classes of (2 sum pq + eps) / (sum p + sum q + eps).
    The background channel (index 0) is excluded.
    """
    if predicted.shape != target.shape or predicted.ndim != 4:
        raise ShapeError(f"dice shapes differ or are not B x C x H x W: {tuple(predicted.shape)} vs {tuple(target.shape)}")
    if predicted.shape[1] < 2:
        raise ShapeError("dice loss needs at least one foreground class")
    _check_one_hot(target)
    p = predicted[:, 1:]
    q = target[:, 1:].to(predicted.dtype)
    inter = (p * q).sum(dim=(2, 3))
    denom = p.sum(dim=(2, 3)) + q.sum(dim=(2, 3))
    return 1.0 - ((2.0 * inter + eps) / (denom + eps)).mean()


@dataclass
class LossBreakdown:
    total: float
    clustering: float
    dice: float
    weak: float
    lambda_dice: float
    lambda_weak: float
    n_samples: int
    n_labeled: int


def total_loss(
    batch: Dict[str, torch.Tensor],
    bundle: ModelBundle,
    bank: KernelBank,
    config: TrainingConfig,
) -> Tuple[torch.Tensor, LossBreakdown]:
    """
    L = L_clu + lambda_dice * L_dice + lambda_weak * L_weak.
    lambda_dice is 1 when the batch holds pixel-labelled samples (Dice averaged
    over those only) and 0 otherwise; L_weak covers every sample.
    """
    images = batch["image"]
    if images.shape[0] == 0:
        raise ShapeError("batch holds no samples")
    out = run_pipeline(images, bundle, bank)

    l_clu = clustering_loss(out.features, bank)
    labeled = batch["has_pixel_label"].bool()
    n_labeled = int(labeled.sum())
    if n_labeled:
        lambda_dice = 1.0
        l_dice = dice_loss(out.soft_mask[labeled], batch["mask"][labeled])
    else:
        lambda_dice = 0.0
        l_dice = out.soft_mask.new_zeros(())
    l_weak = weak_loss(out.presence, batch["weak"])

    total = l_clu + lambda_dice * l_dice + config.lambda_weak * l_weak
    breakdown = LossBreakdown(
        total=float(total),
        clustering=float(l_clu),
        dice=float(l_dice),
        weak=float(l_weak),
        lambda_dice=lambda_dice,
        lambda_weak=float(config.lambda_weak),
        n_samples=int(images.shape[0]),
        n_labeled=n_labeled,
    )
    return total, breakdown


#training data plumbing

class SliceDataset(Dataset):
    """Tensor view over SliceSamples; unlabelled samples get an all-zero mask."""

    def __init__(self, samples: Sequence[SliceSample], n_classes: int, weak_width: int) -> None:
        self.samples = list(samples)
        self.n_classes = n_classes
        self.weak_width = weak_width
        for s in self.samples[:1]:
            if s.weak_label.width != weak_width:
                raise ConfigError(f"samples carry K={s.weak_label.width} weak labels, config expects K={weak_width}")
            if s.n_classes != n_classes:
                raise ConfigError(f"samples carry C={s.n_classes} classes, config expects C={n_classes}")

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, idx: int) -> Dict[str, torch.Tensor]:
        s = self.samples[idx]
        h, w = s.image.shape[1:]
        if s.has_pixel_label and s.label_map is not None:
            mask = torch.from_numpy(s.pixel_mask)
        else:
            mask = torch.zeros(self.n_classes, h, w)
        return {
            "image": torch.from_numpy(np.ascontiguousarray(s.image, dtype=np.float32)),
            "mask": mask,
            "weak": torch.as_tensor(s.weak_label.values, dtype=torch.float32),
            "has_pixel_label": torch.tensor(bool(s.has_pixel_label and s.label_map is not None)),
        }


@dataclass
class TrainingData:
    train: List[SliceSample]
    val_volumes: List["VolumeRecord"] = field(default_factory=list)


class TrainingLog:
    """Append-only JSON-lines record of per-epoch losses and validation Dice."""

    def __init__(self, path: Optional[Path] = None) -> None:
        self.path = Path(path) if path is not None else None
        self.records: List[Dict[str, object]] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: Dict[str, object]) -> None:
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")


@dataclass
class TrainResult:
    bundle: Optional[ModelBundle]
    bank: Optional[KernelBank]
    log: TrainingLog
    best_epoch: int
    best_val_dice: Optional[float]
    unet: Optional[UNetSegmenter] = None


def _validate(data: TrainingData, config: TrainingConfig) -> None:
    if not data.train:
        raise ShapeError("training set is empty")
    first = data.train[0]
    size = first.image.shape[-1]
    if size != config.model.image_size or first.image.shape[0] != config.model.in_channels:
        raise ConfigError(
            f"samples are {first.image.shape[0]} x {size} x {size}, model expects "
            f"{config.model.in_channels} x {config.model.image_size} x {config.model.image_size}"
        )


class TwoStreamBatchSampler(Sampler[List[int]]):
    """
    One pass over the secondary indices, `batch_size - primary_batch_size`
    per batch, each batch topped up with primary indices cycled in a fresh
    shuffled order whenever they run out.
    """

    def __init__(
        self,
        primary: Sequence[int],
        secondary: Sequence[int],
        batch_size: int,
        primary_batch_size: int,
        generator: torch.Generator,
    ) -> None:
        if not primary or not secondary:
            raise ShapeError("both index streams must be non-empty")
        if not 0 < primary_batch_size < batch_size:
            raise ConfigError(f"need 0 < primary batch size < {batch_size}, got {primary_batch_size}")
        self.primary = list(primary)
        self.secondary = list(secondary)
        self.primary_batch_size = primary_batch_size
        self.secondary_batch_size = batch_size - primary_batch_size
        self.generator = generator

    def _cycle(self) -> Iterator[int]:
        while True:
            for i in torch.randperm(len(self.primary), generator=self.generator).tolist():
                yield self.primary[i]

    def __iter__(self) -> Iterator[List[int]]:
        primary = self._cycle()
        order = [self.secondary[i] for i in torch.randperm(len(self.secondary), generator=self.generator).tolist()]
        for start in range(0, len(order), self.secondary_batch_size):
            yield [next(primary) for _ in range(self.primary_batch_size)] + order[start:start + self.secondary_batch_size]

    def __len__(self) -> int:
        return math.ceil(len(self.secondary) / self.secondary_batch_size)


def _loader(dataset: SliceDataset, config: TrainingConfig, epoch: int) -> DataLoader:
    """Labelled slices in every batch when both kinds exist, plain shuffling otherwise."""
    generator = torch.Generator().manual_seed(config.seed * 1000 + epoch)
    labeled = [i for i, s in enumerate(dataset.samples) if s.has_pixel_label and s.label_map is not None]
    unlabeled = [i for i, s in enumerate(dataset.samples) if not (s.has_pixel_label and s.label_map is not None)]
    primary_batch_size = min(config.labeled_batch_size, config.batch_size - 1)
    if primary_batch_size > 0 and labeled and unlabeled:
        sampler = TwoStreamBatchSampler(labeled, unlabeled, config.batch_size, primary_batch_size, generator)
        return DataLoader(dataset, batch_sampler=sampler)
    return DataLoader(dataset, batch_size=config.batch_size, shuffle=True, generator=generator)


def _validation_dice(volumes: Iterable["VolumeRecord"], model, bank, config: TrainingConfig) -> Optional[MetricsReport]:
    volumes = list(volumes)
    if not volumes:
        return None
    return evaluate_model(volumes, model, bank, config.task_mode, batch_size=config.batch_size)


def init_kernel_bank(dataset: SliceDataset, config: TrainingConfig) -> KernelBank:
    """Reconstruction pre-training, feature harvesting and spherical k-means."""
    recon = pretrain_reconstruction(dataset, config)
    logger.info("reconstruction mse %.5f -> %.5f", recon.initial_mse, recon.final_mse)
    vectors = harvest_features(
        recon.extractor, dataset, per_image=config.kmeans_samples_per_image, seed=config.seed, batch_size=config.batch_size
    )
    result = init_kernels_kmeans(vectors, config.n_kernels, max_iters=config.kmeans_max_iters, seed=config.seed, sigma=config.sigma)
    return result.to_bank(config.sigma).to(torch.float32)


def train(data: TrainingData, config: TrainingConfig, log_path: Optional[Path] = None) -> TrainResult:
    """
    Mixed-supervision training: kernel init, then minibatch Adam on total_loss
    with kernel renormalisation after every step. The returned networks are the
    epoch with the best validation Dice (the last epoch when no validation set).
    """
    if config.method != "compositional":
        raise ConfigError(f"train() runs the compositional model, got method={config.method!r}")
    _validate(data, config)
    torch.manual_seed(config.seed)
    dataset = SliceDataset(data.train, config.n_classes, config.weak_width)
    n_labeled = sum(s.has_pixel_label for s in data.train)
    logger.info("training on %d slices (%d pixel-labelled), task=%s weak=%s lambda_weak=%.3f",
                len(dataset), n_labeled, config.task_mode, config.weak_mode, config.lambda_weak)

    bank = init_kernel_bank(dataset, config)
    bundle = build_bundle(config)
    bundle.train()
    optimizer = torch.optim.Adam(list(bundle.parameters()) + list(bank.parameters()), lr=config.learning_rate)

    log = TrainingLog(log_path)
    best_epoch, best_dice = 0, None
    best_state = copy.deepcopy((bundle.state_dict(), bank.state_dict()))

    for epoch in range(1, config.epochs + 1):
        sums = {"total": 0.0, "clustering": 0.0, "dice": 0.0, "weak": 0.0}
        n_seen, n_dice_batches = 0, 0
        for batch in _loader(dataset, config, epoch):
            optimizer.zero_grad()
            loss, parts = total_loss(batch, bundle, bank, config)
            loss.backward()
            optimizer.step()
            renormalize_kernels(bank)
            b = parts.n_samples
            n_seen += b
            for key in sums:
                sums[key] += getattr(parts, key) * b
            n_dice_batches += parts.n_labeled > 0

        record: Dict[str, object] = {"epoch": epoch, **{k: v / n_seen for k, v in sums.items()}}
        record["dice_batches"] = n_dice_batches
        report = _validation_dice(data.val_volumes, bundle, bank, config)
        if report is not None:
            record["val_dice"] = {c: agg.dice_mean for c, agg in report.aggregate.items()}
            record["val_dice_mean"] = report.mean_dice
            if best_dice is None or report.mean_dice > best_dice:
                best_epoch, best_dice = epoch, report.mean_dice
                best_state = copy.deepcopy((bundle.state_dict(), bank.state_dict()))
        else:
            best_epoch = epoch
            best_state = copy.deepcopy((bundle.state_dict(), bank.state_dict()))
        log.append(record)
        logger.info("epoch %d/%d: total=%.4f clu=%.4f dice=%.4f weak=%.4f val_dice=%s",
                    epoch, config.epochs, record["total"], record["clustering"], record["dice"],
                    record["weak"], record.get("val_dice_mean"))

    bundle.load_state_dict(best_state[0])
    bank.load_state_dict(best_state[1])
    bundle.eval()
    return TrainResult(bundle=bundle, bank=bank, log=log, best_epoch=best_epoch, best_val_dice=best_dice)


def train_unet(data: TrainingData, config: TrainingConfig, log_path: Optional[Path] = None) -> TrainResult:
    """Baseline: the UNet sees only the pixel-labelled slices and the Dice loss."""
    if config.method != "unet":
        raise ConfigError(f"train_unet() needs method='unet', got {config.method!r}")
    _validate(data, config)
    labeled = [s for s in data.train if s.has_pixel_label]
    if not labeled:
        raise ShapeError("no pixel-labelled slices to train the unet baseline on")
    torch.manual_seed(config.seed)
    dataset = SliceDataset(labeled, config.n_classes, config.weak_width)
    unet = build_unet(config)
    unet.train()
    optimizer = torch.optim.Adam(unet.parameters(), lr=config.learning_rate)

    log = TrainingLog(log_path)
    best_epoch, best_dice = 0, None
    best_state = copy.deepcopy(unet.state_dict())
    for epoch in range(1, config.epochs + 1):
        running, n_seen = 0.0, 0
        for batch in _loader(dataset, config, epoch):
            optimizer.zero_grad()
            loss = dice_loss(unet(batch["image"]), batch["mask"])
            loss.backward()
            optimizer.step()
            running += float(loss) * batch["image"].shape[0]
            n_seen += batch["image"].shape[0]
        record: Dict[str, object] = {"epoch": epoch, "total": running / n_seen, "dice": running / n_seen}
        report = _validation_dice(data.val_volumes, unet, None, config)
        if report is not None:
            record["val_dice"] = {c: agg.dice_mean for c, agg in report.aggregate.items()}
            record["val_dice_mean"] = report.mean_dice
            if best_dice is None or report.mean_dice > best_dice:
                best_epoch, best_dice = epoch, report.mean_dice
                best_state = copy.deepcopy(unet.state_dict())
        else:
            best_epoch = epoch
            best_state = copy.deepcopy(unet.state_dict())
        log.append(record)
        logger.info("unet epoch %d/%d: dice_loss=%.4f val_dice=%s", epoch, config.epochs, record["total"], record.get("val_dice_mean"))

    unet.load_state_dict(best_state)
    unet.eval()
    return TrainResult(bundle=None, bank=None, log=log, best_epoch=best_epoch, best_val_dice=best_dice, unet=unet)
