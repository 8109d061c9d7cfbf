#main file for pipeline commands, shared by the cli and the api
from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from compseg.config import RunConfig, TrainingConfig, write_resolved_config
from compseg.errors import ConfigError, MissingArtifactError, ShapeError
from compseg.formatters.report_formatter import ReportEntry, write_reports
from compseg.services.brats_service import load_brats_dataset
from compseg.services.data import (
    VolumeRecord,
    generate_synthetic_dataset,
    load_dataset,
    manifest_hash,
    samples_for_split,
    sample_labeled_subset,
    save_dataset,
)
from compseg.services.metrics import class_masks, dice_score_volume, evaluate_model
from compseg.services.model import LoadedCheckpoint, load_checkpoint, run_pipeline, save_checkpoint
from compseg.services.supervision import TrainingData, train, train_unet
from compseg.services.visualization import SliceExport, export_activations

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.pt"
TRAIN_LOG_NAME = "train_log.jsonl"


def method_label(config: TrainingConfig) -> str:
    """Table row name for a trained configuration."""
    if config.method == "unet":
        return "UNet"
    if config.lambda_weak == 0:
        return "Compositional w/o weak"
    if config.task_mode == "sub":
        return f"Compositional w/ {'sub-region' if config.weak_mode == 'sub' else 'whole-tumour'} weak"
    return "Compositional"


def _require_data_dir(config: RunConfig) -> Path:
    if config.data_dir is None:
        raise ConfigError("no dataset directory given (--data)")
    return config.data_dir


#synth-data

def synth_data(config: RunConfig) -> Path:
    """Generate (or ingest from BraTS) a dataset and persist it under out_dir."""
    out_dir = config.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    if config.brats_root is not None:
        volumes = load_brats_dataset(config.brats_root, seed=config.synthetic.seed, image_size=config.training.model.image_size)
        save_dataset(volumes, out_dir, seed=config.synthetic.seed)
    else:
        volumes = generate_synthetic_dataset(config.synthetic)
        save_dataset(volumes, out_dir, seed=config.synthetic.seed, spec=config.synthetic)
    write_resolved_config(config, out_dir)
    logger.info("dataset ready at %s (manifest %s)", out_dir, manifest_hash(out_dir)[:12])
    return out_dir


#train

def build_training_data(volumes: List[VolumeRecord], config: TrainingConfig) -> TrainingData:
    samples = samples_for_split(volumes, "train", config.task_mode, config.weak_mode)
    if not samples:
        raise ShapeError("dataset holds no training volumes")
    samples = sample_labeled_subset(samples, config.label_fraction, config.seed)
    return TrainingData(train=samples, val_volumes=[v for v in volumes if v.split == "val"])


def train_run(config: RunConfig) -> Path:
    data_dir = _require_data_dir(config)
    training = config.training
    volumes = load_dataset(data_dir, splits=("train", "val"))
    data = build_training_data(volumes, training)

    run_dir = config.out_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    write_resolved_config(config, run_dir)
    log_path = run_dir / TRAIN_LOG_NAME
    if log_path.exists():
        log_path.unlink()

    if training.method == "unet":
        result = train_unet(data, training, log_path)
    else:
        result = train(data, training, log_path)
    extra = {
        "manifest_hash": manifest_hash(data_dir),
        "best_epoch": result.best_epoch,
        "best_val_dice": result.best_val_dice,
    }
    save_checkpoint(run_dir / CHECKPOINT_NAME, training, bundle=result.bundle, bank=result.bank, unet=result.unet, extra=extra)
    logger.info("training finished: best epoch %d, val dice %s", result.best_epoch, result.best_val_dice)
    return run_dir


#eval

def _model_of(loaded: LoadedCheckpoint) -> torch.nn.Module:
    return loaded.bundle if loaded.bundle is not None else loaded.unet


def eval_run(config: RunConfig, pinned: Sequence[str] = ()) -> Dict[str, Path]:
    """
    Evaluate every checkpoint on the test split and write the table, csv and summary.
    Each checkpoint must agree with `config.training` on the `pinned` architecture
    fields; the others may differ between checkpoints.
    """
    if not config.checkpoints:
        raise ConfigError("no checkpoint given (--checkpoint)")
    test_volumes = load_dataset(_require_data_dir(config), splits=("test",))
    if not test_volumes:
        raise ShapeError("dataset holds no test volumes")

    entries: List[ReportEntry] = []
    for path in config.checkpoints:
        loaded = load_checkpoint(path)
        mismatch = config.training.architecture_mismatch(loaded.config, pinned)
        if mismatch:
            raise ConfigError(f"{path}: checkpoint disagrees with the requested config on {', '.join(mismatch)}")
        report = evaluate_model(test_volumes, _model_of(loaded), loaded.bank, loaded.config.task_mode,
                                batch_size=loaded.config.batch_size)
        entries.append(ReportEntry(method_label(loaded.config), loaded.config.label_fraction, report))
        logger.info("%s: mean dice %.2f", path, report.mean_dice)

    out_dir = config.out_dir
    write_resolved_config(config, out_dir)
    return write_reports(entries, out_dir)


#viz-activations

def _pick_volume(volumes: List[VolumeRecord], subject_id: Optional[str]) -> VolumeRecord:
    if subject_id is None:
        tested = [v for v in volumes if v.split == "test"]
        return (tested or volumes)[0]
    for v in volumes:
        if v.subject_id == subject_id:
            return v
    raise MissingArtifactError(f"subject {subject_id!r} not in dataset")


def _default_slice(volume: VolumeRecord) -> int:
    wt = volume.annotations.get("WT")
    if wt is not None and wt.present:
        return (wt.bottom_slice + wt.top_slice) // 2
    return volume.slice_count // 2


def viz_run(config: RunConfig) -> List[SliceExport]:
    if not config.checkpoints:
        raise ConfigError("no checkpoint given (--checkpoint)")
    loaded = load_checkpoint(config.checkpoints[0])
    if loaded.bundle is None:
        raise ConfigError("activation export needs a compositional checkpoint")
    volume = _pick_volume(load_dataset(_require_data_dir(config)), config.subject_id)
    slices = config.slice_indices or [_default_slice(volume)]
    write_resolved_config(config, config.out_dir)
    return export_activations(config.out_dir, volume, slices, loaded.bundle, loaded.bank)


#single-slice inference

def segment_slice(loaded: LoadedCheckpoint, volume: VolumeRecord, slice_index: int) -> Dict[str, object]:
    """Predicted classes, presence scores and slice Dice for one slice."""
    if not 0 <= slice_index < volume.slice_count:
        raise ShapeError(f"{volume.subject_id}: slice {slice_index} outside 0..{volume.slice_count - 1}")
    x = torch.from_numpy(np.ascontiguousarray(volume.modalities[:, slice_index], dtype=np.float32)).unsqueeze(0)
    task_mode = loaded.config.task_mode
    with torch.no_grad():
        if loaded.bundle is not None:
            out = run_pipeline(x, loaded.bundle, loaded.bank)
            probs, presence = out.soft_mask, out.presence[0].tolist()
        else:
            probs, presence = loaded.unet(x), None
    labels = probs.argmax(dim=1)[0].numpy()
    pred = class_masks(labels[None], task_mode)
    gt = class_masks(volume.mask[slice_index][None], task_mode)
    return {
        "subject_id": volume.subject_id,
        "slice_index": slice_index,
        "task_mode": task_mode,
        "presence": presence,
        "pixel_counts": {c: int(m.sum()) for c, m in pred.items()},
        "dice": {c: dice_score_volume(pred[c], gt[c]) for c in gt},
    }
