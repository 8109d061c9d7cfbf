#kernel activation export for single slices
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from compseg.config import MODALITIES  # noqa: E402
from compseg.errors import ShapeError  # noqa: E402
from compseg.services.model import ModelBundle, run_pipeline  # noqa: E402
from compseg.services.vmf_core import KernelBank  # noqa: E402

logger = logging.getLogger(__name__)

MASK_LEVELS = 3.0  # highest internal label code


def scale_channel(values: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; a constant channel maps to uniform 0.5."""
    values = np.asarray(values, dtype=np.float64)
    low, high = float(values.min()), float(values.max())
    if high - low <= 0.0:
        return np.full(values.shape, 0.5)
    return (values - low) / (high - low)


def channel_order(activations: np.ndarray) -> List[int]:
    """Channels by descending mean activation; ties keep the lower index first."""
    means = activations.reshape(activations.shape[0], -1).mean(axis=1)
    return [int(i) for i in np.argsort(-means, kind="stable")]


def tumour_kernel_overlap(activations: np.ndarray, tumour_mask: np.ndarray) -> Tuple[int, float]:
    """
    Best channel by intersection-over-activation with the tumour mask:
    sum(a_j * m) / sum(a_j) for a J x H x W activation stack.
    """
    a = np.asarray(activations, dtype=np.float64)
    m = np.asarray(tumour_mask).astype(bool)
    if a.ndim != 3 or a.shape[1:] != m.shape:
        raise ShapeError(f"activations {a.shape} do not match mask {m.shape}")
    mass = a.reshape(a.shape[0], -1).sum(axis=1)
    inside = (a * m[None]).reshape(a.shape[0], -1).sum(axis=1)
    ratio = np.divide(inside, mass, out=np.zeros_like(inside), where=mass > 0)
    best = int(np.argmax(ratio))
    return best, float(ratio[best])


@dataclass
class SliceExport:
    directory: Path
    files: List[Path]
    order: List[int]


def _save_gray(path: Path, image: np.ndarray) -> Path:
    plt.imsave(path, image, cmap="gray", vmin=0.0, vmax=1.0)
    return path


def export_slice(
    out_dir: Path,
    subject_id: str,
    slice_index: int,
    modalities: np.ndarray,
    mask: np.ndarray,
    activations: np.ndarray,
) -> SliceExport:
    """Write 4 modality images, the mask image, J channel images and channels.json."""
    target = Path(out_dir) / f"{subject_id}_s{slice_index:03d}"
    target.mkdir(parents=True, exist_ok=True)
    files: List[Path] = []
    for name, image in zip(MODALITIES, modalities):
        files.append(_save_gray(target / f"modality_{name}.png", scale_channel(image)))
    files.append(_save_gray(target / "mask.png", np.asarray(mask, dtype=np.float64) / MASK_LEVELS))

    order = channel_order(activations)
    means = activations.reshape(activations.shape[0], -1).mean(axis=1)
    channels: List[Dict[str, object]] = []
    for rank, j in enumerate(order):
        name = f"channel_{rank:02d}_k{j:02d}.png"
        files.append(_save_gray(target / name, scale_channel(activations[j])))
        channels.append({"rank": rank, "kernel": j, "mean_activation": float(means[j]), "file": name})

    manifest = {"subject_id": subject_id, "slice_index": slice_index, "order": order, "channels": channels}
    (target / "channels.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    logger.info("exported %d images to %s", len(files), target)
    return SliceExport(directory=target, files=files, order=order)


def slice_activations(modalities: np.ndarray, bundle: ModelBundle, bank: KernelBank) -> np.ndarray:
    """J x H x W activations for one 4 x H x W slice."""
    x = torch.from_numpy(np.ascontiguousarray(modalities, dtype=np.float32)).unsqueeze(0)
    bundle.eval()
    with torch.no_grad():
        return run_pipeline(x, bundle, bank).activations[0].double().numpy()


def export_activations(
    out_dir: Path,
    volume,
    slice_indices: Sequence[int],
    bundle: ModelBundle,
    bank: KernelBank,
) -> List[SliceExport]:
    exports = []
    for s in slice_indices:
        if not 0 <= s < volume.slice_count:
            raise ShapeError(f"{volume.subject_id}: slice {s} outside 0..{volume.slice_count - 1}")
        acts = slice_activations(volume.modalities[:, s], bundle, bank)
        exports.append(export_slice(out_dir, volume.subject_id, s, volume.modalities[:, s], volume.mask[s], acts))
    return exports
