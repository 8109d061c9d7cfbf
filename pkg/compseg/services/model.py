# networks for the compositional segmenter, the unet baseline and kernel pre-training
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.data import DataLoader, Dataset, TensorDataset

from compseg.config import ModelConfig, TrainingConfig
from compseg.errors import ConfigError, MissingArtifactError, ShapeError
from compseg.services.vmf_core import (
    FeatureMap,
    KernelBank,
    load_kernel_bank,
    normalize_features,
    save_kernel_bank,
    vmf_activations,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


def conv_block(in_c: int, out_c: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_c, out_c, 3, padding=1),
        nn.BatchNorm2d(out_c),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_c, out_c, 3, padding=1),
        nn.BatchNorm2d(out_c),
        nn.ReLU(inplace=True),
    )


class UNetBackbone(nn.Module):
    """
    2D UNet encoder-decoder with skip connections and no classification layer.
    One encoder level per entry of `widths`; the output keeps the input
    resolution and has `out_channels` channels.
    """

    def __init__(self, in_channels: int, widths: Sequence[int], out_channels: int) -> None:
        super().__init__()
        widths = list(widths)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.encoders = nn.ModuleList()
        prev = in_channels
        for w in widths:
            self.encoders.append(conv_block(prev, w))
            prev = w
        self.pool = nn.MaxPool2d(2)
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for deep, shallow in zip(widths[:0:-1], widths[-2::-1]):
            self.ups.append(nn.ConvTranspose2d(deep, shallow, 2, stride=2))
            self.decoders.append(conv_block(2 * shallow, shallow))
        self.out = nn.Conv2d(widths[0], out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips: List[torch.Tensor] = []
        for i, enc in enumerate(self.encoders):
            x = enc(x if i == 0 else self.pool(x))
            skips.append(x)
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips[:-1])):
            x = dec(torch.cat([up(x), skip], dim=1))
        return self.out(x)


class TaskHead(nn.Module):
    """Shallow conv head: J activations -> C class probabilities per position."""

    def __init__(self, n_kernels: int, n_classes: int, widths: Sequence[int] = (32, 16)) -> None:
        super().__init__()
        w1, w2 = widths
        self.n_kernels = n_kernels
        self.n_classes = n_classes
        self.net = nn.Sequential(
            nn.Conv2d(n_kernels, w1, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(w1, w2, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(w2, n_classes, 3, padding=1),
        )

    def forward(self, activations: torch.Tensor) -> torch.Tensor:
        if activations.ndim != 4 or activations.shape[1] != self.n_kernels:
            raise ShapeError(
                f"task head expects B x {self.n_kernels} x H x W activations, got {tuple(activations.shape)}"
            )
        return torch.softmax(self.net(activations), dim=1)


class WeakClassifier(nn.Module):
    """
    Two strided convs over the foreground channels, global max pooling,
    affine map, sigmoid. The background channel (1 - sum of foreground) is
    dropped; presence follows the strongest local response, not foreground area.
    """

    def __init__(self, n_classes: int, n_outputs: int, widths: Sequence[int] = (16, 32)) -> None:
        super().__init__()
        if n_outputs not in (1, n_classes - 1):
            raise ShapeError(f"weak width K={n_outputs} incompatible with C={n_classes} (need 1 or C-1)")
        w1, w2 = widths
        self.n_classes = n_classes
        self.n_outputs = n_outputs
        self.features = nn.Sequential(
            nn.Conv2d(n_classes - 1, w1, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(w1, w2, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.AdaptiveMaxPool2d(1),
        )
        self.fc = nn.Linear(w2, n_outputs)

    def forward(self, soft_mask: torch.Tensor) -> torch.Tensor:
        if soft_mask.ndim != 4 or soft_mask.shape[1] != self.n_classes:
            raise ShapeError(
                f"weak classifier expects B x {self.n_classes} x H x W masks, got {tuple(soft_mask.shape)}"
            )
        return torch.sigmoid(self.fc(self.features(soft_mask[:, 1:]).flatten(1)))


class ModelBundle(nn.Module):
    """Feature extractor F, task head T and weak classifier W."""

    def __init__(self, config: TrainingConfig) -> None:
        super().__init__()
        m = config.model
        self.image_size = m.image_size
        self.in_channels = m.in_channels
        self.n_classes = config.n_classes
        self.weak_width = config.weak_width
        self.feature_extractor = UNetBackbone(m.in_channels, m.encoder_widths, m.feature_dim)
        self.task_head = TaskHead(config.n_kernels, config.n_classes, m.head_widths)
        self.weak_classifier = WeakClassifier(config.n_classes, config.weak_width, m.weak_widths)


class UNetSegmenter(nn.Module):
    """Baseline: the same backbone plus a 1x1 classification layer."""

    def __init__(self, config: TrainingConfig) -> None:
        super().__init__()
        m = config.model
        self.image_size = m.image_size
        self.in_channels = m.in_channels
        self.n_classes = config.n_classes
        self.backbone = UNetBackbone(m.in_channels, m.encoder_widths, m.feature_dim)
        self.classifier = nn.Conv2d(m.feature_dim, config.n_classes, 1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        _check_images(images, self.in_channels, self.image_size)
        return torch.softmax(self.classifier(F.relu(self.backbone(images))), dim=1)


def _seeded(seed: int, build):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build()


def build_bundle(config: TrainingConfig) -> ModelBundle:
    return _seeded(config.seed, lambda: ModelBundle(config))


def build_unet(config: TrainingConfig) -> UNetSegmenter:
    return _seeded(config.seed, lambda: UNetSegmenter(config))


def _check_images(images: torch.Tensor, channels: int, size: int) -> None:
    if images.ndim != 4 or images.shape[1] != channels:
        raise ShapeError(f"expected B x {channels} x {size} x {size} images, got {tuple(images.shape)}")
    if tuple(images.shape[2:]) != (size, size):
        raise ShapeError(f"expected spatial size {size} x {size}, got {tuple(images.shape[2:])}")


def extract_features(images: torch.Tensor, bundle: ModelBundle) -> torch.Tensor:
    """Raw features B x D x H x W at input resolution."""
    _check_images(images, bundle.in_channels, bundle.image_size)
    return bundle.feature_extractor(images)


def predict_segmentation(activations: torch.Tensor, bundle: ModelBundle) -> torch.Tensor:
    return bundle.task_head(activations)


def predict_presence(soft_mask: torch.Tensor, bundle: ModelBundle) -> torch.Tensor:
    return bundle.weak_classifier(soft_mask)


@dataclass
class PipelineOutput:
    features: FeatureMap
    activations: torch.Tensor
    soft_mask: torch.Tensor
    presence: torch.Tensor


def run_pipeline(images: torch.Tensor, bundle: ModelBundle, bank: KernelBank) -> PipelineOutput:
    """extract -> normalise -> vMF activations -> segmentation -> presence."""
    features = normalize_features(extract_features(images, bundle))
    activations = vmf_activations(features, bank)
    soft_mask = predict_segmentation(activations, bundle)
    presence = predict_presence(soft_mask, bundle)
    return PipelineOutput(features=features, activations=activations, soft_mask=soft_mask, presence=presence)


#reconstruction pre-training for kernel initialisation

ImageSource = Union[torch.Tensor, Dataset]


def _image_batches(images: ImageSource, batch_size: int, seed: int, shuffle: bool):
    if isinstance(images, torch.Tensor):
        dataset: Dataset = TensorDataset(images)
    else:
        dataset = images
    if len(dataset) == 0:
        raise ShapeError("training set is empty")
    generator = torch.Generator().manual_seed(seed)
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=shuffle, generator=generator)
    for batch in loader:
        yield batch[0] if isinstance(batch, (list, tuple)) else batch["image"]


@dataclass
class ReconstructionResult:
    extractor: UNetBackbone
    initial_mse: float
    final_mse: float
    epoch_losses: List[float] = field(default_factory=list)


def _mean_mse(extractor: nn.Module, projection: nn.Module, images: ImageSource, batch_size: int) -> float:
    """Inference-mode MSE; leaves batch-norm running statistics untouched."""
    extractor.eval()
    projection.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for x in _image_batches(images, batch_size, 0, shuffle=False):
            recon = projection(extractor(x))
            total += float(F.mse_loss(recon, x, reduction="sum"))
            count += x.numel()
    return total / count


def pretrain_reconstruction(images: ImageSource, config: TrainingConfig, epochs: Optional[int] = None) -> ReconstructionResult:
    """
    Train a fresh copy of the feature extractor plus a 1x1 projection to
    reconstruct the 4-channel input under MSE. Only the extractor is returned;
    it is used to harvest features for k-means and then discarded.
    """
    epochs = config.pretrain_epochs if epochs is None else epochs
    m = config.model

    def build():
        return UNetBackbone(m.in_channels, m.encoder_widths, m.feature_dim), nn.Conv2d(m.feature_dim, m.in_channels, 1)

    extractor, projection = _seeded(config.seed + 1, build)
    initial = _mean_mse(extractor, projection, images, config.batch_size)
    if epochs == 0:
        return ReconstructionResult(extractor=extractor, initial_mse=initial, final_mse=initial)

    extractor.train()
    projection.train()
    optimizer = torch.optim.Adam(list(extractor.parameters()) + list(projection.parameters()), lr=config.learning_rate)
    losses: List[float] = []
    for epoch in range(epochs):
        running, n_batches = 0.0, 0
        for x in _image_batches(images, config.batch_size, config.seed + epoch, shuffle=True):
            optimizer.zero_grad()
            loss = F.mse_loss(projection(extractor(x)), x)
            loss.backward()
            optimizer.step()
            running += float(loss)
            n_batches += 1
        losses.append(running / n_batches)
        logger.info("reconstruction pre-training epoch %d/%d: mse=%.5f", epoch + 1, epochs, losses[-1])

    final = _mean_mse(extractor, projection, images, config.batch_size)
    return ReconstructionResult(extractor=extractor, initial_mse=initial, final_mse=final, epoch_losses=losses)


def harvest_features(
    extractor: nn.Module,
    images: ImageSource,
    per_image: int = 100,
    seed: int = 0,
    batch_size: int = 32,
) -> np.ndarray:
    """Sample up to `per_image` non-degenerate unit feature vectors from every image (N x D)."""
    rng = np.random.default_rng(seed)
    extractor.eval()
    collected: List[np.ndarray] = []
    with torch.no_grad():
        for x in _image_batches(images, batch_size, seed, shuffle=False):
            fmap = normalize_features(extractor(x))
            values = fmap.values.permute(0, 2, 3, 1).reshape(x.shape[0], -1, fmap.dim).double().numpy()
            valid = (~fmap.degenerate).reshape(x.shape[0], -1).numpy()
            for vecs, ok in zip(values, valid):
                idx = np.flatnonzero(ok)
                if idx.size == 0:
                    continue
                pick = rng.choice(idx, size=min(per_image, idx.size), replace=False)
                collected.append(vecs[pick])
    if not collected:
        raise ShapeError("no non-degenerate feature vectors could be harvested")
    vectors = np.concatenate(collected, axis=0)
    # float32 features renormalised in double so k-means sees exact unit rows
    return vectors / np.linalg.norm(vectors, axis=1, keepdims=True)


#checkpoints

@dataclass
class LoadedCheckpoint:
    config: TrainingConfig
    bundle: Optional[ModelBundle] = None
    unet: Optional[UNetSegmenter] = None
    bank: Optional[KernelBank] = None
    extra: Dict[str, object] = field(default_factory=dict)


def save_checkpoint(
    path: Path,
    config: TrainingConfig,
    bundle: Optional[ModelBundle] = None,
    bank: Optional[KernelBank] = None,
    unet: Optional[UNetSegmenter] = None,
    extra: Optional[Dict[str, object]] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload: Dict[str, object] = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "method": config.method,
        "training_config": config.model_dump(mode="json"),
        "config_hash": config.architecture_hash(),
        "extra": dict(extra or {}),
    }
    if config.method == "compositional":
        if bundle is None or bank is None:
            raise ConfigError("compositional checkpoint needs both the model bundle and the kernel bank")
        bank_file = path.with_suffix(".kernels.json")
        save_kernel_bank(bank, bank_file)
        payload["state"] = {
            "feature_extractor": bundle.feature_extractor.state_dict(),
            "task_head": bundle.task_head.state_dict(),
            "weak_classifier": bundle.weak_classifier.state_dict(),
        }
        payload["kernel_bank_file"] = bank_file.name
    else:
        if unet is None:
            raise ConfigError("unet checkpoint needs the unet model")
        payload["state"] = {"unet": unet.state_dict()}
    torch.save(payload, path)
    logger.info("checkpoint written: %s", path)
    return path


def load_checkpoint(path: Path, expected_hash: Optional[str] = None) -> LoadedCheckpoint:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint format_version {payload.get('format_version')!r}")
    config = TrainingConfig.model_validate(payload["training_config"])
    stored = payload["config_hash"]
    if stored != config.architecture_hash():
        raise ConfigError(f"{path}: stored config hash does not match its training config")
    if expected_hash is not None and stored != expected_hash:
        raise ConfigError(f"{path}: checkpoint config hash {stored[:12]} != expected {expected_hash[:12]}")

    state = payload["state"]
    loaded = LoadedCheckpoint(config=config, extra=dict(payload.get("extra", {})))
    if config.method == "compositional":
        bundle = ModelBundle(config)
        bundle.feature_extractor.load_state_dict(state["feature_extractor"])
        bundle.task_head.load_state_dict(state["task_head"])
        bundle.weak_classifier.load_state_dict(state["weak_classifier"])
        bank = load_kernel_bank(path.parent / payload["kernel_bank_file"])
        if bank.n_kernels != config.n_kernels:
            raise ConfigError(f"{path}: kernel bank has J={bank.n_kernels}, config says {config.n_kernels}")
        loaded.bundle = bundle.eval()
        loaded.bank = bank.to(torch.float32)
    else:
        unet = UNetSegmenter(config)
        unet.load_state_dict(state["unet"])
        loaded.unet = unet.eval()
    return loaded
