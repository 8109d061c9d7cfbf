#configuration models for data synthesis, training and command runs
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from compseg.errors import ConfigError

load_dotenv()

OUTPUT_ROOT_ENV = "COMPSEG_OUTPUT_ROOT"
CHECKPOINT_ENV = "COMPSEG_CHECKPOINT"
DATA_DIR_ENV = "COMPSEG_DATA_DIR"

# train : val : test subject counts of the reference split
SPLIT_RATIO: Tuple[int, int, int] = (938, 62, 251)
SPLITS: Tuple[str, str, str] = ("train", "val", "test")

MODALITIES: Tuple[str, str, str, str] = ("T1", "T1Gd", "T2", "FLAIR")

TaskMode = Literal["whole", "sub"]
Method = Literal["compositional", "unet"]

# fields a checkpoint must agree on to be loadable
ARCHITECTURE_FIELDS: Tuple[str, ...] = ("method", "task_mode", "weak_mode", "n_kernels", "sigma", "model")


def default_output_root() -> Path:
    return Path(os.getenv(OUTPUT_ROOT_ENV, "runs"))


def config_hash(model: BaseModel) -> str:
    """SHA-256 over the canonical JSON dump of a config model."""
    payload = json.dumps(model.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _check_range(name: str, value: Tuple[float, float]) -> Tuple[float, float]:
    low, high = value
    if not 0 < low <= high:
        raise ValueError(f"{name} must satisfy 0 < low <= high, got {value}")
    return value


class ModelConfig(BaseModel):
    """Architecture of the three networks (and of the UNet baseline)."""

    in_channels: int = Field(4, ge=1)
    image_size: int = Field(128, ge=4)
    encoder_widths: Tuple[int, ...] = (32, 64, 128, 256)
    feature_dim: int = Field(64, ge=2)
    head_widths: Tuple[int, int] = (32, 16)
    weak_widths: Tuple[int, int] = (16, 32)

    @field_validator("encoder_widths")
    @classmethod
    def _widths(cls, v: Tuple[int, ...]) -> Tuple[int, ...]:
        if len(v) < 2 or any(w < 1 for w in v):
            raise ValueError("encoder_widths needs at least two positive widths")
        return v

    @model_validator(mode="after")
    def _divisible(self) -> "ModelConfig":
        factor = 2 ** (len(self.encoder_widths) - 1)
        if self.image_size % factor:
            raise ValueError(
                f"image_size {self.image_size} not divisible by {factor} "
                f"({len(self.encoder_widths)} encoder levels)"
            )
        return self


class TrainingConfig(BaseModel):
    method: Method = "compositional"
    task_mode: TaskMode = "whole"
    weak_mode: Optional[TaskMode] = None
    label_fraction: float = Field(0.01, gt=0.0, le=1.0)
    lambda_weak: Optional[float] = Field(None, ge=0.0)
    learning_rate: float = Field(1e-4, gt=0.0)
    batch_size: int = Field(32, ge=1)
    # pixel-labelled slices drawn into every batch; 0 shuffles all slices together
    labeled_batch_size: int = Field(2, ge=0)
    epochs: int = Field(50, ge=0)
    pretrain_epochs: int = Field(10, ge=0)
    n_kernels: int = Field(8, ge=2)
    sigma: float = Field(30.0, gt=0.0)
    kmeans_max_iters: int = Field(100, ge=1)
    kmeans_samples_per_image: int = Field(100, ge=1)
    seed: int = 0
    model: ModelConfig = Field(default_factory=ModelConfig)

    @model_validator(mode="after")
    def _resolve_defaults(self) -> "TrainingConfig":
        if self.weak_mode is None:
            self.weak_mode = self.task_mode
        if self.weak_mode == "sub" and self.task_mode == "whole":
            raise ValueError("sub-region weak labels need task_mode='sub'")
        if self.lambda_weak is None:
            self.lambda_weak = 0.5 if self.task_mode == "whole" else 0.1
        return self

    @property
    def n_classes(self) -> int:
        return 2 if self.task_mode == "whole" else 4

    @property
    def weak_width(self) -> int:
        return 1 if self.weak_mode == "whole" else 3

    def architecture_hash(self) -> str:
        """Hash of the fields a checkpoint must agree on to be loadable."""
        payload = self.model_dump(mode="json", include=set(ARCHITECTURE_FIELDS))
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()

    def architecture_mismatch(self, other: "TrainingConfig", fields: Sequence[str] = ARCHITECTURE_FIELDS) -> List[str]:
        """Names of the given architecture fields on which the two configs differ."""
        unknown = set(fields) - set(ARCHITECTURE_FIELDS)
        if unknown:
            raise ConfigError(f"not architecture fields: {sorted(unknown)}")
        mine = self.model_dump(mode="json", include=set(fields))
        theirs = other.model_dump(mode="json", include=set(fields))
        return [f for f in ARCHITECTURE_FIELDS if f in mine and mine[f] != theirs[f]]


class SyntheticSpec(BaseModel):
    """Geometry and contrast of the synthetic multi-modal phantom volumes."""

    volumes: int = Field(40, ge=3)
    slice_count: int = Field(32, ge=4)
    image_size: int = Field(128, ge=16)
    tumour_probability: float = Field(0.9, ge=0.0, le=1.0)
    # in-plane ED semi-axis as a fraction of image_size
    ed_radius_range: Tuple[float, float] = (0.10, 0.20)
    # ED half-extent along the slice axis as a fraction of slice_count
    ed_extent_range: Tuple[float, float] = (0.15, 0.30)
    et_scale: float = Field(0.65, gt=0.0, lt=1.0)
    ne_scale: float = Field(0.35, gt=0.0, lt=1.0)
    # per-class mean intensity for (T1, T1Gd, T2, FLAIR)
    contrast: Dict[str, Tuple[float, float, float, float]] = Field(
        default_factory=lambda: {
            "brain": (0.55, 0.50, 0.40, 0.40),
            "csf": (0.20, 0.20, 0.85, 0.15),
            "ed": (0.45, 0.50, 0.75, 0.90),
            "et": (0.45, 0.95, 0.60, 0.70),
            "ne": (0.25, 0.30, 0.85, 0.50),
        }
    )
    noise: float = Field(0.04, ge=0.0)
    seed: int = 0

    @field_validator("ed_radius_range")
    @classmethod
    def _radius(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        _check_range("ed_radius_range", v)
        if v[1] > 0.3:
            raise ValueError("ed_radius_range upper bound must keep the tumour inside the brain (<= 0.3)")
        return v

    @field_validator("ed_extent_range")
    @classmethod
    def _extent(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        _check_range("ed_extent_range", v)
        if v[1] > 0.5:
            raise ValueError("ed_extent_range upper bound must be <= 0.5")
        return v

    @field_validator("contrast")
    @classmethod
    def _contrast(cls, v: Dict[str, Tuple[float, ...]]) -> Dict[str, Tuple[float, ...]]:
        missing = {"brain", "csf", "ed", "et", "ne"} - set(v)
        if missing:
            raise ValueError(f"contrast table missing classes: {sorted(missing)}")
        for name, values in v.items():
            if any(not 0.0 <= x <= 1.0 for x in values):
                raise ValueError(f"contrast[{name}] intensities must lie in [0, 1]")
        return v

    @model_validator(mode="after")
    def _nesting(self) -> "SyntheticSpec":
        if not self.ne_scale < self.et_scale:
            raise ValueError("ne_scale must be smaller than et_scale (NE inside ET inside ED)")
        return self


class RunConfig(BaseModel):
    """Everything one cli command needs, after file + flag resolution."""

    training: TrainingConfig = Field(default_factory=TrainingConfig)
    synthetic: SyntheticSpec = Field(default_factory=SyntheticSpec)
    data_dir: Optional[Path] = None
    out_dir: Optional[Path] = None
    checkpoints: List[Path] = Field(default_factory=list)
    brats_root: Optional[Path] = None
    subject_id: Optional[str] = None
    slice_indices: List[int] = Field(default_factory=list)

    @model_validator(mode="after")
    def _paths(self) -> "RunConfig":
        if self.out_dir is None:
            self.out_dir = default_output_root()
        return self


def _merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict):
            base_value = merged.get(key)
            merged[key] = _merge(base_value if isinstance(base_value, dict) else {}, value)
        else:
            merged[key] = value
    return merged


def _read_config_file(path: Optional[Path]) -> Dict[str, Any]:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return raw


def load_run_config(path: Optional[Path], overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Read a JSON config file (optional), apply overrides, validate."""
    merged = _merge(_read_config_file(path), overrides or {})
    try:
        return RunConfig.model_validate(merged)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def write_resolved_config(config: RunConfig, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / "resolved_config.json"
    target.write_text(config.model_dump_json(indent=2), encoding="utf-8")
    return target


def pinned_architecture_fields(path: Optional[Path], overrides: Optional[Dict[str, Any]] = None) -> List[str]:
    """Architecture fields set explicitly, in the config file's training section or by an override."""
    section = _read_config_file(path).get("training")
    training = _merge(section if isinstance(section, dict) else {}, (overrides or {}).get("training") or {})
    return [f for f in ARCHITECTURE_FIELDS if training.get(f) is not None]
