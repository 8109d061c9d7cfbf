import os
from functools import lru_cache
from pathlib import Path
from typing import Dict, Optional

from fastapi import Depends, FastAPI
from pydantic import BaseModel, Field

from compseg.config import CHECKPOINT_ENV, DATA_DIR_ENV
from compseg.errors import CompsegError, ConfigError
from compseg.main import segment_slice
from compseg.services.data import VolumeRecord, load_dataset
from compseg.services.model import LoadedCheckpoint, load_checkpoint

app = FastAPI()


class SegmentationService:
    """A loaded checkpoint plus the dataset it answers queries about."""

    def __init__(self, checkpoint: LoadedCheckpoint, volumes: Dict[str, VolumeRecord]) -> None:
        self.checkpoint = checkpoint
        self.volumes = volumes

    def segment(self, subject_id: str, slice_index: int) -> dict:
        volume = self.volumes.get(subject_id)
        if volume is None:
            raise ConfigError(f"unknown subject {subject_id!r}")
        return segment_slice(self.checkpoint, volume, slice_index)


@lru_cache(maxsize=1)
def get_service() -> SegmentationService:
    checkpoint = os.getenv(CHECKPOINT_ENV)
    data_dir = os.getenv(DATA_DIR_ENV)
    if not checkpoint or not data_dir:
        raise ConfigError(f"set {CHECKPOINT_ENV} and {DATA_DIR_ENV} to serve segmentations")
    volumes = {v.subject_id: v for v in load_dataset(Path(data_dir))}
    return SegmentationService(load_checkpoint(Path(checkpoint)), volumes)


def _service() -> Optional[SegmentationService]:
    # loading errors are reported per request
    try:
        return get_service()
    except CompsegError:
        return None


# Request model
class SegmentRequest(BaseModel):
    subject_id: str
    slice_index: int = Field(ge=0)


@app.post("/segment")
async def segment_endpoint(request: SegmentRequest, service: Optional[SegmentationService] = Depends(_service)):
    """Segment one slice of one subject and score it against its mask."""
    try:
        service = service or get_service()
        return service.segment(request.subject_id, request.slice_index)
    except CompsegError as e:
        return {"error": str(e)}


@app.get("/")
async def root():
    return {"message": "Compositional segmentation API is running"}
