import numpy as np
import pytest
from fastapi.testclient import TestClient

from compseg import api
from compseg.services.data import generate_synthetic_dataset
from compseg.services.model import build_bundle, load_checkpoint, save_checkpoint
from compseg.services.vmf_core import KernelBank


@pytest.fixture
def client():
    api.get_service.cache_clear()
    yield TestClient(api.app)
    api.app.dependency_overrides.clear()
    api.get_service.cache_clear()


@pytest.fixture
def service(tmp_path, tiny_spec, tiny_training):
    config = tiny_training()
    x = np.random.default_rng(0).normal(size=(4, 16))
    bank = KernelBank(x / np.linalg.norm(x, axis=1, keepdims=True)).float()
    path = save_checkpoint(tmp_path / "model.pt", config, bundle=build_bundle(config), bank=bank)
    volumes = {v.subject_id: v for v in generate_synthetic_dataset(tiny_spec)}
    return api.SegmentationService(load_checkpoint(path), volumes)


def test_root(client):
    assert client.get("/").json() == {"message": "Compositional segmentation API is running"}


def test_segment(client, service):
    api.app.dependency_overrides[api._service] = lambda: service
    subject = next(iter(service.volumes))
    body = client.post("/segment", json={"subject_id": subject, "slice_index": 2}).json()
    assert body["subject_id"] == subject and body["task_mode"] == "whole"
    assert len(body["presence"]) == 1
    assert set(body["dice"]) == {"WT"}
    assert sum(body["pixel_counts"].values()) <= 16 * 16


def test_segment_errors(client, service):
    api.app.dependency_overrides[api._service] = lambda: service
    assert "error" in client.post("/segment", json={"subject_id": "nobody", "slice_index": 0}).json()
    subject = next(iter(service.volumes))
    assert "error" in client.post("/segment", json={"subject_id": subject, "slice_index": 999}).json()


def test_unconfigured_service_reports_error(client, monkeypatch):
    monkeypatch.delenv("COMPSEG_CHECKPOINT", raising=False)
    monkeypatch.delenv("COMPSEG_DATA_DIR", raising=False)
    body = client.post("/segment", json={"subject_id": "a", "slice_index": 0}).json()
    assert "COMPSEG_CHECKPOINT" in body["error"]


def test_segment_retries_service_after_failed_dependency(client, service, monkeypatch):
    # the dependency failed once, the service is available by the time the request runs
    api.app.dependency_overrides[api._service] = lambda: None
    monkeypatch.setattr(api, "get_service", lambda: service)
    subject = next(iter(service.volumes))
    body = client.post("/segment", json={"subject_id": subject, "slice_index": 1}).json()
    assert "error" not in body
    assert body["subject_id"] == subject
