import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from compseg.errors import ConfigError, ShapeError
from compseg.services.data import generate_synthetic_dataset, make_slice_samples, sample_labeled_subset
from compseg.services.model import build_bundle, run_pipeline
from compseg.services.supervision import (
    DICE_EPS,
    SliceDataset,
    TwoStreamBatchSampler,
    TrainingData,
    TwoPointAnnotation,
    WeakLabel,
    dice_loss,
    presence_from_two_point,
    _loader,
    total_loss,
    train,
    train_unet,
    two_point_from_mask,
    weak_label_for_slice,
    weak_loss,
)
from compseg.services.vmf_core import KernelBank, clustering_loss


def one_hot(labels, n_classes):
    return (torch.arange(n_classes)[None, :, None, None] == labels[:, None]).double()


# --- annotations ---

def test_presence_from_two_point():
    ann = TwoPointAnnotation("WT", 155, 40, 80)
    assert presence_from_two_point(ann, 60) == 1
    assert presence_from_two_point(ann, 40) == 1
    assert presence_from_two_point(ann, 80) == 1
    assert presence_from_two_point(ann, 81) == 0
    assert presence_from_two_point(TwoPointAnnotation("WT", 155), 0) == 0
    with pytest.raises(ShapeError):
        presence_from_two_point(ann, 155)


def test_annotation_invariants():
    with pytest.raises(ShapeError):
        TwoPointAnnotation("WT", 10, 5, 3)
    with pytest.raises(ShapeError):
        TwoPointAnnotation("WT", 10, 5, None)
    with pytest.raises(ShapeError):
        TwoPointAnnotation("XX", 10)


def test_two_point_from_mask():
    mask = np.zeros((30, 4, 4), dtype=np.uint8)
    for s in (12, 13, 20):
        mask[s, 1, 1] = 2
    ann = two_point_from_mask(mask, "ET")
    assert (ann.bottom_slice, ann.top_slice) == (12, 20)
    assert presence_from_two_point(ann, 16) == 1
    assert not two_point_from_mask(mask, "NE").present
    wt = two_point_from_mask(mask, "WT")
    assert (wt.bottom_slice, wt.top_slice) == (12, 20)


def test_two_point_from_mask_planted_range():
    mask = np.zeros((155, 8, 8), dtype=np.uint8)
    mask[50:91, 2:5, 2:5] = 1
    ann = two_point_from_mask(mask, "ED")
    assert (ann.bottom_slice, ann.top_slice) == (50, 90)
    with pytest.raises(ShapeError):
        two_point_from_mask(np.full((3, 2, 2), 5), "WT")


def test_weak_labels_from_nested_ranges():
    annotations = {
        "WT": TwoPointAnnotation("WT", 60, 10, 50),
        "ED": TwoPointAnnotation("ED", 60, 10, 50),
        "ET": TwoPointAnnotation("ET", 60, 15, 40),
        "NE": TwoPointAnnotation("NE", 60, 20, 30),
    }
    whole = [int(weak_label_for_slice(annotations, s, "whole").values[0]) for s in range(60)]
    assert whole == [int(10 <= s <= 50) for s in range(60)]
    assert weak_label_for_slice(annotations, 12, "sub").values.tolist() == [1, 0, 0]
    assert weak_label_for_slice(annotations, 25, "sub").values.tolist() == [1, 1, 1]


def test_weak_label_validation():
    with pytest.raises(ShapeError):
        WeakLabel(np.array([0, 1]))
    with pytest.raises(ShapeError):
        WeakLabel(np.array([2]))


# --- weak and dice losses ---

def test_weak_loss_examples():
    assert float(weak_loss(torch.tensor([[0.2]]), torch.tensor([[0.0]]))) == pytest.approx(0.2)
    p = torch.tensor([[0.1, 0.9, 0.5]])
    assert float(weak_loss(p, torch.tensor([[0, 1, 1]]))) == pytest.approx(0.7 / 3)
    assert float(weak_loss(p, p.clone())) == 0.0
    with pytest.raises(ShapeError):
        weak_loss(torch.zeros(1, 3), torch.zeros(1, 1))


def test_dice_loss_closed_forms():
    labels = torch.zeros(1, 4, 4, dtype=torch.long)
    labels[0, 0] = 1
    target = one_hot(labels, 2)
    assert float(dice_loss(target, target)) < 1e-5

    empty = one_hot(torch.zeros_like(labels), 2)
    assert float(dice_loss(empty, target)) == pytest.approx(1.0, abs=1e-6)

    pred_labels = torch.zeros_like(labels)
    pred_labels[0, 0, :2] = 1
    pred_labels[0, 1, :2] = 1
    expected = 1 - (2 * 2 + DICE_EPS) / (4 + 4 + DICE_EPS)
    assert float(dice_loss(one_hot(pred_labels, 2), target)) == pytest.approx(expected)


def test_dice_loss_range_and_background_excluded():
    gen = torch.Generator().manual_seed(0)
    for _ in range(10):
        p = torch.softmax(torch.randn(2, 4, 6, 6, generator=gen, dtype=torch.float64), dim=1)
        t = one_hot(torch.randint(0, 4, (2, 6, 6), generator=gen), 4)
        value = float(dice_loss(p, t))
        assert 0.0 <= value <= 1.0 + 1e-5
    # only background differs: loss unchanged
    t = one_hot(torch.zeros(1, 3, 3, dtype=torch.long), 2)
    p = t.clone()
    p[:, 0] = 0.3
    assert float(dice_loss(p, t)) == pytest.approx(float(dice_loss(t, t)))


def test_dice_loss_rejects_non_one_hot():
    t = torch.zeros(1, 2, 3, 3)
    with pytest.raises(ShapeError):
        dice_loss(torch.rand(1, 2, 3, 3), t)


def test_loss_gradients_match_finite_differences():
    gen = torch.Generator().manual_seed(1)
    for _ in range(20):
        logits = torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64, requires_grad=True)
        target = one_hot(torch.randint(0, 3, (2, 4, 4), generator=gen), 3)
        assert torch.autograd.gradcheck(
            lambda x: dice_loss(torch.softmax(x, dim=1), target), (logits,), eps=1e-5, atol=1e-8, rtol=1e-4
        )
        p = (torch.rand(3, 3, generator=gen, dtype=torch.float64) * 0.8 + 0.1).requires_grad_(True)
        c = torch.randint(0, 2, (3, 3), generator=gen).double()
        assert torch.autograd.gradcheck(lambda x: weak_loss(x, c), (p,), eps=1e-5, atol=1e-8, rtol=1e-4)


# --- joint objective ---

@pytest.fixture
def tiny_batch(tiny_spec):
    volume = generate_synthetic_dataset(tiny_spec)[0]
    samples = make_slice_samples(volume, "whole")[:4]
    samples = [replace(s, has_pixel_label=i < 2) for i, s in enumerate(samples)]
    dataset = SliceDataset(samples, 2, 1)
    return {k: torch.stack([dataset[i][k] for i in range(4)]) for k in ("image", "mask", "weak", "has_pixel_label")}


def random_bank(j, d, seed=0):
    x = np.random.default_rng(seed).normal(size=(j, d))
    return KernelBank(x / np.linalg.norm(x, axis=1, keepdims=True))


def test_total_loss_matches_hand_computation(tiny_training, tiny_batch):
    config = tiny_training()
    bundle = build_bundle(config).double().eval()
    bank = random_bank(4, 16).double()
    batch = {k: (v.double() if v.is_floating_point() else v) for k, v in tiny_batch.items()}

    total, parts = total_loss(batch, bundle, bank, config)
    out = run_pipeline(batch["image"], bundle, bank)
    want = (
        clustering_loss(out.features, bank)
        + dice_loss(out.soft_mask[:2], batch["mask"][:2])
        + 0.5 * (out.presence - batch["weak"]).abs().mean()
    )
    assert float(total) == pytest.approx(float(want), rel=1e-10)
    assert parts.lambda_dice == 1.0 and parts.n_labeled == 2 and parts.n_samples == 4


def test_total_loss_gating(tiny_training, tiny_batch):
    config = tiny_training()
    bundle = build_bundle(config).double().eval()
    bank = random_bank(4, 16).double()
    batch = {k: (v.double() if v.is_floating_point() else v) for k, v in tiny_batch.items()}
    total, parts = total_loss(batch, bundle, bank, config)

    weak_only = dict(batch, has_pixel_label=torch.zeros(4, dtype=torch.bool))
    gated, gated_parts = total_loss(weak_only, bundle, bank, config)
    assert gated_parts.lambda_dice == 0.0 and gated_parts.dice == 0.0
    assert float(total) - float(gated) == pytest.approx(parts.dice, rel=1e-10)

    no_weak = tiny_training(lambda_weak=0.0)
    plain, p = total_loss(batch, bundle, bank, no_weak)
    assert float(plain) == pytest.approx(p.clustering + p.dice, rel=1e-10)

    with pytest.raises(ShapeError):
        total_loss({k: v[:0] for k, v in batch.items()}, bundle, bank, config)


def test_end_to_end_gradients(tiny_training, tiny_batch):
    config = tiny_training()
    bundle = build_bundle(config).double().eval()
    bank = random_bank(4, 16).double()
    batch = {k: (v.double() if v.is_floating_point() else v) for k, v in tiny_batch.items()}
    eps = 1e-5

    def value(without_clustering):
        with torch.no_grad():
            t, parts = total_loss(batch, bundle, bank, config)
        return float(t) - (parts.clustering if without_clustering else 0.0)

    bundle.zero_grad()
    total_loss(batch, bundle, bank, config)[0].backward()
    gen = np.random.default_rng(0)
    for name, net in (("extractor", bundle.feature_extractor), ("head", bundle.task_head), ("weak", bundle.weak_classifier)):
        params = [p for p in net.parameters() if p.requires_grad]
        sizes = np.array([p.numel() for p in params])
        for _ in range(20):
            k = int(gen.choice(len(params), p=sizes / sizes.sum()))
            i = int(gen.integers(params[k].numel()))
            flat = params[k].data.view(-1)
            orig = float(flat[i])
            flat[i] = orig + eps
            up = value(name == "extractor")
            flat[i] = orig - eps
            down = value(name == "extractor")
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            analytic = float(params[k].grad.view(-1)[i])
            assert abs(analytic - numeric) <= 1e-3 * max(abs(analytic), abs(numeric)) + 1e-7, name


# --- training loops ---

@pytest.fixture
def tiny_data(tiny_spec):
    volumes = generate_synthetic_dataset(tiny_spec)
    samples = []
    for v in volumes:
        if v.split == "train":
            samples.extend(make_slice_samples(v, "whole"))
    samples = sample_labeled_subset(samples, 0.25, seed=0)
    return TrainingData(train=samples, val_volumes=[v for v in volumes if v.split == "val"])


def test_train_smoke(tmp_path, tiny_training, tiny_data):
    config = tiny_training(epochs=2)
    result = train(tiny_data, config, log_path=tmp_path / "log.jsonl")
    assert result.best_epoch in (1, 2)
    assert result.best_val_dice is not None
    norms = result.bank.kernels.detach().double().norm(dim=1)
    assert float((norms - 1).abs().max()) < 1e-6
    records = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in records] == [1, 2]
    assert {"total", "clustering", "dice", "weak", "val_dice", "val_dice_mean"} <= set(records[0])


def test_train_is_reproducible(tiny_training, tiny_data):
    config = tiny_training(epochs=1)
    a = train(tiny_data, config)
    b = train(tiny_data, config)
    assert a.best_val_dice == pytest.approx(b.best_val_dice, abs=1e-6)


def test_train_rejects_bad_inputs(tiny_training, tiny_data):
    with pytest.raises(ShapeError):
        train(TrainingData(train=[]), tiny_training())
    with pytest.raises(ConfigError):
        train(tiny_data, tiny_training(method="unet"))
    with pytest.raises(ConfigError):
        train(tiny_data, tiny_training(task_mode="sub"))


def test_train_unet_smoke(tiny_training, tiny_data):
    result = train_unet(tiny_data, tiny_training(method="unet", epochs=1))
    assert result.unet is not None and result.bundle is None
    assert len(result.log.records) == 1


def test_two_stream_batches_cover_unlabelled_once():
    primary, secondary = [0, 1, 2], list(range(3, 20))
    sampler = TwoStreamBatchSampler(primary, secondary, 8, 2, torch.Generator().manual_seed(0))
    batches = list(sampler)
    assert len(batches) == len(sampler) == 3
    for b in batches:
        assert sum(i in primary for i in b) == 2
    seen = [i for b in batches for i in b if i not in primary]
    assert sorted(seen) == secondary
    with pytest.raises(ConfigError):
        TwoStreamBatchSampler(primary, secondary, 4, 4, torch.Generator())
    with pytest.raises(ShapeError):
        TwoStreamBatchSampler([], secondary, 4, 2, torch.Generator())


def test_loader_puts_labelled_slices_in_every_batch(tiny_training, tiny_data):
    config = tiny_training()
    dataset = SliceDataset(tiny_data.train, config.n_classes, config.weak_width)
    batches = list(_loader(dataset, config, epoch=1))
    assert all(bool(b["has_pixel_label"].any()) for b in batches)
    n_unlabelled = sum(not s.has_pixel_label for s in tiny_data.train)
    assert sum(int((~b["has_pixel_label"]).sum()) for b in batches) == n_unlabelled

    plain = tiny_training(labeled_batch_size=0)
    assert sum(b["image"].shape[0] for b in _loader(dataset, plain, epoch=1)) == len(dataset)


def test_train_loss_decreases(tiny_training, tiny_data):
    result = train(tiny_data, tiny_training(epochs=5, learning_rate=5e-3))
    records = result.log.records
    assert len(records) == 5
    assert records[4]["total"] < records[0]["total"]
    assert all(r["dice_batches"] > 0 for r in records)
