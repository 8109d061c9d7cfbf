# vmf kernel bank: likelihoods, clustering loss and spherical k-means initialisation
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import torch
from torch import nn

from compseg.errors import MissingArtifactError, ShapeError

logger = logging.getLogger(__name__)

FEATURE_EPS = 1e-8
KERNEL_EPS = 1e-8
UNIT_TOL = 1e-6
BANK_FORMAT_VERSION = 1

ArrayLike = Union[np.ndarray, torch.Tensor]


class KernelBank(nn.Module):
    """
    J unit-norm vMF kernel means (rows of `kernels`) sharing one fixed
    concentration `sigma`. The kernels are a trainable parameter; `sigma` is not.
    """

    def __init__(self, kernels: ArrayLike, sigma: float = 30.0) -> None:
        super().__init__()
        k = torch.as_tensor(kernels)
        if not torch.is_floating_point(k):
            k = k.to(torch.float32)
        if k.ndim != 2:
            raise ShapeError(f"kernel matrix must be J x D, got shape {tuple(k.shape)}")
        n_kernels, dim = k.shape
        if n_kernels < 2 or dim < 2:
            raise ShapeError(f"kernel bank needs J >= 2 and D >= 2, got J={n_kernels}, D={dim}")
        if not sigma > 0:
            raise ShapeError(f"concentration sigma must be positive, got {sigma}")
        norms = k.detach().double().norm(dim=1)
        off = torch.nonzero((norms - 1.0).abs() > UNIT_TOL).flatten()
        if off.numel():
            j = int(off[0])
            raise ShapeError(f"kernel {j} has norm {float(norms[j]):.8f}, expected 1")
        self.kernels = nn.Parameter(k.clone())
        self.sigma = float(sigma)

    @property
    def n_kernels(self) -> int:
        return int(self.kernels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.kernels.shape[1])

    def extra_repr(self) -> str:
        return f"J={self.n_kernels}, D={self.dim}, sigma={self.sigma}"


@dataclass
class FeatureMap:
    """Per-position unit feature vectors, channel-first (B x D x H x W)."""

    values: torch.Tensor
    degenerate: torch.Tensor  # B x H x W, True where the raw vector had norm < FEATURE_EPS
    normalized: bool = True

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])


def normalize_features(raw: torch.Tensor) -> FeatureMap:
    if raw.ndim != 4:
        raise ShapeError(f"raw features must be B x D x H x W, got shape {tuple(raw.shape)}")
    finite = torch.isfinite(raw)
    if not bool(finite.all()):
        b, d, h, w = (int(i) for i in torch.nonzero(~finite)[0])
        raise ShapeError(f"non-finite feature value at batch {b}, channel {d}, position ({h}, {w})")

    norm = raw.norm(dim=1, keepdim=True)
    degenerate = norm < FEATURE_EPS
    values = raw / norm.clamp_min(FEATURE_EPS)
    values = torch.where(degenerate, torch.zeros_like(values), values)
    return FeatureMap(values=values, degenerate=degenerate.squeeze(1), normalized=True)


def _check_pair(features: FeatureMap, bank: KernelBank) -> None:
    if not features.normalized:
        raise ShapeError("feature map must be normalized before use with the kernel bank")
    if features.dim != bank.dim:
        raise ShapeError(f"feature dimension {features.dim} does not match kernel dimension {bank.dim}")


def vmf_activations(features: FeatureMap, bank: KernelBank) -> torch.Tensor:
    """
    Per-position vMF likelihoods normalised over the J kernels (B x J x H x W).
    The shared normalisation constant cancels, so the result is a softmax of
    sigma * mu_j^T z_i with the max score subtracted before exponentiation.
    """
    _check_pair(features, bank)
    kernels = bank.kernels.to(features.values.dtype)
    scores = bank.sigma * torch.einsum("bdhw,jd->bjhw", features.values, kernels)
    scores = scores - scores.amax(dim=1, keepdim=True)
    e = torch.exp(scores)
    return e / e.sum(dim=1, keepdim=True)


def clustering_loss(features: FeatureMap, bank: KernelBank) -> torch.Tensor:
    """
    -(HW)^-1 sum_i max_j mu_j^T z_i, averaged over the batch.
    Features are constants here: only the kernels receive this gradient.
    Ties go to the lowest kernel index.
    """
    _check_pair(features, bank)
    z = features.values.detach()
    kernels = bank.kernels.to(z.dtype)
    dots = torch.einsum("bdhw,jd->bjhw", z, kernels)
    best_idx = dots.argmax(dim=1, keepdim=True)
    best = dots.gather(1, best_idx).squeeze(1)
    best = torch.where(features.degenerate, torch.zeros_like(best), best)
    return (-best.to(torch.float64).mean()).to(z.dtype)


def renormalize_kernels(bank: KernelBank) -> KernelBank:
    """Project every kernel row back onto the unit sphere (in place)."""
    with torch.no_grad():
        norms = bank.kernels.norm(dim=1, keepdim=True)
        small = torch.nonzero(norms.squeeze(1) < KERNEL_EPS).flatten()
        if small.numel():
            raise ShapeError(f"kernel {int(small[0])} collapsed to near-zero norm; cannot renormalize")
        bank.kernels.div_(norms)
    return bank


@dataclass
class SphericalKMeansResult:
    centres: np.ndarray
    labels: np.ndarray
    objective_trace: List[float] = field(default_factory=list)
    converged: bool = False
    n_iter: int = 0

    @property
    def objective(self) -> float:
        """Final sum of (1 - cosine similarity)."""
        return self.objective_trace[-1]

    @property
    def cosine_sum(self) -> float:
        return float(self.labels.shape[0]) - self.objective

    def to_bank(self, sigma: float = 30.0) -> KernelBank:
        return KernelBank(torch.from_numpy(self.centres.copy()), sigma=sigma)


def _update_centres(x: np.ndarray, labels: np.ndarray, centres: np.ndarray) -> np.ndarray:
    n_clusters = centres.shape[0]
    new = centres.copy()
    counts = np.bincount(labels, minlength=n_clusters)
    for j in range(n_clusters):
        if counts[j] == 0:
            continue
        m = x[labels == j].sum(axis=0)
        norm = np.linalg.norm(m)
        if norm >= KERNEL_EPS:
            new[j] = m / norm

    empty = np.flatnonzero(counts == 0)
    if empty.size:
        own = np.einsum("nd,nd->n", x, new[labels])
        # farthest from the updated centres first; skip points that are alone in their cluster
        order = np.argsort(own, kind="stable")
        candidates = [i for i in order if counts[labels[i]] > 1] or list(order)
        for j, i in zip(empty, candidates):
            new[j] = x[i]
            logger.debug("re-seeded empty cluster %d from point %d", j, i)
    return new


def spherical_kmeans(vectors: ArrayLike, n_clusters: int, max_iters: int = 100, seed: int = 0) -> SphericalKMeansResult:
    """
    Spherical k-means on unit vectors: cosine assignment (lowest index wins ties),
    mean-then-renormalise update, empty clusters re-seeded from the point farthest
    from its centre. Deterministic for a given seed.
    """
    x = np.asarray(vectors.detach().cpu() if isinstance(vectors, torch.Tensor) else vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"k-means input must be N x D, got shape {x.shape}")
    n = x.shape[0]
    if n_clusters < 1 or max_iters < 1:
        raise ShapeError(f"n_clusters and max_iters must be positive, got {n_clusters}, {max_iters}")
    if n < n_clusters:
        raise ShapeError(f"need at least {n_clusters} vectors for {n_clusters} clusters, got {n}")
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_TOL)
    if bad.size:
        raise ShapeError(f"k-means input row {bad[0]} is not unit-norm (norm {norms[bad[0]]:.8f})")

    rng = np.random.default_rng(seed)
    centres = x[rng.choice(n, size=n_clusters, replace=False)].copy()
    labels: Optional[np.ndarray] = None
    trace: List[float] = []
    converged = False
    n_iter = 0

    for n_iter in range(1, max_iters + 1):
        sims = x @ centres.T
        new_labels = sims.argmax(axis=1)
        trace.append(float(np.sum(1.0 - sims[np.arange(n), new_labels])))
        if labels is not None and np.array_equal(new_labels, labels):
            converged = True
            break
        labels = new_labels
        centres = _update_centres(x, labels, centres)

    if not converged:
        # final assignment against the last centres so labels and centres agree
        sims = x @ centres.T
        labels = sims.argmax(axis=1)
        trace.append(float(np.sum(1.0 - sims[np.arange(n), labels])))
        logger.warning("spherical k-means did not converge in %d iterations", max_iters)

    return SphericalKMeansResult(centres=centres, labels=labels, objective_trace=trace, converged=converged, n_iter=n_iter)


def init_kernels_kmeans(
    vectors: ArrayLike,
    n_kernels: int,
    max_iters: int = 100,
    seed: int = 0,
    sigma: float = 30.0,
) -> SphericalKMeansResult:
    """Cluster harvested feature vectors; `result.to_bank(sigma)` gives the KernelBank."""
    if n_kernels < 2:
        raise ShapeError(f"kernel bank needs J >= 2, got {n_kernels}")
    result = spherical_kmeans(vectors, n_kernels, max_iters=max_iters, seed=seed)
    logger.info(
        "k-means kernel init: J=%d, N=%d, iterations=%d, converged=%s, objective=%.4f",
        n_kernels, result.labels.shape[0], result.n_iter, result.converged, result.objective,
    )
    return result


#persistence

def save_kernel_bank(bank: KernelBank, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": BANK_FORMAT_VERSION,
        "J": bank.n_kernels,
        "D": bank.dim,
        "sigma": bank.sigma,
        "kernels": bank.kernels.detach().double().cpu().flatten().tolist(),
    }
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


def load_kernel_bank(path: Path) -> KernelBank:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"kernel bank file not found: {path}")
    payload = json.loads(path.read_text(encoding="utf-8"))
    version = payload.get("format_version")
    if version != BANK_FORMAT_VERSION:
        raise ShapeError(f"{path}: unsupported kernel bank format_version {version!r}")
    n_kernels, dim = int(payload["J"]), int(payload["D"])
    flat = payload["kernels"]
    if len(flat) != n_kernels * dim:
        raise ShapeError(f"{path}: expected {n_kernels * dim} kernel entries, found {len(flat)}")
    kernels = torch.tensor(flat, dtype=torch.float64).reshape(n_kernels, dim)
    return KernelBank(kernels, sigma=float(payload["sigma"]))
