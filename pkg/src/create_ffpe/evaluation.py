"""FID, KID x100, feature extractors and the staining-preservation score."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ConfigError, NumericError, torch_generator
from .data import staining_status_of

log = logging.getLogger(__name__)

DESK_CNN_ID = "desk_cnn-v1-seed0"
REFERENCE_ID = "inception_v3-pool3"
EIG_CLAMP = 1e-10


@dataclass(frozen=True)
class FeatureSetStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int
    extractor_id: str = ""

    @classmethod
    def from_features(cls, feats: np.ndarray, extractor_id: str = "") -> "FeatureSetStats":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise ConfigError("need at least two feature vectors")
        cov = np.cov(feats, rowvar=False).reshape(feats.shape[1], feats.shape[1])
        return cls(feats.mean(axis=0), 0.5 * (cov + cov.T), feats.shape[0], extractor_id)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def fid(a: FeatureSetStats, b: FeatureSetStats) -> float:
    """Frechet distance between two Gaussians.

    Tr((S_a S_b)^1/2) is evaluated through the symmetric PSD matrix
    S_a^1/2 S_b S_a^1/2, which has the same eigenvalues; eigenvalues below
    1e-10 are clamped to zero.
    """
    if a.extractor_id != b.extractor_id:
        raise ConfigError(f"extractor mismatch: {a.extractor_id!r} vs {b.extractor_id!r}")
    if a.mean.shape != b.mean.shape:
        raise ConfigError("feature dimensions differ")
    if not (np.isfinite(a.cov).all() and np.isfinite(b.cov).all()):
        raise NumericError("non-finite covariance")
    root_a = _psd_sqrt(a.cov)
    middle = root_a @ b.cov @ root_a
    try:
        vals = np.linalg.eigvalsh(0.5 * (middle + middle.T))
    except np.linalg.LinAlgError as exc:
        raise NumericError("matrix square root did not converge") from exc
    vals = np.where(vals < EIG_CLAMP, 0.0, vals)
    diff = a.mean - b.mean
    value = diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.sqrt(vals).sum()
    return float(max(value, 0.0))


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    m, n = len(x), len(y)
    kxx = polynomial_kernel(x, x)
    kyy = polynomial_kernel(y, y)
    kxy = polynomial_kernel(x, y)
    return float(
        (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
        + (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
        - 2.0 * kxy.mean()
    )


def kid_x100(feats_a, feats_b, subset_size: int = 100, n_subsets: int = 100, seed: int = 0) -> float:
    """100 x mean unbiased MMD^2 (cubic polynomial kernel) over random subsets
    drawn without replacement."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if subset_size < 2 or len(a) < subset_size or len(b) < subset_size:
        raise ConfigError(
            f"KID needs >= subset_size={subset_size} (>= 2) samples per side, got {len(a)} and {len(b)}"
        )
    if a.shape[1] != b.shape[1]:
        raise ConfigError("feature dimensions differ")
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(n_subsets):
        ia = rng.choice(len(a), subset_size, replace=False)
        ib = rng.choice(len(b), subset_size, replace=False)
        total += mmd2_unbiased(a[ia], b[ib])
    return 100.0 * total / n_subsets


# --------------------------------------------------------------------------
# feature extractors


class DeskCNN(nn.Module):
    """Fixed random convolutional embedder (64-d). Its FIDs are only
    comparable with other desk_cnn FIDs."""

    dim = 64

    def __init__(self, seed: int = 0):
        super().__init__()
        chans = [3, 16, 32, 64, 64]
        self.convs = nn.ModuleList(
            nn.Conv2d(cin, cout, 3, stride=2, padding=1) for cin, cout in zip(chans, chans[1:])
        )
        gen = torch_generator(seed, "desk_cnn")
        for conv in self.convs:
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu", generator=gen)
            nn.init.zeros_(conv.bias)
        self.double().eval()
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        for conv in self.convs:
            x = F.relu(conv(x))
        return x.mean(dim=(-2, -1))


_DESK = None


def desk_cnn() -> DeskCNN:
    global _DESK
    if _DESK is None:
        _DESK = DeskCNN()
    return _DESK


def _reference_model():
    try:
        from torchvision.models import Inception_V3_Weights, inception_v3
    except ImportError as exc:  # pragma: no cover
        raise ConfigError("the reference extractor needs torchvision") from exc
    weights = Inception_V3_Weights.IMAGENET1K_V1
    cached = torch.hub.get_dir() + "/checkpoints/" + weights.url.rsplit("/", 1)[-1]
    if not os.path.exists(cached):
        raise FileNotFoundError(
            f"reference Inception-v3 weights not found at {cached}. Download them once with\n"
            "  python -c \"import torchvision; torchvision.models.inception_v3(weights='IMAGENET1K_V1')\"\n"
            "or use --extractor desk_cnn for offline, self-consistent comparisons."
        )
    model = inception_v3(weights=weights)
    model.fc = nn.Identity()
    return model.eval()


def extractor_dim(extractor: str) -> int:
    return {"desk_cnn": DeskCNN.dim, "reference": 2048}[extractor]


def extractor_id(extractor: str) -> str:
    return {"desk_cnn": DESK_CNN_ID, "reference": REFERENCE_ID}[extractor]


def extract_features(imgs: Sequence[torch.Tensor] | torch.Tensor, extractor: str = "desk_cnn",
                     batch_size: int = 16) -> np.ndarray:
    """Embed CHW images in [-1, 1]; returns an [n, d] float64 array."""
    if extractor not in ("desk_cnn", "reference"):
        raise ConfigError(f"unknown extractor {extractor!r}")
    imgs = list(imgs)
    if not imgs:
        return np.zeros((0, extractor_dim(extractor)))
    if extractor == "desk_cnn":
        model, dtype = desk_cnn(), torch.float64
    else:
        model, dtype = _reference_model(), torch.float32
    out = []
    with torch.no_grad():
        for i in range(0, len(imgs), batch_size):
            batch = torch.stack([t.to(dtype) for t in imgs[i:i + batch_size]])
            if extractor == "reference":
                batch = F.interpolate(batch, size=(299, 299), mode="bilinear", align_corners=False)
            out.append(model(batch).to(torch.float64).numpy())
    return np.concatenate(out)


# --------------------------------------------------------------------------
# staining preservation


@dataclass(frozen=True)
class PreservationResult:
    accuracy: float
    n_scored: int
    n_excluded: int


def staining_preservation(outputs: Sequence, labels: Sequence[str]) -> PreservationResult:
    """Fraction of outputs whose oracle staining status equals the ground-truth label.

    Indeterminate outputs are excluded and counted.
    """
    if len(outputs) == 0:
        raise ValueError("staining_preservation on an empty set")
    if len(outputs) != len(labels):
        raise ValueError(f"{len(outputs)} outputs but {len(labels)} labels")
    hits = scored = 0
    for img, label in zip(outputs, labels):
        status = staining_status_of(img)
        if status is None:
            continue
        scored += 1
        hits += status == label
    if scored == 0:
        raise ValueError("every output was indeterminate")
    return PreservationResult(hits / scored, scored, len(outputs) - scored)
