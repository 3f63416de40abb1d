"""Training objectives.

crcm_loss and wdgm_loss are the two consistency terms; gan_* are the
least-squares (default) or BCE adversarial terms; patchnce_loss is the
InfoNCE patch correspondence loss between input and output features.
"""

from __future__ import annotations

from typing import Mapping

import torch
import torch.nn.functional as F

from .core import LOSS_NAMES, ConfigError, ShapeError
from .geometry import centercrop, resize
from .models import FeatureStack, PatchSampleHeads


def crcm_loss(out_5x: torch.Tensor, out_10x: torch.Tensor, compare_size: int | None = None) -> torch.Tensor:
    """L1 between the center of the wide-field output and the downscaled main output.

    The wide-field (5x) output is the target and receives no gradient.
    """
    if out_5x.shape != out_10x.shape:
        raise ShapeError(f"shape mismatch {tuple(out_5x.shape)} vs {tuple(out_10x.shape)}")
    size = compare_size or out_10x.shape[-1] // 2
    target = centercrop(out_5x.detach(), size)
    return (target - resize(out_10x, size)).abs().mean()


def wdgm_loss(out_10x: torch.Tensor, wdgm_out: torch.Tensor) -> torch.Tensor:
    """L1 between the main output and the band-wise transferred image; both sides get gradients."""
    if out_10x.shape != wdgm_out.shape:
        raise ShapeError(f"shape mismatch {tuple(out_10x.shape)} vs {tuple(wdgm_out.shape)}")
    return (out_10x - wdgm_out).abs().mean()


def gan_loss_d(d_real: torch.Tensor, d_fake: torch.Tensor, mode: str = "lsgan") -> torch.Tensor:
    """Discriminator side; pass logits of *detached* fakes."""
    if mode == "lsgan":
        return 0.5 * ((d_real - 1) ** 2).mean() + 0.5 * (d_fake ** 2).mean()
    if mode == "vanilla":
        return 0.5 * (
            F.binary_cross_entropy_with_logits(d_real, torch.ones_like(d_real))
            + F.binary_cross_entropy_with_logits(d_fake, torch.zeros_like(d_fake))
        )
    raise ConfigError(f"unknown gan mode {mode!r}")


def gan_loss_g(d_fake: torch.Tensor, mode: str = "lsgan") -> torch.Tensor:
    if mode == "lsgan":
        return ((d_fake - 1) ** 2).mean()
    if mode == "vanilla":
        return F.binary_cross_entropy_with_logits(d_fake, torch.ones_like(d_fake))
    raise ConfigError(f"unknown gan mode {mode!r}")


def gan_losses(d_real, d_fake, mode: str = "lsgan") -> tuple[torch.Tensor, torch.Tensor]:
    """(discriminator loss on detached fakes, generator loss with gradients)."""
    return gan_loss_d(d_real, d_fake.detach(), mode), gan_loss_g(d_fake, mode)


def info_nce(query: torch.Tensor, key: torch.Tensor, temperature: float) -> torch.Tensor:
    """Mean cross-entropy of identifying row i of ``key`` as the match for row i of ``query``.

    ``query``/``key`` are [..., N, D]; similarities are plain dot products, so
    pass L2-normalised vectors for cosine similarity.
    """
    logits = query @ key.transpose(-1, -2) / temperature
    n = logits.shape[-1]
    target = torch.arange(n, device=logits.device).expand(logits.shape[:-1])
    return F.cross_entropy(logits.reshape(-1, n), target.reshape(-1))


def sample_locations(h: int, w: int, n_patches: int, generator: torch.Generator | None) -> torch.Tensor:
    if n_patches > h * w:
        raise ConfigError(f"n_patches={n_patches} exceeds the {h}x{w}={h * w} available locations")
    return torch.randperm(h * w, generator=generator)[:n_patches]


def patchnce_loss(
    feats_src: FeatureStack,
    feats_out: FeatureStack,
    heads: PatchSampleHeads,
    n_patches: int = 256,
    temperature: float = 0.07,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Patch-wise contrastive loss between input and output encoder features.

    For each tapped layer the same ``n_patches`` locations are sampled from
    both stacks; the source projections act as (detached) keys, the output
    projections as queries. Negatives are the other sampled locations of the
    same image. The result is averaged over layers.
    """
    if feats_src.layer_ids != feats_out.layer_ids:
        raise ConfigError("feature stacks come from different layers")
    if len(feats_src.maps) != len(heads.mlps):
        raise ConfigError(f"{len(feats_src.maps)} feature maps but {len(heads.mlps)} heads")
    total = 0.0
    for i, (src, out) in enumerate(zip(feats_src.maps, feats_out.maps)):
        if src.shape != out.shape:
            raise ShapeError(f"layer {feats_src.layer_ids[i]}: {tuple(src.shape)} vs {tuple(out.shape)}")
        if src.ndim == 3:
            src, out = src.unsqueeze(0), out.unsqueeze(0)
        h, w = src.shape[-2:]
        idx = sample_locations(h, w, n_patches, generator)
        k = heads(i, src.flatten(2)[:, :, idx].transpose(1, 2)).detach()
        q = heads(i, out.flatten(2)[:, :, idx].transpose(1, 2))
        total = total + info_nce(q, k, temperature)
    return total / len(feats_src.maps)


def generator_loss(parts: Mapping[str, torch.Tensor | float], weights: Mapping[str, float]):
    missing = [k for k in LOSS_NAMES if k not in parts or k not in weights]
    if missing:
        raise ConfigError(f"missing loss components/weights: {missing}")
    return sum(float(weights[k]) * parts[k] for k in LOSS_NAMES)
