"""Center crops, bilinear resizing and the dual-resolution input pair."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .core import GeometryError, ImageTensor, Magnification


def _unwrap(img):
    return (img.data, img) if isinstance(img, ImageTensor) else (img, None)


def centercrop(img, size: int):
    """Exact ``size x size`` subarray at offset ((H-size)/2, (W-size)/2).

    Works on tensors shaped [..., H, W] and on :class:`ImageTensor`.
    """
    x, tagged = _unwrap(img)
    h, w = x.shape[-2:]
    if size < 1 or size > min(h, w):
        raise GeometryError(f"crop size {size} does not fit {h}x{w}")
    if (h - size) % 2 or (w - size) % 2:
        raise GeometryError(f"crop {size} from {h}x{w} has a non-integral offset")
    top, left = (h - size) // 2, (w - size) // 2
    out = x[..., top:top + size, left:left + size]
    return tagged.replace(data=out) if tagged is not None else out


def resize(img, size: int):
    """Bilinear resampling with half-pixel centers, no antialiasing.

    Downscaling by exactly 2 is a 2x2 box average. Same-size resize returns
    the input unchanged.
    """
    x, tagged = _unwrap(img)
    if size < 1:
        raise GeometryError(f"resize target must be >= 1, got {size}")
    h, w = x.shape[-2:]
    if (h, w) == (size, size):
        out = x
    else:
        lead = x.shape[:-2]
        flat = x.reshape(-1, 1, h, w)
        flat = F.interpolate(flat, size=(size, size), mode="bilinear", align_corners=False)
        out = flat.reshape(*lead, size, size)
    return tagged.replace(data=out) if tagged is not None else out


@dataclass(frozen=True)
class ResolutionPair:
    fs_10x: ImageTensor
    fs_5x: ImageTensor
    source_id: str = ""


def make_resolution_pair(source, net_size: int = 224) -> ResolutionPair:
    """Split a 2*net_size source tile into the native-resolution center crop and
    the whole tile downsampled to the same size (twice the field of view)."""
    x, tagged = _unwrap(source)
    if tuple(x.shape[-2:]) != (2 * net_size, 2 * net_size):
        raise GeometryError(
            f"source must be {2 * net_size}x{2 * net_size}, got {tuple(x.shape[-2:])}"
        )
    sid = tagged.id if tagged is not None else ""
    return ResolutionPair(
        fs_10x=ImageTensor(centercrop(x, net_size), Magnification.X10, sid),
        fs_5x=ImageTensor(resize(x, net_size), Magnification.X5, sid),
        source_id=sid,
    )


def pair_tensors(source: torch.Tensor, net_size: int = 224) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched, untagged variant of :func:`make_resolution_pair` used in training."""
    if tuple(source.shape[-2:]) != (2 * net_size, 2 * net_size):
        raise GeometryError(f"source must be {2 * net_size}x{2 * net_size}")
    return centercrop(source, net_size), resize(source, net_size)
