"""Single-level orthonormal 2-D Haar transform.

For every 2x2 block ``a b / c d`` (per channel)::

    LL = (a + b + c + d) / 2      HL = (a - b + c - d) / 2
    LH = (a + b - c - d) / 2      HH = (a - b - c + d) / 2

HL responds to left/right differences, LH to top/bottom differences. The
transform is its own transpose, so :func:`idwt2` is exact up to rounding.
Both functions accept any leading batch dimensions ``[..., C, H, W]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .core import ImageTensor, Magnification, ShapeError, pixels_to_tensor, tensor_to_pixels

BAND_NAMES = ("ll", "hl", "lh", "hh")


@dataclass(frozen=True)
class WaveletBands:
    ll: torch.Tensor
    hl: torch.Tensor
    lh: torch.Tensor
    hh: torch.Tensor
    source_shape: tuple[int, int]
    norm: str = "orthonormal"

    def __post_init__(self):
        shapes = {tuple(b.shape) for b in self.as_tuple()}
        if len(shapes) != 1:
            raise ShapeError(f"band shapes differ: {sorted(shapes)}")
        h, w = self.source_shape
        if tuple(self.ll.shape[-2:]) != (h // 2, w // 2):
            raise ShapeError(
                f"bands {tuple(self.ll.shape[-2:])} inconsistent with source {self.source_shape}"
            )

    def as_tuple(self) -> tuple[torch.Tensor, ...]:
        return (self.ll, self.hl, self.lh, self.hh)

    def energy(self) -> torch.Tensor:
        return sum((b * b).sum() for b in self.as_tuple())

    def map(self, fn) -> "WaveletBands":
        return WaveletBands(*(fn(b) for b in self.as_tuple()), source_shape=self.source_shape)


def dwt2(img: torch.Tensor | ImageTensor) -> WaveletBands:
    x = img.data if isinstance(img, ImageTensor) else img
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"dwt2 needs even height and width, got {h}x{w}")
    # butterfly over rows, then columns; same result as the block formulas
    v = x.reshape(*x.shape[:-2], h // 2, 2, w // 2, 2)
    s = v[..., 0, :, :] + v[..., 1, :, :]
    d = v[..., 0, :, :] - v[..., 1, :, :]
    if torch.is_grad_enabled() and x.requires_grad:
        bands = (s[..., 0] + s[..., 1], s[..., 0] - s[..., 1], d[..., 0] + d[..., 1], d[..., 0] - d[..., 1])
        bands = tuple(band * 0.5 for band in bands)
    else:
        # out= is not differentiable but skips four temporaries
        out = x.new_empty(4, *s.shape[:-1])
        torch.add(s[..., 0], s[..., 1], out=out[0])
        torch.sub(s[..., 0], s[..., 1], out=out[1])
        torch.add(d[..., 0], d[..., 1], out=out[2])
        torch.sub(d[..., 0], d[..., 1], out=out[3])
        bands = out.mul_(0.5).unbind(0)
    return WaveletBands(*bands, source_shape=(h, w))


def idwt2(bands: WaveletBands) -> torch.Tensor:
    ll, hl, lh, hh = bands.as_tuple()
    if not (ll.shape == hl.shape == lh.shape == hh.shape):
        raise ShapeError("mismatched band shapes")
    h, w = bands.source_shape
    out = ll.new_empty(*ll.shape[:-2], h, w)
    v = out.view(*ll.shape[:-2], h // 2, 2, w // 2, 2)
    s0, s1, d0, d1 = ll + hl, ll - hl, lh + hh, lh - hh
    v[..., 0, :, 0] = s0 + d0
    v[..., 0, :, 1] = s1 + d1
    v[..., 1, :, 0] = s0 - d0
    v[..., 1, :, 1] = s1 - d1
    return out.mul_(0.5)


# PNG round trip for the debugging CLI. Each band channel is affinely
# stretched to [0, 255]; offset/scale per band and channel go to a sidecar.

SIDECAR_NAME = "bands.txt"


def decompose_png(src: str | Path, out_dir: str | Path) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pixels = np.asarray(Image.open(src).convert("RGB"))
    bands = dwt2(pixels_to_tensor(pixels, torch.float64))
    lines = [f"source_shape = {bands.source_shape[0]} {bands.source_shape[1]}"]
    meta = {}
    for name, band in zip(BAND_NAMES, bands.as_tuple()):
        arr = band.numpy()
        lo = arr.min(axis=(1, 2))
        hi = arr.max(axis=(1, 2))
        scale = np.where(hi > lo, (hi - lo) / 255.0, 1.0)
        q = np.rint((arr - lo[:, None, None]) / scale[:, None, None]).astype(np.uint8)
        Image.fromarray(np.ascontiguousarray(q.transpose(1, 2, 0))).save(out_dir / f"{name}.png")
        meta[name] = (lo, scale)
        lines.append(f"{name}.offset = " + " ".join(repr(float(v)) for v in lo))
        lines.append(f"{name}.scale = " + " ".join(repr(float(v)) for v in scale))
    (out_dir / SIDECAR_NAME).write_text("\n".join(lines) + "\n")
    return meta


def recompose_png(band_dir: str | Path, dst: str | Path) -> np.ndarray:
    band_dir = Path(band_dir)
    meta: dict[str, list[float]] = {}
    for line in (band_dir / SIDECAR_NAME).read_text().splitlines():
        if "=" in line:
            key, _, val = (s.strip() for s in line.partition("="))
            meta[key] = [float(v) for v in val.split()]
    tensors = []
    for name in BAND_NAMES:
        q = np.asarray(Image.open(band_dir / f"{name}.png").convert("RGB")).astype(np.float64)
        lo = np.array(meta[f"{name}.offset"])
        scale = np.array(meta[f"{name}.scale"])
        tensors.append(torch.from_numpy(q.transpose(2, 0, 1) * scale[:, None, None] + lo[:, None, None]))
    h, w = (int(v) for v in meta["source_shape"])
    img = idwt2(WaveletBands(*tensors, source_shape=(h, w)))
    pixels = tensor_to_pixels(img)
    Image.fromarray(pixels).save(dst)
    return pixels


def band_image(band: torch.Tensor, id: str = "") -> ImageTensor:
    """Wrap a band as an ImageTensor; bands may legitimately exceed [-1, 1]."""
    return ImageTensor(band, Magnification.BAND, id, value_range=(-2.0, 2.0))
