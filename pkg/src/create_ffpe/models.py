"""Generators, patch discriminator and the projection heads of the patch loss.

The generators follow the ResNet encoder/residual-blocks/decoder layout used by
CUT-family translators, with one addition: the decoder predicts a residual that
is added to the input (in pre-tanh space for the main generator), so a zeroed
output layer gives the identity map.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ConfigError, ImageTensor, ShapeError, TrainConfig
from .wavelet import WaveletBands

# Inputs at exactly +-1 would map to +-inf under atanh.
_SKIP_SHRINK = 1e-4


@dataclass(frozen=True)
class GeneratorSpec:
    base_width: int = 64
    n_resblocks: int = 9
    downsample_levels: int = 2
    output_activation: str = "tanh"  # "tanh" or "linear"


@dataclass(frozen=True)
class DiscriminatorSpec:
    base_width: int = 64
    n_layers: int = 3


@dataclass
class FeatureStack:
    maps: list
    layer_ids: tuple


def _norm(ch: int) -> nn.Module:
    return nn.InstanceNorm2d(ch, affine=False)


class ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), _norm(ch), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), _norm(ch),
        )

    def forward(self, x):
        return x + self.body(x)


class ResnetGenerator(nn.Module):
    """Fully convolutional image-to-image generator.

    Encoder stages are exposed for feature taps: tap 0 is the (padded) input,
    tap 1 the stem output, then one tap per downsampling level and per
    residual block.
    """

    def __init__(self, spec: GeneratorSpec = GeneratorSpec()):
        super().__init__()
        if spec.output_activation not in ("tanh", "linear"):
            raise ConfigError(f"unknown output activation {spec.output_activation!r}")
        self.spec = spec
        w = spec.base_width
        stages: list[nn.Module] = [nn.Sequential(
            nn.ReflectionPad2d(3), nn.Conv2d(3, w, 7), _norm(w), nn.ReLU(True),
        )]
        ch = w
        for _ in range(spec.downsample_levels):
            stages.append(nn.Sequential(
                nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1), _norm(ch * 2), nn.ReLU(True),
            ))
            ch *= 2
        stages.extend(ResBlock(ch) for _ in range(spec.n_resblocks))
        self.encoder = nn.ModuleList(stages)

        up: list[nn.Module] = []
        for _ in range(spec.downsample_levels):
            up += [
                nn.ConvTranspose2d(ch, ch // 2, 3, stride=2, padding=1, output_padding=1),
                _norm(ch // 2), nn.ReLU(True),
            ]
            ch //= 2
        self.decoder = nn.Sequential(*up)
        self.head = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(ch, 3, 7))

    @property
    def n_taps(self) -> int:
        return 1 + len(self.encoder)

    def tap_channels(self, layer_ids: Sequence[int]) -> list[int]:
        w = self.spec.base_width
        chans = [3, w] + [w * 2 ** (i + 1) for i in range(self.spec.downsample_levels)]
        chans += [chans[-1]] * self.spec.n_resblocks
        self._check_layers(layer_ids)
        return [chans[i] for i in layer_ids]

    def _check_layers(self, layer_ids):
        bad = [i for i in layer_ids if not 0 <= int(i) < self.n_taps]
        if bad:
            raise ConfigError(f"invalid layer ids {bad}; valid range is 0..{self.n_taps - 1}")

    def _pad(self, x):
        h, w = x.shape[-2:]
        if h % 2 or w % 2 or h < 8 or w < 8:
            raise ShapeError(f"generator input must be even and >= 8, got {h}x{w}")
        m = 2 ** self.spec.downsample_levels
        ph, pw = -h % m, -w % m
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="reflect")
        return x, (h, w)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        xp, (h, w) = self._pad(x)
        z = xp
        for stage in self.encoder:
            z = stage(z)
        r = self.head(self.decoder(z))[..., :h, :w]
        if self.spec.output_activation == "tanh":
            return torch.tanh(torch.atanh(x * (1 - _SKIP_SHRINK)) + r)
        return x + r

    def encode(self, x: torch.Tensor, layer_ids: Sequence[int]) -> list[torch.Tensor]:
        self._check_layers(layer_ids)
        z, _ = self._pad(x)
        wanted = set(int(i) for i in layer_ids)
        taps = {0: z}
        for i, stage in enumerate(self.encoder, start=1):
            if i > max(wanted):
                break
            z = stage(z)
            taps[i] = z
        return [taps[int(i)] for i in layer_ids]


class PatchDiscriminator(nn.Module):
    """PatchGAN classifier producing a map of real/fake logits.

    ``n_layers`` stride-2 convolutions followed by two stride-1 4x4 convs; for
    H divisible by 2**n_layers the map is (H / 2**n_layers - 2) on a side.
    """

    def __init__(self, spec: DiscriminatorSpec = DiscriminatorSpec()):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        layers: list[nn.Module] = [nn.Conv2d(3, w, 4, 2, 1), nn.LeakyReLU(0.2, True)]
        mult = 1
        for n in range(1, spec.n_layers):
            prev, mult = mult, min(2 ** n, 8)
            layers += [nn.Conv2d(w * prev, w * mult, 4, 2, 1), _norm(w * mult), nn.LeakyReLU(0.2, True)]
        prev, mult = mult, min(2 ** spec.n_layers, 8)
        layers += [nn.Conv2d(w * prev, w * mult, 4, 1, 1), _norm(w * mult), nn.LeakyReLU(0.2, True)]
        layers.append(nn.Conv2d(w * mult, 1, 4, 1, 1))
        self.model = nn.Sequential(*layers)

    def output_size(self, size: int) -> int:
        for _ in range(self.spec.n_layers):
            size = (size + 2 - 4) // 2 + 1
        return size - 2

    def forward(self, x):
        h, w = x.shape[-2:]
        if self.output_size(min(h, w)) < 1:
            raise ShapeError(f"input {h}x{w} too small for a {self.spec.n_layers}-layer patch discriminator")
        return self.model(x)


class PatchSampleHeads(nn.Module):
    """One two-layer MLP per tapped layer, applied to sampled feature vectors."""

    def __init__(self, channels: Sequence[int], dim: int = 256):
        super().__init__()
        self.mlps = nn.ModuleList(
            nn.Sequential(nn.Linear(c, dim), nn.ReLU(True), nn.Linear(dim, dim)) for c in channels
        )

    def forward(self, idx: int, vectors: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.mlps[idx](vectors), dim=-1)


def init_weights(module: nn.Module, generator: torch.Generator | None = None, gain: float = 0.02):
    """N(0, gain) conv/linear weights, zero biases (pix2pix convention)."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, gain, generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def build_networks(cfg: TrainConfig, generator: torch.Generator | None = None) -> dict:
    """Instantiate {G, G_aux, D, heads} for a config, initialised from ``generator``."""
    g = ResnetGenerator(GeneratorSpec(cfg.gen_width, cfg.n_resblocks, cfg.downsample_levels, "tanh"))
    g_aux = ResnetGenerator(
        GeneratorSpec(cfg.gen_aux_width, cfg.n_resblocks, cfg.downsample_levels, "linear")
    )
    d = PatchDiscriminator(DiscriminatorSpec(cfg.disc_width, cfg.disc_layers))
    heads = PatchSampleHeads(g.tap_channels(cfg.nce_layers), cfg.nce_head_dim)
    nets = {"G": g, "G_aux": g_aux, "D": d, "heads": heads}
    for net in nets.values():
        init_weights(net, generator)
    if cfg.identity_init:
        init_identity_bias(g)
        init_identity_bias(g_aux)
    return {k: v.to(cfg.dtype) for k, v in nets.items()}


def init_identity_bias(g: ResnetGenerator) -> None:
    """Zero the generator's output layer so that it starts as (nearly) the identity."""
    conv = g.head[-1]
    with torch.no_grad():
        conv.weight.zero_()
        conv.bias.zero_()


def _batched(img):
    x = img.data if isinstance(img, ImageTensor) else img
    return (x.unsqueeze(0), True) if x.ndim == 3 else (x, False)


def transfer(g: ResnetGenerator, img):
    """Apply a generator; returns a tensor (or ImageTensor) of the input's shape."""
    x, squeeze = _batched(img)
    y = g(x)
    y = y.squeeze(0) if squeeze else y
    return img.replace(data=y) if isinstance(img, ImageTensor) else y


def transfer_bands(g: ResnetGenerator, g_aux: ResnetGenerator, bands: WaveletBands) -> WaveletBands:
    """Low band through ``g`` (mapped /2 into [-1, 1] and back), each high band
    through the shared ``g_aux``."""
    def run(net, band):
        x, squeeze = _batched(band)
        y = net(x)
        return y.squeeze(0) if squeeze else y

    ll = run(g, bands.ll / 2) * 2
    hl, lh, hh = (run(g_aux, b) for b in (bands.hl, bands.lh, bands.hh))
    return WaveletBands(ll, hl, lh, hh, source_shape=bands.source_shape)


def discriminate(d: PatchDiscriminator, img) -> torch.Tensor:
    x, squeeze = _batched(img)
    out = d(x)
    return out.squeeze(0) if squeeze else out


def encode_features(g: ResnetGenerator, img, layer_ids: Sequence[int]) -> FeatureStack:
    x, squeeze = _batched(img)
    maps = g.encode(x, layer_ids)
    if squeeze:
        maps = [m.squeeze(0) for m in maps]
    return FeatureStack(maps, tuple(int(i) for i in layer_ids))
