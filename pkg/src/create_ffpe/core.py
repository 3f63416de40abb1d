"""Shared types, configuration, seeding and checkpoint I/O."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import random
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

CHECKPOINT_FORMAT_VERSION = 1
LOSS_NAMES = ("gan_G", "patchNCE", "crcm", "wdgm")


class ConfigError(ValueError):
    """Invalid configuration value, unknown key or bad argument."""


class ShapeError(ValueError):
    """Tensor shape violates an operation's precondition."""


class GeometryError(ValueError):
    """Crop/resize request that cannot be satisfied exactly."""


class IntegrityError(RuntimeError):
    """Corpus manifest violates an integrity constraint (e.g. patient leakage)."""


class DataFormatError(ValueError):
    """A tile on disk does not have the expected format."""


class NumericError(RuntimeError):
    """Non-finite value or non-convergent numerical routine."""


class CheckpointVersionError(RuntimeError):
    pass


class Magnification(str, Enum):
    X10 = "10x"
    X5 = "5x"
    BAND = "band"


@dataclass(frozen=True)
class ImageTensor:
    """A tagged RGB tile, ``data`` shaped [3, H, W] in [-1, 1].

    Values are clamped to the declared range on construction. H and W must be
    even and at least 8.
    """

    data: torch.Tensor
    magnification: Magnification = Magnification.X10
    id: str = ""
    value_range: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        d = self.data
        if d.ndim != 3 or d.shape[0] != 3:
            raise ShapeError(f"expected [3, H, W], got {tuple(d.shape)}")
        h, w = d.shape[-2:]
        if h % 2 or w % 2 or h < 8 or w < 8:
            raise ShapeError(f"height and width must be even and >= 8, got {h}x{w}")
        if not torch.isfinite(d).all():
            raise NumericError(f"non-finite values in image {self.id!r}")
        lo, hi = self.value_range
        object.__setattr__(self, "data", d.clamp(lo, hi))
        object.__setattr__(self, "magnification", Magnification(self.magnification))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def replace(self, **kw) -> "ImageTensor":
        return dataclasses.replace(self, **kw)


def pixels_to_tensor(pixels: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """HWC uint8 -> CHW tensor with v = p / 127.5 - 1."""
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"expected HxWx3 pixels, got {arr.shape}")
    return torch.from_numpy(arr.astype(np.float64) / 127.5 - 1.0).permute(2, 0, 1).to(dtype)


def tensor_to_pixels(t: torch.Tensor) -> np.ndarray:
    """CHW tensor in [-1, 1] -> HWC uint8 (round to nearest)."""
    arr = t.detach().to(torch.float64).clamp(-1, 1).permute(1, 2, 0).cpu().numpy()
    return np.rint((arr + 1.0) * 127.5).astype(np.uint8)


@dataclass
class TrainConfig:
    """Training hyperparameters.

    Defaults are the full-scale values; :meth:`desk` returns the reduced
    network/iteration setting used for tests and the ablation recipe. Tile
    geometry is identical in both.
    """

    lr_initial: float = 0.0001
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    total_iterations: int = 400_000
    decay_start_fraction: float = 0.5
    batch_size: int = 1
    tile_size_source: int = 448
    tile_size_net: int = 224
    compare_size: int = 112
    loss_weights: dict = field(
        default_factory=lambda: {"gan_G": 1.0, "patchNCE": 1.0, "crcm": 1.0, "wdgm": 1.0}
    )
    seed: int = 0

    # networks
    gen_width: int = 64
    gen_aux_width: int = 32
    n_resblocks: int = 9
    downsample_levels: int = 2
    disc_width: int = 64
    disc_layers: int = 3
    identity_init: bool = False

    # objectives
    gan_mode: str = "lsgan"
    nce_layers: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    n_patches: int = 256
    nce_temperature: float = 0.07
    nce_head_dim: int = 256
    d_on_5x: bool = False

    # run control
    checkpoint_every: int = 0
    sample_every: int = 0
    deterministic: bool = False
    precision: int = 32

    def __post_init__(self):
        self.validate()

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        base = dict(
            total_iterations=5000, gen_width=16, gen_aux_width=8, n_resblocks=2,
            disc_width=16,
        )
        base.update(overrides)
        return cls(**base)

    def validate(self) -> None:
        if not 0.0 < self.decay_start_fraction < 1.0:
            raise ConfigError("decay_start_fraction must lie in (0, 1)")
        for name in ("total_iterations", "batch_size", "gen_width", "gen_aux_width",
                     "disc_width", "disc_layers", "n_patches"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.batch_size != 1:
            raise ConfigError("only batch_size=1 is supported")
        if not (self.tile_size_source == 2 * self.tile_size_net == 4 * self.compare_size):
            raise ConfigError(
                "tile sizes must satisfy tile_size_source = 2*tile_size_net = 4*compare_size"
            )
        if self.tile_size_net % 2:
            raise ConfigError("tile_size_net must be even")
        unknown = set(self.loss_weights) - set(LOSS_NAMES)
        missing = set(LOSS_NAMES) - set(self.loss_weights)
        if unknown or missing:
            raise ConfigError(
                f"loss_weights must have exactly {LOSS_NAMES}; "
                f"unknown={sorted(unknown)} missing={sorted(missing)}"
            )
        if any(float(v) < 0 for v in self.loss_weights.values()):
            raise ConfigError("loss weights must be non-negative")
        if self.gan_mode not in ("lsgan", "vanilla"):
            raise ConfigError(f"gan_mode must be 'lsgan' or 'vanilla', got {self.gan_mode!r}")
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        if self.nce_temperature <= 0:
            raise ConfigError("nce_temperature must be positive")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == 64 else torch.float32

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(serialize_config(self).encode()).hexdigest()


def serialize_config(cfg: TrainConfig) -> str:
    """One ``key = <json value>`` line per field."""
    lines = [f"{k} = {json.dumps(v, sort_keys=True)}" for k, v in cfg.to_dict().items()]
    return "\n".join(lines) + "\n"


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse the flat key/value format; fields absent from ``text`` come from ``base``."""
    valid = {f.name for f in dataclasses.fields(TrainConfig)}
    values: dict[str, Any] = (base or TrainConfig()).to_dict()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = (s.strip() for s in line.partition("="))
        if key not in valid:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        try:
            values[key] = json.loads(val)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad value for {key!r}: {val!r}") from exc
    try:
        return TrainConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | os.PathLike, base: TrainConfig | None = None) -> TrainConfig:
    return parse_config(Path(path).read_text(), base)


def save_config(cfg: TrainConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(serialize_config(cfg))


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Constant learning rate, then linear decay to exactly 0 at ``total_iterations``."""
    total = cfg.total_iterations
    if not 0 <= iteration <= total:
        raise IndexError(f"iteration {iteration} outside [0, {total}]")
    start = cfg.decay_start_fraction * total
    if iteration < start:
        return cfg.lr_initial
    return cfg.lr_initial * (total - iteration) / (total - start)


@dataclass
class LossReport:
    iteration: int
    values: dict

    def check_total(self, weights: Mapping[str, float], rtol: float = 1e-6) -> None:
        expected = sum(float(weights[k]) * self.values[k] for k in LOSS_NAMES)
        total = self.values["total_G"]
        if abs(total - expected) > rtol * max(abs(expected), 1e-12):
            raise NumericError(f"total_G={total!r} != weighted sum {expected!r}")


def seed_all(seed: int, deterministic: bool = False) -> None:
    """Seed python, numpy and torch global generators.

    Components that sample during training (data order, patch locations) use
    their own streams derived from the seed; see :func:`stream_seed`.
    """
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.backends.cudnn.benchmark = False


def stream_seed(*keys: int | str) -> int:
    """Stable 63-bit seed derived from a tuple of keys."""
    h = hashlib.blake2b(repr(keys).encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") >> 1


def torch_generator(*keys: int | str) -> torch.Generator:
    return torch.Generator().manual_seed(stream_seed(*keys))


def save_checkpoint(path: str | os.PathLike, payload: dict) -> None:
    """Atomically write a versioned checkpoint (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"format_version": CHECKPOINT_FORMAT_VERSION, **payload}
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def load_checkpoint(path: str | os.PathLike) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version") if isinstance(payload, dict) else None
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint format version {version!r}, "
            f"expected {CHECKPOINT_FORMAT_VERSION}"
        )
    return payload
