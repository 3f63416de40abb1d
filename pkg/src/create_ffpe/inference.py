"""FS -> FFPE conversion with the main generator only, plus latency reporting."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .core import ConfigError, ImageTensor, TrainConfig, load_checkpoint, parse_config
from .data import read_tile, write_tile
from .geometry import centercrop
from .models import GeneratorSpec, ResnetGenerator, transfer

log = logging.getLogger(__name__)


def load_generator(ckpt: str | Path) -> ResnetGenerator:
    """Main generator from a checkpoint; other network segments are ignored."""
    payload = load_checkpoint(ckpt)
    cfg: TrainConfig = parse_config(payload["config"])
    if "G" not in payload.get("nets", {}):
        raise ConfigError(f"{ckpt}: checkpoint has no generator segment 'G'")
    g = ResnetGenerator(GeneratorSpec(cfg.gen_width, cfg.n_resblocks, cfg.downsample_levels, "tanh"))
    g.load_state_dict(payload["nets"]["G"])
    return g.to(cfg.dtype).eval()


def infer_single(model: ResnetGenerator | str | Path, img):
    g = model if isinstance(model, ResnetGenerator) else load_generator(model)
    dtype = next(g.parameters()).dtype
    x = img.data if isinstance(img, ImageTensor) else img
    with torch.no_grad():
        y = transfer(g, x.to(dtype))
    return img.replace(data=y) if isinstance(img, ImageTensor) else y


@dataclass
class TimingReport:
    n_images: int = 0
    mean_s: float | None = None
    p95_s: float | None = None
    warmup_s: float | None = None
    with_io_mean_s: float | None = None
    n_failed: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def infer_dir(ckpt: str | Path, in_dir: str | Path, out_dir: str | Path,
              tile_size: int | None = None) -> TimingReport:
    """Convert every PNG under ``in_dir`` (recursively), mirroring the layout in ``out_dir``.

    ``tile_size`` center-crops each tile before conversion (e.g. 224 for the
    native-magnification crop used in training). Timing excludes model load;
    the first image is a warmup reported separately and excluded from the
    statistics. Unreadable tiles are skipped with a warning.
    """
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    paths = sorted(in_dir.rglob("*.png"))
    report = TimingReport()
    if not paths:
        return report
    g = load_generator(ckpt)
    dtype = next(g.parameters()).dtype
    compute, total = [], []
    for path in paths:
        t0 = time.perf_counter()
        try:
            x = read_tile(path, dtype)
        except Exception as exc:  # noqa: BLE001 - any decode failure skips the tile
            log.warning("skipping unreadable tile %s: %s", path, exc)
            report.n_failed += 1
            continue
        if tile_size:
            x = centercrop(x, tile_size)
        t1 = time.perf_counter()
        with torch.no_grad():
            y = transfer(g, x)
        t2 = time.perf_counter()
        write_tile(y, out_dir / path.relative_to(in_dir))
        t3 = time.perf_counter()
        compute.append(t2 - t1)
        total.append(t3 - t0)
    report.n_images = len(compute)
    if not compute:
        return report
    report.warmup_s = compute[0]
    steady = compute[1:] or compute
    report.mean_s = float(np.mean(steady))
    report.p95_s = float(np.percentile(steady, 95))
    report.with_io_mean_s = float(np.mean(total[1:] or total))
    return report
