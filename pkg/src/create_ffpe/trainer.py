"""Optimization loop: alternating discriminator / generator updates with the
cross-resolution and wavelet consistency terms."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import torch
import torch.nn as nn

from .core import (
    LOSS_NAMES, ConfigError, LossReport, NumericError, TrainConfig, load_checkpoint, lr_at,
    parse_config, save_checkpoint, seed_all, serialize_config, torch_generator,
)
from .data import read_tile, sample_index, write_tile
from .geometry import centercrop, pair_tensors
from .losses import crcm_loss, gan_loss_d, gan_loss_g, generator_loss, patchnce_loss, wdgm_loss
from .models import FeatureStack, build_networks, init_identity_bias, transfer_bands
from .wavelet import dwt2, idwt2

log = logging.getLogger(__name__)

CSV_COLUMNS = ("iteration", "gan_D", "gan_G", "patchNCE", "crcm", "wdgm", "total_G", "lr")
NET_NAMES = ("G", "G_aux", "D", "heads")

__all__ = ["TrainState", "init_state", "train_step", "train", "init_identity_bias",
           "save_state", "load_state"]


@dataclass
class TrainState:
    config: TrainConfig
    nets: dict
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    iteration: int = 0

    @property
    def config_hash(self) -> str:
        return self.config.digest()


def _adam(params, cfg: TrainConfig):
    return torch.optim.Adam(params, lr=cfg.lr_initial, betas=(cfg.adam_beta1, cfg.adam_beta2))


def init_state(cfg: TrainConfig) -> TrainState:
    seed_all(cfg.seed, cfg.deterministic)
    nets = build_networks(cfg, torch_generator(cfg.seed, "init"))
    gen_params = [p for k in ("G", "G_aux", "heads") for p in nets[k].parameters()]
    return TrainState(cfg, nets, _adam(gen_params, cfg), _adam(nets["D"].parameters(), cfg))


def _set_lr(opt, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def _requires_grad(net: nn.Module, flag: bool) -> None:
    for p in net.parameters():
        p.requires_grad_(flag)


def _check_finite(**tensors) -> None:
    for name, t in tensors.items():
        if not torch.isfinite(t).all():
            raise NumericError(f"non-finite values in {name}")


def _batch(t: torch.Tensor, dtype) -> torch.Tensor:
    t = t.to(dtype)
    return t.unsqueeze(0) if t.ndim == 3 else t


def train_step(state: TrainState, fs_tile: torch.Tensor, ffpe_tile: torch.Tensor):
    """One D update followed by one generator-side update.

    ``fs_tile`` is a [3, 448, 448] source tile (or batch); ``ffpe_tile`` an
    unpaired real tile whose center crop serves as the real sample for D.
    Returns ``(state, LossReport)``; ``state`` is updated in place.
    """
    cfg = state.config
    nets = state.nets
    g, g_aux, d, heads = (nets[k] for k in NET_NAMES)
    w = cfg.loss_weights
    t = state.iteration
    lr = lr_at(t, cfg)
    _set_lr(state.opt_g, lr)
    _set_lr(state.opt_d, lr)

    fs = _batch(fs_tile, cfg.dtype)
    fs_10x, fs_5x = pair_tensors(fs, cfg.tile_size_net)
    real = _batch(ffpe_tile, cfg.dtype)
    if real.shape[-1] != cfg.tile_size_net:
        real = centercrop(real, cfg.tile_size_net)

    # Eqs. main / wide-field transfer and the frequency-split path. Terms with
    # zero weight are still evaluated for the report, without a graph.
    out_10x = g(fs_10x)
    with torch.set_grad_enabled(w["crcm"] > 0 or cfg.d_on_5x):
        out_5x = g(fs_5x)
    with torch.set_grad_enabled(w["wdgm"] > 0):
        wdgm_out = idwt2(transfer_bands(g, g_aux, dwt2(fs_10x)))
    _check_finite(out_10x=out_10x, out_5x=out_5x, wdgm_out=wdgm_out)

    # discriminator
    _requires_grad(d, True)
    state.opt_d.zero_grad(set_to_none=True)
    loss_d = gan_loss_d(d(real), d(out_10x.detach()), cfg.gan_mode)
    if cfg.d_on_5x:
        loss_d = 0.5 * (loss_d + gan_loss_d(d(real), d(out_5x.detach()), cfg.gan_mode))
    _check_finite(gan_D=loss_d)
    loss_d.backward()
    state.opt_d.step()

    # generator side
    _requires_grad(d, False)
    state.opt_g.zero_grad(set_to_none=True)
    loss_gan = gan_loss_g(d(out_10x), cfg.gan_mode)
    if cfg.d_on_5x:
        loss_gan = 0.5 * (loss_gan + gan_loss_g(d(out_5x), cfg.gan_mode))
    feats_src = g.encode(fs_10x, cfg.nce_layers)
    feats_out = g.encode(out_10x, cfg.nce_layers)
    loss_nce = patchnce_loss(
        FeatureStack(feats_src, tuple(cfg.nce_layers)), FeatureStack(feats_out, tuple(cfg.nce_layers)),
        heads, cfg.n_patches, cfg.nce_temperature, torch_generator(cfg.seed, "nce", t),
    )
    parts = {
        "gan_G": loss_gan,
        "patchNCE": loss_nce,
        "crcm": crcm_loss(out_5x, out_10x, cfg.compare_size),
        "wdgm": wdgm_loss(out_10x, wdgm_out),
    }
    _check_finite(**parts)
    total = generator_loss(parts, w)
    _check_finite(total_G=total)
    total.backward()
    state.opt_g.step()
    _requires_grad(d, True)

    state.iteration = t + 1
    values = {"gan_D": loss_d.item(), **{k: v.item() for k, v in parts.items()},
              "total_G": total.item(), "lr": lr}
    report = LossReport(t, values)
    report.check_total(w)
    return state, report


# --------------------------------------------------------------------------
# checkpoints


def save_state(state: TrainState, path: str | Path, nets: Sequence[str] = NET_NAMES) -> None:
    save_checkpoint(path, {
        "iteration": state.iteration,
        "config": serialize_config(state.config),
        "config_hash": state.config_hash,
        "nets": {k: state.nets[k].state_dict() for k in nets},
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
    })


def load_state(path: str | Path, cfg: TrainConfig | None = None) -> TrainState:
    """Restore a full training state; ``cfg`` (if given) must match the checkpoint's."""
    payload = load_checkpoint(path)
    saved = parse_config(payload["config"])
    if cfg is not None and cfg.digest() != payload["config_hash"]:
        raise ConfigError(f"{path}: config does not match the checkpoint's config hash")
    state = init_state(saved)
    missing = [k for k in NET_NAMES if k not in payload["nets"]]
    if missing:
        raise ConfigError(f"{path}: checkpoint lacks {missing}; cannot resume training")
    for k in NET_NAMES:
        state.nets[k].load_state_dict(payload["nets"][k])
    state.opt_g.load_state_dict(payload["opt_g"])
    state.opt_d.load_state_dict(payload["opt_d"])
    state.iteration = payload["iteration"]
    return state


# --------------------------------------------------------------------------
# loop

TileSource = Sequence  # paths or [3, H, W] tensors


def _fetch(source: TileSource, idx: int, dtype) -> torch.Tensor:
    item = source[idx]
    return item.to(dtype) if isinstance(item, torch.Tensor) else read_tile(item, dtype)


def _format_row(report: LossReport) -> list[str]:
    return [str(report.iteration)] + [repr(float(report.values[k])) for k in CSV_COLUMNS[1:]]


def _truncate_csv(path: Path, upto: int) -> None:
    """Keep only rows with iteration < upto (used when resuming)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) < upto]
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(keep)


def save_sample_grid(state: TrainState, fs_tile: torch.Tensor, path: Path) -> None:
    """Row of {FS 10x input, main output, wavelet-path output, 5x output}."""
    cfg = state.config
    g, g_aux = state.nets["G"], state.nets["G_aux"]
    with torch.no_grad():
        fs_10x, fs_5x = pair_tensors(_batch(fs_tile, cfg.dtype), cfg.tile_size_net)
        row = [fs_10x, g(fs_10x), idwt2(transfer_bands(g, g_aux, dwt2(fs_10x))), g(fs_5x)]
    write_tile(torch.cat([r[0] for r in row], dim=-1), path)


def train(
    cfg: TrainConfig,
    fs_tiles: TileSource,
    ffpe_tiles: TileSource,
    out_dir: str | Path,
    resume: str | Path | None = None,
    iterations: int | None = None,
    callback: Callable[[TrainState, LossReport], None] | None = None,
) -> TrainState:
    """Run (or continue) training until ``iterations`` (default: total_iterations).

    Tiles are drawn unpaired: the FS and FFPE streams walk independent seeded
    permutations, so the sample at step t depends only on (seed, t).
    Writes ``losses.csv``, ``config.txt``, ``checkpoint.pt`` and sample grids.
    """
    if not fs_tiles or not ffpe_tiles:
        raise ConfigError("training needs at least one FS and one FFPE tile")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stop = cfg.total_iterations if iterations is None else min(iterations, cfg.total_iterations)
    csv_path = out / "losses.csv"
    if resume:
        state = load_state(resume, cfg)
        if csv_path.exists():
            _truncate_csv(csv_path, state.iteration)
    else:
        state = init_state(cfg)
        with open(csv_path, "w", newline="") as fh:
            csv.writer(fh).writerow(CSV_COLUMNS)
    (out / "config.txt").write_text(serialize_config(cfg))

    with open(csv_path, "a", newline="") as fh:
        writer = csv.writer(fh)
        while state.iteration < stop:
            t = state.iteration
            fs = _fetch(fs_tiles, sample_index(len(fs_tiles), cfg.seed, t, "fs"), cfg.dtype)
            ffpe = _fetch(ffpe_tiles, sample_index(len(ffpe_tiles), cfg.seed, t, "ffpe"), cfg.dtype)
            _, report = train_step(state, fs, ffpe)
            writer.writerow(_format_row(report))
            if callback is not None:
                callback(state, report)
            step = state.iteration
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                fh.flush()
                save_state(state, out / "checkpoint.pt")
            if cfg.sample_every and step % cfg.sample_every == 0:
                save_sample_grid(state, fs, out / "samples" / f"step_{step:07d}.png")
            if step % 100 == 0:
                log.info("iter %d %s", step, {k: round(v, 4) for k, v in report.values.items()})
    save_state(state, out / "checkpoint.pt")
    return state
