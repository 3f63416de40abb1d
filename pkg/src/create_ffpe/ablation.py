"""Four-arm loss ablation on a synthetic corpus: baseline, +CRCM, +WDGM, full."""

from __future__ import annotations

import json
import logging
import statistics
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .core import TrainConfig
from .data import CorpusManifest, read_labels, read_tile
from .evaluation import (
    FeatureSetStats, extract_features, extractor_id, fid, kid_x100, staining_preservation,
)
from .geometry import centercrop
from .trainer import train

log = logging.getLogger(__name__)

ARMS = {
    "baseline": {"crcm": 0.0, "wdgm": 0.0},
    "+CRCM": {"wdgm": 0.0},
    "+WDGM": {"crcm": 0.0},
    "full": {},
}
METRICS = ("fid_desk", "kid_x100", "staining_preservation")


@dataclass
class RunResult:
    arm: str
    seed: int
    weights: dict
    fid_desk: float | None = None
    kid_x100: float | None = None
    staining_preservation: float | None = None
    n_excluded: int | None = None
    error: str | None = None


@dataclass
class AblationReport:
    runs: list = field(default_factory=list)
    reference: dict = field(default_factory=dict)
    iterations: int = 0
    extractor_id: str = ""

    def median(self, arm: str, metric: str) -> float | None:
        vals = [getattr(r, metric) for r in self.runs if r.arm == arm and r.error is None]
        return statistics.median(vals) if vals else None

    @property
    def failed(self) -> bool:
        return any(r.error for r in self.runs)

    def table(self) -> str:
        """Markdown table, one row per arm, medians over seeds, plus the weights used."""
        lines = ["| arm | " + " | ".join(METRICS) + " | weights |", "|" + "---|" * (len(METRICS) + 2)]
        for arm in ARMS:
            if not any(r.arm == arm for r in self.runs):
                continue
            failed = any(r.error for r in self.runs if r.arm == arm)
            cells = []
            for m in METRICS:
                v = self.median(arm, m)
                cells.append("FAILED" if failed else ("-" if v is None else f"{v:.4f}"))
            weights = json.dumps(arm_weights(arm), sort_keys=True)
            lines.append(f"| {arm} | " + " | ".join(cells) + f" | {weights} |")
        for name, metrics in self.reference.items():
            cells = [f"{metrics[m]:.4f}" for m in METRICS]
            lines.append(f"| {name} | " + " | ".join(cells) + " | - |")
        return "\n".join(lines)

    def to_json(self) -> str:
        medians = {a: {m: self.median(a, m) for m in METRICS} for a in ARMS}
        return json.dumps({
            "iterations": self.iterations, "extractor_id": self.extractor_id,
            "medians": medians, "reference": self.reference,
            "runs": [asdict(r) for r in self.runs],
        }, indent=2)


def arm_weights(arm: str) -> dict:
    w = {"gan_G": 1.0, "patchNCE": 1.0, "crcm": 1.0, "wdgm": 1.0}
    w.update(ARMS[arm])
    return w


@dataclass
class EvalSet:
    fs: list
    labels: list
    ffpe: list


def load_eval_set(manifest: CorpusManifest, labels_path: str | Path, net_size: int,
                  split: str = "test") -> EvalSet:
    """Center crops (native 10x view) of FS and FFPE tiles of one split."""
    labels = read_labels(labels_path)
    root = manifest.root
    fs_entries = [e for e in manifest.entries if e.domain == "FS" and e.split == split]
    fs = [centercrop(read_tile(manifest.resolve(e)), net_size) for e in fs_entries]
    ffpe = [centercrop(read_tile(p), net_size) for p in manifest.select("FFPE", split)]
    missing = [e.path for e in fs_entries if e.path not in labels]
    if missing:
        raise KeyError(f"no labels in {labels_path} for {missing[:3]}... (root {root})")
    return EvalSet(fs, [labels[e.path] for e in fs_entries], ffpe)


def evaluate_outputs(outputs: Sequence[torch.Tensor], ev: EvalSet, extractor: str = "desk_cnn") -> dict:
    fake = extract_features(outputs, extractor)
    real = extract_features(ev.ffpe, extractor)
    eid = extractor_id(extractor)
    subset = min(100, len(fake), len(real))
    pres = staining_preservation(outputs, ev.labels)
    return {
        "fid_desk": fid(FeatureSetStats.from_features(fake, eid), FeatureSetStats.from_features(real, eid)),
        "kid_x100": kid_x100(fake, real, subset_size=subset, n_subsets=100),
        "staining_preservation": pres.accuracy,
        "n_excluded": pres.n_excluded,
    }


def generate(g, tiles: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    dtype = next(g.parameters()).dtype
    g.eval()
    with torch.no_grad():
        return [g(t.to(dtype).unsqueeze(0))[0].float() for t in tiles]


def run_ablation(cfg: TrainConfig, manifest: CorpusManifest, labels_path: str | Path,
                 out_dir: str | Path, seeds: Sequence[int] = (0, 1, 2),
                 iterations: int | None = None, arms: Sequence[str] = tuple(ARMS)) -> AblationReport:
    """Train every arm for every seed (shared seeds across arms) and evaluate on the test split.

    A failing run is recorded with its traceback and the remaining runs continue.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    iters = iterations or cfg.total_iterations
    ev = load_eval_set(manifest, labels_path, cfg.tile_size_net)
    report = AblationReport(iterations=iters, extractor_id=extractor_id("desk_cnn"))
    report.reference = {"identity (FS input)": evaluate_outputs(ev.fs, ev)}
    fs_train = manifest.select("FS", "train")
    ffpe_train = manifest.select("FFPE", "train")
    for seed in seeds:
        for arm in arms:
            weights = arm_weights(arm)
            run = RunResult(arm, seed, weights)
            arm_cfg = TrainConfig(**{**cfg.to_dict(), "seed": seed, "loss_weights": weights,
                                     "total_iterations": iters})
            run_dir = out / f"{arm.replace('+', 'plus_')}_seed{seed}"
            try:
                state = train(arm_cfg, fs_train, ffpe_train, run_dir)
                metrics = evaluate_outputs(generate(state.nets["G"], ev.fs), ev)
                for k, v in metrics.items():
                    setattr(run, k, v)
            except Exception:  # noqa: BLE001 - recorded as a failure marker
                run.error = traceback.format_exc()
                log.error("ablation run %s seed %d failed:\n%s", arm, seed, run.error)
            log.info("ablation %s seed %d: %s", arm, seed, asdict(run))
            report.runs.append(run)
            (out / "report.json").write_text(report.to_json())
    (out / "report.md").write_text(report.table() + "\n")
    return report
