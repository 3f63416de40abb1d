"""Command-line entry point: ``create-ffpe {synth,train,infer,eval,wavelet,ablate}``.

Exit codes: 0 success, 2 configuration error, 3 data integrity error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .core import (
    ConfigError, DataFormatError, IntegrityError, NumericError, TrainConfig, load_config,
    serialize_config,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("create_ffpe")


def _resolved_config(args) -> TrainConfig:
    base = TrainConfig.desk() if getattr(args, "desk", False) else TrainConfig()
    cfg = load_config(args.config, base) if getattr(args, "config", None) else base
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.deterministic:
        overrides["deterministic"] = True
    if args.precision is not None:
        overrides["precision"] = args.precision
    return TrainConfig(**{**cfg.to_dict(), **overrides}) if overrides else cfg


def _print_args(args) -> None:
    for k, v in sorted(vars(args).items()):
        if k != "func":
            print(f"{k} = {v}")


def cmd_synth(args) -> int:
    from .data import SynthSpec, synthesize_corpus

    spec = SynthSpec(
        n_train=args.n_train, n_test=args.n_test, seed=args.seed or 0,
        positive_fraction=args.positive_fraction, blur_sigma=args.blur_sigma,
        stain_attenuation=args.stain_attenuation, contamination_blob_rate=args.contamination,
        shared_patients=args.shared_patients,
    )
    print(json.dumps(spec.__dict__, default=list))
    manifest = synthesize_corpus(spec, args.out)
    print(f"wrote {len(manifest.entries)} tiles to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import load_manifest
    from .trainer import train

    cfg = _resolved_config(args)
    print(serialize_config(cfg), end="")
    manifest = load_manifest(args.data)
    fs, ffpe = manifest.select("FS", "train"), manifest.select("FFPE", "train")
    state = train(cfg, fs, ffpe, args.out, resume=args.resume, iterations=args.iterations)
    print(f"finished at iteration {state.iteration}; checkpoint in {args.out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .inference import infer_dir

    report = infer_dir(args.ckpt, args.in_dir, args.out, tile_size=args.tile_size)
    text = report.to_json()
    print(text)
    if args.report:
        Path(args.report).write_text(text + "\n")
    if report.n_images == 0 and report.n_failed > 0:
        return EXIT_DATA
    return EXIT_OK


def _load_dir(path: Path, tile_size: int | None) -> list[torch.Tensor]:
    from .data import read_tile
    from .geometry import centercrop

    tiles = []
    for p in sorted(Path(path).rglob("*.png")):
        t = read_tile(p, torch.float64)
        if tile_size and t.shape[-1] > tile_size:
            t = centercrop(t, tile_size)
        tiles.append(t)
    return tiles


def cmd_eval(args) -> int:
    from .evaluation import FeatureSetStats, extract_features, extractor_id, fid, kid_x100

    real = _load_dir(args.real, args.tile_size)
    fake = _load_dir(args.fake, args.tile_size)
    if len(real) < 2 or len(fake) < 2:
        raise ConfigError(f"need at least 2 images per side, got real={len(real)} fake={len(fake)}")
    warnings = []
    if args.extractor == "desk_cnn":
        warnings.append("desk_cnn features: values are not comparable with published FID/KID numbers")
    fr = extract_features(real, args.extractor)
    ff = extract_features(fake, args.extractor)
    eid = extractor_id(args.extractor)
    subset = min(args.kid_subset_size, len(fr), len(ff))
    if subset < args.kid_subset_size:
        warnings.append(f"KID subset size reduced to {subset}")
    metrics = {
        "fid": fid(FeatureSetStats.from_features(ff, eid), FeatureSetStats.from_features(fr, eid)),
        "kid_x100": kid_x100(ff, fr, subset_size=subset, n_subsets=args.kid_subsets, seed=args.seed or 0),
        "n_real": len(real), "n_fake": len(fake), "extractor_id": eid, "warnings": warnings,
    }
    text = json.dumps(metrics, indent=2)
    print(text)
    if args.report:
        Path(args.report).write_text(text + "\n")
    return EXIT_OK


def cmd_wavelet(args) -> int:
    from .wavelet import decompose_png, recompose_png

    if args.action == "decompose":
        decompose_png(args.src, args.out)
    else:
        recompose_png(args.src, args.out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import run_ablation
    from .data import LABELS_NAME, load_manifest

    cfg = _resolved_config(args)
    print(serialize_config(cfg), end="")
    manifest = load_manifest(args.data)
    labels = args.labels or Path(args.data).parent / LABELS_NAME
    report = run_ablation(cfg, manifest, labels, args.out, seeds=args.seeds, iterations=args.iterations)
    print(report.table())
    return EXIT_NUMERIC if report.failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--deterministic", action="store_true")
    common.add_argument("--precision", type=int, choices=(32, 64), default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="create-ffpe", parents=[common],
                                description="FS-to-FFPE stain transfer with cross-resolution and wavelet guidance")
    sub = p.add_subparsers(dest="command", metavar="{synth,train,infer,eval,wavelet,ablate}")

    s = sub.add_parser("synth", parents=[common], help="render a synthetic FS/FFPE corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n-train", type=int, default=1000, help="tiles per domain in the train split")
    s.add_argument("--n-test", type=int, default=200, help="tiles per domain in the test split")
    s.add_argument("--positive-fraction", type=float, default=0.5)
    s.add_argument("--blur-sigma", type=float, default=1.5)
    s.add_argument("--stain-attenuation", type=float, default=0.7)
    s.add_argument("--contamination", type=float, default=2.0, help="mean contamination blobs per FS tile")
    s.add_argument("--shared-patients", action="store_true")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--config")
    t.add_argument("--data", required=True, help="manifest.csv")
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--iterations", type=int, help="stop early at this iteration")
    t.add_argument("--desk", action="store_true", help="start from the desk-scale defaults")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", parents=[common], help="convert a directory of FS tiles")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--in", dest="in_dir", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--report")
    i.add_argument("--tile-size", type=int, default=None)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", parents=[common], help="FID / KID x100 between two tile directories")
    e.add_argument("--real", required=True)
    e.add_argument("--fake", required=True)
    e.add_argument("--extractor", choices=("desk_cnn", "reference"), default="desk_cnn")
    e.add_argument("--report")
    e.add_argument("--tile-size", type=int, default=None, help="center-crop larger tiles to this size")
    e.add_argument("--kid-subset-size", type=int, default=100)
    e.add_argument("--kid-subsets", type=int, default=100)
    e.set_defaults(func=cmd_eval)

    w = sub.add_parser("wavelet", parents=[common], help="Haar band decomposition of a PNG")
    w.add_argument("action", choices=("decompose", "recompose"))
    w.add_argument("src", help="input PNG (decompose) or band directory (recompose)")
    w.add_argument("--out", required=True, help="band directory (decompose) or output PNG (recompose)")
    w.set_defaults(func=cmd_wavelet)

    a = sub.add_parser("ablate", parents=[common], help="four-arm loss ablation")
    a.add_argument("--config")
    a.add_argument("--data", required=True, help="manifest.csv of a synthetic corpus")
    a.add_argument("--labels", help="labels.csv (default: next to the manifest)")
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    a.add_argument("--iterations", type=int, default=None)
    a.add_argument("--desk", action="store_true", default=True, help=argparse.SUPPRESS)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    _print_args(args)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IntegrityError, DataFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entry() -> None:
    sys.exit(main())
