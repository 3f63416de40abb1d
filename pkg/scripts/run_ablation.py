"""Desk-scale four-arm ablation on the default synthetic corpus.

    python3 scripts/run_ablation.py --corpus ~/.cache/create_ffpe/corpus --out runs/ablation

Renders the corpus first if it is missing. Prints the per-arm table and the
ordering checks used by the acceptance suite.
"""

import argparse
import logging
from pathlib import Path

from create_ffpe.ablation import run_ablation
from create_ffpe.core import TrainConfig
from create_ffpe.data import LABELS_NAME, MANIFEST_NAME, SynthSpec, load_manifest, synthesize_corpus


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--corpus", type=Path, default=Path.home() / ".cache" / "create_ffpe" / "corpus")
    p.add_argument("--out", type=Path, default=Path("runs/ablation"))
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--arms", nargs="+", default=None)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    if not (args.corpus / MANIFEST_NAME).exists():
        synthesize_corpus(SynthSpec(), args.corpus)
    manifest = load_manifest(args.corpus / MANIFEST_NAME)
    kw = {"arms": args.arms} if args.arms else {}
    report = run_ablation(TrainConfig.desk(), manifest, args.corpus / LABELS_NAME, args.out,
                          seeds=args.seeds, iterations=args.iterations, **kw)
    print(report.table())
    sp = {a: report.median(a, "staining_preservation") for a in ("baseline", "+WDGM", "full")}
    fd = {a: report.median(a, "fid_desk") for a in ("baseline", "full")}
    if None not in sp.values() and None not in fd.values():
        print(f"staining(full) >= staining(+WDGM): {sp['full'] >= sp['+WDGM']}")
        print(f"staining(full) >= staining(baseline): {sp['full'] >= sp['baseline']}")
        print(f"FID_desk(full) < FID_desk(baseline): {fd['full'] < fd['baseline']}")


if __name__ == "__main__":
    main()
