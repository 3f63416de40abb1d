"""Short desk-scale training run on in-memory synthetic tiles; prints the
loss trace every 25 steps and writes a sample grid.

    python3 scripts/smoke_train.py --steps 200 --out runs/smoke
"""

import argparse
from pathlib import Path

import numpy as np

from create_ffpe.core import TrainConfig, pixels_to_tensor
from create_ffpe.data import SynthSpec, _render_content, render_ffpe, render_fs
from create_ffpe.trainer import save_sample_grid, train


def tiles(n, seed):
    spec = SynthSpec()
    fs, ffpe = [], []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        positive = bool(rng.random() < 0.5)
        fs.append(pixels_to_tensor(render_fs(rng, _render_content(rng, spec, positive), spec, positive)))
        ffpe.append(pixels_to_tensor(render_ffpe(_render_content(rng, spec, positive))))
    return fs, ffpe


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--tiles", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("runs/smoke"))
    args = p.parse_args()

    fs, ffpe = tiles(args.tiles, args.seed)
    cfg = TrainConfig.desk(seed=args.seed, total_iterations=args.steps)

    def show(state, report):
        if report.iteration % 25 == 0:
            print(report.iteration, {k: round(v, 4) for k, v in report.values.items()})

    state = train(cfg, fs, ffpe, args.out, callback=show)
    save_sample_grid(state, fs[0], args.out / "final_grid.png")
    print(f"wrote {args.out / 'losses.csv'} and {args.out / 'final_grid.png'}")


if __name__ == "__main__":
    main()
