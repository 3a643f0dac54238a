"""Train WiFiNet and the SVM on several seeds and print the comparison table.

    python3 scripts/seed_sweep.py --seeds 0 1 2 3 4 [--config configs/default.toml]
"""

import argparse
import dataclasses
import time

from wifiloc import pipeline
from wifiloc.dataset import spacing_stats_xy


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--predictors", nargs="+", default=["wifinet", "svm"])
    args = ap.parse_args()
    base = pipeline.load_config(args.config)
    cols = [f"{p}.{m}" for p in args.predictors for m in ("acc", "unk", "traj")]
    print("seed", *cols, "spacing", "secs", sep="\t")
    for seed in args.seeds:
        t0 = time.perf_counter()
        run = pipeline.run_experiment(dataclasses.replace(base, seed=seed), args.predictors, warmup=5)
        r = run.reports
        vals = []
        for p in args.predictors:
            vals += [r[p, "known"].accuracy, r[p, "unknown"].rmse_m, r[p, "trajectory"].rmse_m]
        spacing = spacing_stats_xy(run.env.train_positions).mean_m
        print(seed, *(f"{v:.3f}" for v in vals), f"{spacing:.2f}", f"{time.perf_counter() - t0:.0f}",
              sep="\t", flush=True)


if __name__ == "__main__":
    main()
