"""Print the latency scaling grid as a table (single BLAS thread).

    python3 scripts/bench_table.py --aps 113 1024 --positions 30 94 --scans 10
"""

import argparse

from threadpoolctl import threadpool_limits

from wifiloc import evaluation


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--predictors", nargs="+", default=["wifinet", "knn", "svm", "subknn"])
    ap.add_argument("--aps", type=int, nargs="+", default=[113, 1024])
    ap.add_argument("--positions", type=int, nargs="+", default=[30, 94])
    ap.add_argument("--scans", type=int, nargs="+", default=[10])
    ap.add_argument("--calls", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    with threadpool_limits(1):
        rows = evaluation.scaling_benchmark(args.predictors, args.aps, args.positions, seed=args.seed,
                                            scans_per_point=args.scans, n_calls=args.calls)
    print(f"{'predictor':<9} {'n_ap':>5} {'n_pos':>5} {'n_train':>7} {'mean ms':>9} {'p95 ms':>9}")
    for r in rows:
        print(f"{r.predictor:<9} {r.n_ap:>5} {r.n_pos:>5} {r.n_train:>7} "
              f"{r.latency_mean_s * 1e3:>9.3f} {r.latency_p95_s * 1e3:>9.3f}")


if __name__ == "__main__":
    main()
