"""Command-line entry point: ``wifiloc {generate,train,eval,bench,repro}``.

Settings come from a TOML config (``--config``); flags override it. Failures
exit non-zero after printing one JSON line ``{"error": ..., "message": ...}``
to stderr. Set ``NO_COLOR`` or ``WIFILOC_PLAIN`` for undecorated logs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import evaluation, pipeline
from .dataset import DatasetError, parse_dataset
from .nn import CheckpointError

log = logging.getLogger("wifiloc")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class CliError(RuntimeError):
    pass


def plain_output() -> bool:
    return bool(os.environ.get("NO_COLOR") or os.environ.get("WIFILOC_PLAIN")) or not sys.stderr.isatty()


def _setup_logging(verbose: bool) -> None:
    fmt = "%(levelname)s %(message)s" if plain_output() else "\x1b[2m%(asctime)s\x1b[0m %(levelname)s %(message)s"
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format=fmt, stream=sys.stderr,
                        force=True)


def _thread_limit(n: Optional[int]):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _config(args) -> pipeline.ExperimentConfig:
    return pipeline.load_config(args.config, seed=args.seed, out=args.out,
                                model=getattr(args, "model", None), threads=args.threads)


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def cmd_generate(args) -> int:
    cfg = _config(args)
    paths = pipeline.generate(cfg, Path(cfg.out))
    _emit({"command": "generate", "files": {k: str(v) for k, v in paths.items()}})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.epochs is not None:
        cfg.train = replace(cfg.train, epochs=args.epochs)
    data = Path(args.data or cfg.out)
    if not (data / pipeline.DATA_FILES["train"]).is_file():
        raise CliError(f"no training set under {data}; run `wifiloc generate` first")
    with _thread_limit(cfg.threads):
        ckpt = pipeline.train_stage(cfg, data, Path(cfg.out), cfg.model)
    _emit({"command": "train", "model": cfg.model, "checkpoint": str(ckpt)})
    return EXIT_OK


def _check_overlap(model, test) -> None:
    order = set(model.directory.order)
    seen = {ap for s in test.samples for ap in s.readings}
    if seen and not seen & order:
        raise CliError("test set shares no access points with the checkpoint's AP directory")


def cmd_eval(args) -> int:
    cfg = _config(args)
    test = parse_dataset(args.testset, args.kind)
    if args.oracle:
        from .encoder import ApDirectory
        order = dict.fromkeys(ap for smp in test.samples for ap in smp.readings)
        model = evaluation.OraclePredictor(test, ApDirectory(tuple(order)))
        name = "oracle"
    else:
        if not args.checkpoint:
            raise CliError("--checkpoint is required unless --oracle is given")
        model = pipeline.load_predictor(args.checkpoint)
        _check_overlap(model, test)
        name = getattr(model, "name", None)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    prefix = out / f"{name}.{evaluation.protocol_of(test.kind)}"
    with _thread_limit(cfg.threads):
        report = pipeline.eval_stage(model, test, prefix, name)
    _emit({"command": "eval", "metrics": report.metrics(), "prefix": str(prefix)})
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config(args)
    # timings are single-threaded regardless of --threads
    with _thread_limit(1):
        path = pipeline.bench_stage(cfg, Path(cfg.out))
    _emit({"command": "bench", "csv": str(path)})
    return EXIT_OK


def cmd_repro(args) -> int:
    cfg = _config(args)
    with _thread_limit(1 if cfg.threads is None else cfg.threads):
        reports = pipeline.repro(cfg, Path(cfg.out), bench=not args.no_bench)
    _emit({"command": "repro", "rows": len(reports), "summary": str(Path(cfg.out) / "summary.csv")})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wifiloc", description="WiFi fingerprint-image localisation experiments.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="BLAS thread cap (benchmarks always use 1)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write synthetic datasets + environment JSON")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="train one predictor")
    t.add_argument("--model", help="one of: " + ", ".join(pipeline.PREDICTORS))
    t.add_argument("--data", help="directory holding train.csv (default: --out)")
    t.add_argument("--epochs", type=int, help="override WiFiNet epochs")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a test set")
    e.add_argument("--checkpoint")
    e.add_argument("--testset", required=True)
    e.add_argument("--kind", choices=("test-known", "test-unknown", "test-trajectory"), required=True)
    e.add_argument("--oracle", action="store_true", help="score a predictor that knows the true labels")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", parents=[common], help="latency scaling benchmark")
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("repro", parents=[common], help="generate, train all, evaluate all, bench")
    r.add_argument("--no-bench", action="store_true")
    r.set_defaults(func=cmd_repro)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except (pipeline.ConfigError, CliError, DatasetError, CheckpointError, FileNotFoundError,
            ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}),
              file=sys.stderr)
        return EXIT_USAGE if isinstance(exc, pipeline.ConfigError) else EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
