"""Experiment configuration and the generate -> train -> eval -> bench stages."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import baselines, evaluation, nn, synth
from . import wifinet as wn
from .dataset import Dataset, parse_dataset, serialize_dataset
from .encoder import ApDirectory, build_directory, encode_dataset

log = logging.getLogger(__name__)

PREDICTORS = ("wifinet", "knn", "svm", "subknn")
PROTOCOLS = (("known", "test-known"), ("unknown", "test-unknown"), ("trajectory", "test-trajectory"))
DATA_FILES = {
    "train": "train.csv",
    "test-known": "test_known.csv",
    "test-unknown": "test_unknown.csv",
    "test-trajectory": "test_trajectory.csv",
}
ENV_FILE = "environment.json"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    scans_per_point: int = 50
    known_scans: int = 10
    unknown_scans: int = 1
    speed: float = 1.0
    interval: float = 1.0


@dataclass
class WiFiNetConfig:
    widths: tuple[int, ...] = wn.DEFAULT_WIDTHS
    kernel: int = 3
    residual: bool = False
    normalize: str = "zerocenter"
    init: str = "fan_in_uniform"


@dataclass
class SvmConfig:
    C: float = 1e-4  # calibrated for the synthetic environments (svm_train itself defaults to 1)
    epochs: int = 100


@dataclass
class SubKnnConfig:
    m: int = 30
    d: Optional[int] = None


@dataclass
class BenchConfig:
    predictors: tuple[str, ...] = PREDICTORS
    ap_counts: tuple[int, ...] = (113, 1024)
    position_counts: tuple[int, ...] = (30, 94)
    scans_per_point: tuple[int, ...] = (10,)
    n_calls: int = 1000
    epochs: int = 1


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    model: str = "wifinet"
    features: str = "raw"
    threads: Optional[int] = None
    environment: synth.EnvironmentSpec = field(default_factory=synth.EnvironmentSpec)
    radio: synth.RadioModel = field(default_factory=synth.RadioModel)
    data: DataConfig = field(default_factory=DataConfig)
    wifinet: WiFiNetConfig = field(default_factory=WiFiNetConfig)
    train: wn.TrainConfig = field(default_factory=wn.TrainConfig)
    svm: SvmConfig = field(default_factory=SvmConfig)
    subknn: SubKnnConfig = field(default_factory=SubKnnConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def validate(self) -> "ExperimentConfig":
        if self.model not in PREDICTORS:
            raise ConfigError(f"unknown model {self.model!r}; choose from {', '.join(PREDICTORS)}")
        if self.features not in baselines.FEATURE_MODES:
            raise ConfigError(f"unknown feature mode {self.features!r}")
        if self.wifinet.normalize not in wn.NORMALIZATIONS:
            raise ConfigError(f"unknown input normalisation {self.wifinet.normalize!r}")
        if self.wifinet.init not in nn.INITS:
            raise ConfigError(f"unknown weight init {self.wifinet.init!r}")
        if not isinstance(self.seed, int):
            raise ConfigError("seed must be an explicit integer")
        for name in self.bench.predictors:
            if name not in PREDICTORS:
                raise ConfigError(f"unknown bench predictor {name!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {
    "environment": synth.EnvironmentSpec,
    "radio": synth.RadioModel,
    "data": DataConfig,
    "wifinet": WiFiNetConfig,
    "train": wn.TrainConfig,
    "svm": SvmConfig,
    "subknn": SubKnnConfig,
    "bench": BenchConfig,
}


def _build(cls, values: Mapping[str, Any], where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {', '.join(sorted(unknown))}")
    vals = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**vals)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from None


def _read_toml(path: Path) -> dict:
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        return tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def config_from_dict(raw: Mapping[str, Any], base_dir: Path = Path(".")) -> ExperimentConfig:
    raw = dict(raw)
    kwargs: dict[str, Any] = {}
    env = raw.pop("environment", None)
    if isinstance(env, str):
        # environment spec kept in its own file, relative to the config
        env_path = (base_dir / env) if not Path(env).is_absolute() else Path(env)
        env = _read_toml(env_path).get("environment", _read_toml(env_path))
    if env is not None:
        kwargs["environment"] = _build(synth.EnvironmentSpec, env, "environment")
    for name, cls in _SECTIONS.items():
        if name in raw:
            kwargs[name] = _build(cls, raw.pop(name), name)
    top = {f.name for f in fields(ExperimentConfig)} - set(_SECTIONS)
    unknown = set(raw) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(sorted(unknown))}")
    kwargs.update(raw)
    return ExperimentConfig(**kwargs).validate()


def load_config(path: Optional[str | Path] = None, **overrides) -> ExperimentConfig:
    """Read a TOML config; non-None keyword overrides win over the file."""
    raw: dict = {}
    base = Path(".")
    if path is not None:
        p = Path(path)
        raw = _read_toml(p)
        base = p.parent
    cfg = config_from_dict(raw, base)
    top = {k: v for k, v in overrides.items() if v is not None}
    if top:
        cfg = replace(cfg, **top).validate()
    return cfg


# --------------------------------------------------------------------------
# stages


def make_datasets(cfg: ExperimentConfig) -> tuple[synth.Environment, dict[str, Dataset]]:
    env = synth.generate_environment(cfg.environment, cfg.seed)
    d = cfg.data
    sets = {
        "train": synth.generate_dataset(env, cfg.radio, "train", d.scans_per_point, seed=cfg.seed),
        "test-known": synth.generate_dataset(env, cfg.radio, "test-known", d.known_scans, seed=cfg.seed),
        "test-unknown": synth.generate_dataset(env, cfg.radio, "test-unknown", d.unknown_scans, seed=cfg.seed),
        "test-trajectory": synth.generate_trajectory_dataset(
            env, cfg.radio, env.default_trajectory(d.speed, d.interval), seed=cfg.seed),
    }
    return env, sets


def generate(cfg: ExperimentConfig, out: Optional[Path] = None) -> dict[str, Path]:
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    env, sets = make_datasets(cfg)
    paths = {}
    for kind, ds in sets.items():
        paths[kind] = out / DATA_FILES[kind]
        serialize_dataset(ds, paths[kind])
    paths["environment"] = out / ENV_FILE
    env.save(paths["environment"])
    return paths


def train_predictor(name: str, images, directory: ApDirectory, class_table, seed: int = 0,
                    cfg: Optional[ExperimentConfig] = None, epochs: Optional[int] = None):
    """Fit one predictor; returns (model) and stores the WiFiNet loss curve on it."""
    cfg = cfg or ExperimentConfig()
    if name == "wifinet":
        w = cfg.wifinet
        model = wn.build_wifinet(directory.side, len(class_table), w.widths, seed,
                                 kernel=w.kernel, residual=w.residual, normalize=w.normalize,
                                 init=w.init)
        tcfg = replace(cfg.train, seed=seed, epochs=epochs or cfg.train.epochs)
        result = wn.train(model, images, tcfg, class_table=class_table, directory=directory)
        model.loss_curve = result.losses
        model.train_config = tcfg
        return model
    kw = dict(directory=directory, class_table=class_table, features=cfg.features)
    if name == "knn":
        return baselines.knn_train(images, **kw)
    if name == "svm":
        return baselines.svm_train(images, C=cfg.svm.C, epochs=cfg.svm.epochs, seed=seed, **kw)
    if name == "subknn":
        return baselines.subknn_train(images, m=cfg.subknn.m, d=cfg.subknn.d, seed=seed, **kw)
    raise ConfigError(f"unknown model {name!r}")


def save_predictor(model, path) -> None:
    if isinstance(model, wn.WiFiNet):
        wn.save(model, path, getattr(model, "train_config", None))
    else:
        baselines.save(model, path)


def load_predictor(path):
    header, arrays = nn.read_checkpoint(path)
    if header.get("model") == "wifinet":
        return wn.from_checkpoint(header, arrays)
    return baselines.from_checkpoint(header, arrays)


def write_loss_curve(losses: Sequence[float], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(losses, start=1):
            w.writerow([i, repr(float(v))])


def train_stage(cfg: ExperimentConfig, data_dir: Path, out: Path, name: Optional[str] = None) -> Path:
    name = name or cfg.model
    train = parse_dataset(Path(data_dir) / DATA_FILES["train"], "train")
    directory = build_directory(train)
    images = encode_dataset(train, directory)
    model = train_predictor(name, images, directory, dict(train.positions), cfg.seed, cfg)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / f"{name}.ckpt"
    save_predictor(model, ckpt)
    if name == "wifinet":
        write_loss_curve(model.loss_curve, out / f"{name}.loss.csv")
    return ckpt


def eval_stage(model, test: Dataset, prefix: Path, name: Optional[str] = None) -> evaluation.EvalReport:
    if model.directory is None:
        raise ConfigError("checkpoint carries no AP directory")
    report = evaluation.evaluate(model, test, model.directory, name=name)
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    evaluation.report_to_files(report, prefix)
    return report


@dataclass
class SeedRun:
    env: synth.Environment
    models: dict
    reports: dict  # (predictor, protocol) -> EvalReport


def run_experiment(cfg: ExperimentConfig, predictors: Sequence[str] = PREDICTORS,
                   warmup: int = evaluation.WARMUP_CALLS) -> SeedRun:
    """In-memory generate/train/evaluate for one seed (no files written)."""
    env, sets = make_datasets(cfg)
    train = sets["train"]
    directory = build_directory(train)
    images = encode_dataset(train, directory)
    models, reports = {}, {}
    for name in predictors:
        models[name] = model = train_predictor(name, images, directory, dict(train.positions), cfg.seed, cfg)
        for proto, kind in PROTOCOLS:
            reports[name, proto] = evaluation.evaluate(model, sets[kind], directory, name=name, warmup=warmup)
    return SeedRun(env, models, reports)


SUMMARY_HEADER = ["predictor", "protocol", "n_samples", "accuracy", "rmse_m", "mean_err_m", "p75_m"]


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else f"{v:.6f}"


def write_summary(reports: Sequence[evaluation.EvalReport], out: Path) -> None:
    """Deterministic result tables (no timings): summary.csv and summary.md."""
    rows = [[r.predictor, r.protocol, str(r.n_samples), _fmt(r.accuracy), _fmt(r.rmse_m),
             _fmt(r.mean_err_m), _fmt(r.p75_m)] for r in reports]
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        w.writerows(rows)
    md = []
    for title, proto, cols in (
        ("Known positions", "known", ("accuracy", "rmse_m")),
        ("Unknown positions", "unknown", ("mean_err_m", "rmse_m", "p75_m")),
        ("Trajectory", "trajectory", ("mean_err_m", "rmse_m", "p75_m")),
    ):
        md.append(f"## {title}\n")
        md.append("| predictor | " + " | ".join(cols) + " |")
        md.append("|---" * (len(cols) + 1) + "|")
        for r in reports:
            if r.protocol == proto:
                md.append(f"| {r.predictor} | " + " | ".join(_fmt(getattr(r, c)) for c in cols) + " |")
        refs = [x for x in evaluation.REFERENCE_ROWS if x["protocol"] == proto]
        for x in refs:
            md.append(f"| {x['predictor']} (real-data reference) | "
                      + " | ".join(_fmt(x.get(c)) for c in cols) + " |")
        md.append("")
    (out / "summary.md").write_text("\n".join(md), encoding="utf-8")


def write_timing(reports: Sequence[evaluation.EvalReport], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["predictor", "protocol", "latency_mean_s", "latency_p95_s", "realtime_250ms"])
        for r in reports:
            w.writerow([r.predictor, r.protocol, f"{r.latency.mean_s:.9f}", f"{r.latency.p95_s:.9f}",
                        int(r.latency.realtime)])


def bench_stage(cfg: ExperimentConfig, out: Path) -> Path:
    b = cfg.bench
    rows = evaluation.scaling_benchmark(
        b.predictors, b.ap_counts, b.position_counts, seed=cfg.seed,
        scans_per_point=b.scans_per_point, n_calls=b.n_calls,
        trainer=lambda name, imgs, d, ct, s: train_predictor(name, imgs, d, ct, s, cfg, epochs=b.epochs))
    out.mkdir(parents=True, exist_ok=True)
    path = out / "bench.csv"
    evaluation.write_bench_csv(rows, path)
    return path


def repro(cfg: ExperimentConfig, out: Optional[Path] = None, bench: bool = True) -> list[evaluation.EvalReport]:
    """generate -> train all predictors -> evaluate the three protocols -> bench."""
    out = Path(out or cfg.out)
    t0 = time.perf_counter()
    data_dir = out / "data"
    generate(cfg, data_dir)
    log.info("datasets written to %s", data_dir)
    tests = {kind: parse_dataset(data_dir / DATA_FILES[kind], kind) for _, kind in PROTOCOLS}
    reports = []
    for name in PREDICTORS:
        ckpt = train_stage(cfg, data_dir, out / "models", name)
        model = load_predictor(ckpt)
        log.info("trained %s", name)
        for proto, kind in PROTOCOLS:
            reports.append(eval_stage(model, tests[kind], out / "reports" / f"{name}.{proto}", name))
    write_summary(reports, out)
    write_timing(reports, out / "timing.csv")
    if bench:
        bench_stage(cfg, out)
    # run location and thread cap do not affect results, so they stay out of the record
    record = {k: v for k, v in cfg.to_dict().items() if k not in ("out", "threads")}
    (out / "config.json").write_text(json.dumps(record, indent=1, default=list) + "\n", encoding="utf-8")
    log.info("repro finished in %.1f s", time.perf_counter() - t0)
    return reports
