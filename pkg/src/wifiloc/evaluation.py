"""Localisation metrics, per-sample latency and scaling benchmarks."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .dataset import Dataset
from .encoder import ApDirectory, FingerprintImage, encode_dataset

REPORT_SCHEMA_VERSION = 1
REALTIME_BUDGET_S = 0.250  # one WiFi scan at 4 Hz
INFO_BUDGET_S = 0.020
WARMUP_CALLS = 100
TIMING_BATCHES = 10

# published figures on real data, kept alongside synthetic results for reference only
REFERENCE_ROWS = [
    {"predictor": "wifinet", "protocol": "known", "accuracy": 0.9189, "rmse_m": 0.28},
    {"predictor": "svm", "protocol": "known", "accuracy": 0.8211, "rmse_m": 0.727},
    {"predictor": "wifinet", "protocol": "unknown", "mean_err_m": 3.5, "p75_m": 5.1},
    {"predictor": "svm", "protocol": "unknown", "mean_err_m": 4.0, "p75_m": 5.6},
    {"predictor": "wifinet", "protocol": "trajectory", "mean_err_m": 3.3, "p75_m": 5.0},
    {"predictor": "svm", "protocol": "trajectory", "mean_err_m": 4.3, "p75_m": 6.4},
]

METRICS_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "predictor", "protocol", "n_samples", "accuracy", "rmse_m",
                 "mean_err_m", "p50_m", "p75_m", "box", "latency"],
    "properties": {
        "schema_version": {"const": REPORT_SCHEMA_VERSION},
        "predictor": {"type": "string"},
        "protocol": {"type": "string"},
        "n_samples": {"type": "integer", "minimum": 1},
        "accuracy": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "rmse_m": {"type": "number", "minimum": 0},
        "mean_err_m": {"type": "number", "minimum": 0},
        "p50_m": {"type": "number", "minimum": 0},
        "p75_m": {"type": "number", "minimum": 0},
        "box": {
            "type": "object",
            "required": ["min", "q1", "median", "q3", "max", "whisker_lo", "whisker_hi", "outliers"],
            "properties": {
                "outliers": {"type": "array", "items": {"type": "number"}},
            },
        },
        "latency": {
            "type": "object",
            "required": ["mean_s", "p95_s", "realtime"],
            "properties": {
                "mean_s": {"type": "number", "minimum": 0},
                "p95_s": {"type": "number", "minimum": 0},
                "realtime": {"type": "boolean"},
            },
        },
    },
}


def percentile(errors: Iterable[float], q: float) -> float:
    """Linear interpolation between closest ranks: position (n - 1) * q / 100."""
    v = sorted(float(e) for e in errors)
    if not v:
        raise ValueError("percentile of an empty list")
    if not 0 <= q <= 100:
        raise ValueError(f"q must lie in [0, 100], got {q}")
    pos = (len(v) - 1) * q / 100.0
    lo = math.floor(pos)
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (pos - lo)


@dataclass
class BoxStats:
    min: float
    q1: float
    median: float
    q3: float
    max: float
    whisker_lo: float
    whisker_hi: float
    outliers: list[float]


def box_stats(errors: Sequence[float]) -> BoxStats:
    """Tukey box: whiskers reach the furthest points within 1.5 IQR of the box."""
    q1, med, q3 = (percentile(errors, q) for q in (25, 50, 75))
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = [e for e in errors if lo_fence <= e <= hi_fence]
    out = sorted(float(e) for e in errors if e < lo_fence or e > hi_fence)
    return BoxStats(float(min(errors)), q1, med, q3, float(max(errors)),
                    float(min(inside)), float(max(inside)), out)


@dataclass
class LatencyStats:
    mean_s: float  # median of per-batch means
    p95_s: float
    samples: list[float] = field(default_factory=list, repr=False)

    @property
    def realtime(self) -> bool:
        return self.mean_s < REALTIME_BUDGET_S


def summarize_latency(times: Sequence[float], batches: int = TIMING_BATCHES) -> LatencyStats:
    t = np.asarray(times, dtype=float)
    chunks = [c for c in np.array_split(t, min(batches, len(t))) if len(c)]
    return LatencyStats(float(np.median([c.mean() for c in chunks])), percentile(t, 95), list(map(float, t)))


def measure_latency(predict: Callable[[np.ndarray], object], images: Sequence[np.ndarray],
                    n_calls: int = 1000, warmup: int = WARMUP_CALLS) -> LatencyStats:
    """Time single-image predictions on a warm model (warm-up calls discarded)."""
    if not images:
        raise ValueError("no images to time")
    for i in range(warmup):
        predict(images[i % len(images)])
    times = []
    for i in range(n_calls):
        img = images[i % len(images)]
        t0 = time.perf_counter()
        predict(img)
        times.append(time.perf_counter() - t0)
    return summarize_latency(times)


def measure_latency_interleaved(cells: Sequence[tuple[Callable[[np.ndarray], object], Sequence[np.ndarray]]],
                                n_calls: int = 1000, warmup: int = WARMUP_CALLS,
                                batches: int = TIMING_BATCHES) -> list[LatencyStats]:
    """Time several predictors round-robin, one block of calls each per round.

    Machine-wide slowdowns then hit every cell alike, which keeps latency
    ratios between cells stable. Each block starts with a few discarded calls
    so the model is warm again after its neighbours ran.
    """
    if any(not images for _, images in cells):
        raise ValueError("no images to time")
    batches = max(1, min(batches, n_calls))
    block_warmup = max(1, warmup // batches)
    sizes = [len(c) for c in np.array_split(np.arange(n_calls), batches)]
    times: list[list[float]] = [[] for _ in cells]
    for predict, images in cells:
        for i in range(warmup):
            predict(images[i % len(images)])
    for size in sizes:
        for k, (predict, images) in enumerate(cells):
            for i in range(block_warmup):
                predict(images[i % len(images)])
            for i in range(size):
                img = images[(len(times[k]) + i) % len(images)]
                t0 = time.perf_counter()
                predict(img)
                times[k].append(time.perf_counter() - t0)
    return [summarize_latency(t, batches) for t in times]


@dataclass
class EvalReport:
    predictor: str
    protocol: str
    n_samples: int
    accuracy: Optional[float]
    rmse_m: float
    mean_err_m: float
    p50_m: float
    p75_m: float
    box: BoxStats
    latency: LatencyStats
    errors: list[float] = field(repr=False, default_factory=list)
    truth: list[tuple[float, float]] = field(repr=False, default_factory=list)
    predicted: list[tuple[float, float]] = field(repr=False, default_factory=list)

    def metrics(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "predictor": self.predictor,
            "protocol": self.protocol,
            "n_samples": self.n_samples,
            "accuracy": self.accuracy,
            "rmse_m": self.rmse_m,
            "mean_err_m": self.mean_err_m,
            "p50_m": self.p50_m,
            "p75_m": self.p75_m,
            "box": asdict(self.box),
            "latency": {"mean_s": self.latency.mean_s, "p95_s": self.latency.p95_s,
                        "realtime": self.latency.realtime},
        }


def error_stats(errors: Sequence[float]) -> dict:
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        raise ValueError("no errors to summarise")
    rmse = float(np.sqrt(np.mean(e ** 2)))
    mean = float(e.mean())
    assert mean <= rmse * (1 + 1e-12) + 1e-15, "mean error exceeds RMSE"
    return {"rmse_m": rmse, "mean_err_m": mean,
            "p50_m": percentile(e, 50), "p75_m": percentile(e, 75)}


_PROTOCOL = {"test-known": "known", "test-unknown": "unknown", "test-trajectory": "trajectory",
             "train": "train"}


def protocol_of(kind: str) -> str:
    return _PROTOCOL.get(kind, kind)


def evaluate(model, test: Dataset, directory: Optional[ApDirectory] = None,
             warmup: int = WARMUP_CALLS, name: Optional[str] = None) -> EvalReport:
    """Score ``model`` on ``test`` one sample at a time.

    ``model`` needs ``predict_label(img)`` and a ``class_table`` mapping labels to
    coordinates. Accuracy is only reported when every sample carries a label.
    """
    if not test.samples:
        raise ValueError("empty test set")
    directory = directory or model.directory
    images = encode_dataset(test, directory)
    for s in test.samples:
        if s.location is None:
            raise ValueError("test samples need ground-truth locations")
    for i in range(warmup):
        model.predict_label(images[i % len(images)])
    labels, times = [], []
    for img in images:
        t0 = time.perf_counter()
        labels.append(model.predict_label(img))
        times.append(time.perf_counter() - t0)
    predicted = [model.class_table[lab] for lab in labels]
    truth = [tuple(s.location) for s in test.samples]
    errors = [math.dist(p, t) for p, t in zip(predicted, truth)]
    has_labels = all(s.position_id is not None for s in test.samples)
    acc = None
    if has_labels:
        acc = float(np.mean([lab == s.position_id for lab, s in zip(labels, test.samples)]))
    st = error_stats(errors)
    return EvalReport(name or getattr(model, "name", type(model).__name__),
                      _PROTOCOL.get(test.kind, test.kind), len(errors), acc,
                      box=box_stats(errors), latency=summarize_latency(times),
                      errors=errors, truth=truth, predicted=predicted, **st)


class OraclePredictor:
    """Answers with the ground truth of the test set it was built from (pipeline checks)."""

    name = "oracle"

    def __init__(self, test: Dataset, directory: ApDirectory):
        self.directory = directory
        self.class_table: dict[int, tuple[float, float]] = {}
        self._lookup: dict[bytes, int] = {}
        for s, img in zip(test.samples, encode_dataset(test, directory)):
            key = img.pixels.tobytes()
            if key in self._lookup:
                continue
            lab = s.position_id if s.position_id is not None else -1 - len(self._lookup)
            self.class_table[lab] = tuple(s.location)
            self._lookup[key] = lab

    def predict_label(self, img) -> int:
        px = img.pixels if isinstance(img, FingerprintImage) else np.asarray(img, dtype=np.uint8)
        return self._lookup[px.tobytes()]


def report_to_files(report: EvalReport, prefix) -> dict[str, Path]:
    """Write <prefix>.metrics.json, <prefix>.samples.csv and <prefix>.box.csv."""
    if not report.errors:
        raise ValueError("report has no per-sample errors")
    prefix = str(prefix)
    paths = {k: Path(f"{prefix}.{k}") for k in ("metrics.json", "samples.csv", "box.csv")}
    paths["metrics.json"].write_text(json.dumps(report.metrics(), indent=1) + "\n", encoding="utf-8")
    with open(paths["samples.csv"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_idx", "true_x", "true_y", "pred_x", "pred_y", "error_m", "latency_s"])
        for i, ((tx, ty), (px, py), e, lat) in enumerate(
                zip(report.truth, report.predicted, report.errors, report.latency.samples)):
            w.writerow([i, repr(tx), repr(ty), repr(px), repr(py), repr(e), repr(lat)])
    b = report.box
    with open(paths["box.csv"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["predictor", "protocol", "min", "q1", "median", "q3", "max",
                    "whisker_lo", "whisker_hi", "n_outliers"])
        w.writerow([report.predictor, report.protocol, b.min, b.q1, b.median, b.q3, b.max,
                    b.whisker_lo, b.whisker_hi, len(b.outliers)])
    return paths


def load_metrics(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# scaling benchmark


@dataclass
class BenchRow:
    predictor: str
    n_ap: int
    n_pos: int
    n_train: int
    latency_mean_s: float
    latency_p95_s: float

    @property
    def realtime(self) -> bool:
        return self.latency_mean_s < REALTIME_BUDGET_S


BENCH_HEADER = ["predictor", "n_ap", "n_pos", "n_train", "latency_mean_s", "latency_p95_s",
                "realtime_250ms", "under_20ms"]


def scaling_benchmark(predictors: Sequence[str], ap_counts: Sequence[int], position_counts: Sequence[int],
                      seed: int = 0, scans_per_point: Sequence[int] = (10,), n_calls: int = 1000,
                      trainer: Optional[Callable] = None, env_overrides: Optional[Mapping] = None,
                      ) -> list[BenchRow]:
    """Per-sample latency for every (predictor, n_ap, n_pos, scans) cell.

    All cells are fitted first and then timed round-robin
    (:func:`measure_latency_interleaved`), so the rows compare fairly.

    Each cell gets its own synthetic environment; bounds grow with the number
    of positions so the spacing profile still fits. ``trainer(name, images,
    directory, class_table, seed)`` builds a fitted predictor (defaults to
    :func:`wifiloc.pipeline.train_predictor` with short WiFiNet training).
    """
    from . import synth
    from .encoder import build_directory, encode_dataset as enc
    from .pipeline import train_predictor

    if not predictors or not ap_counts or not position_counts or not scans_per_point:
        raise ValueError("empty benchmark grid")
    trainer = trainer or (lambda name, imgs, d, ct, s: train_predictor(name, imgs, d, ct, seed=s, epochs=1))
    cells, keys = [], []
    for n_ap in ap_counts:
        for n_pos in position_counts:
            side = 60.0 * math.sqrt(max(n_pos, 30) / 30.0)
            spec = synth.EnvironmentSpec(width=side, height=side, n_aps=n_ap, n_positions=n_pos,
                                         n_unknown=0, **dict(env_overrides or {}))
            env = synth.generate_environment(spec, seed)
            radio = synth.RadioModel()
            test = synth.generate_dataset(env, radio, "test-known", 2, seed=seed + 1)
            for spp in scans_per_point:
                train = synth.generate_dataset(env, radio, "train", spp, seed=seed)
                d = build_directory(train)
                imgs = enc(train, d)
                timg = [im.pixels for im in enc(test, d)]
                for name in predictors:
                    model = trainer(name, imgs, d, env.positions, seed)
                    cells.append((model.predict_label, timg))
                    keys.append((name, d.n_ap, n_pos, len(imgs)))
    lats = measure_latency_interleaved(cells, n_calls=n_calls)
    rows = [BenchRow(*key, lat.mean_s, lat.p95_s) for key, lat in zip(keys, lats)]
    rows.sort(key=lambda r: (r.predictor, r.n_ap, r.n_pos, r.n_train))
    return rows


def write_bench_csv(rows: Sequence[BenchRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_HEADER)
        for r in rows:
            w.writerow([r.predictor, r.n_ap, r.n_pos, r.n_train, f"{r.latency_mean_s:.9f}",
                        f"{r.latency_p95_s:.9f}", int(r.realtime), int(r.latency_mean_s < INFO_BUDGET_S)])
