"""RSS scan data model, CSV ingestion/serialization and position statistics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np

RSS_MIN = -99
RSS_MAX = -30

KINDS = ("train", "test-known", "test-unknown", "test-trajectory")
HEADER = ["timestamp", "position_id", "x", "y", "readings"]


class DatasetError(ValueError):
    """Raised for malformed scans, datasets or dataset files."""


@dataclass(frozen=True)
class RssSample:
    """One WiFi scan: AP id -> RSS in dBm, plus optional ground truth."""

    readings: Mapping[str, int]
    position_id: Optional[int] = None
    location: Optional[tuple[float, float]] = None
    timestamp: Optional[float] = None

    def __post_init__(self):
        if not self.readings:
            raise DatasetError("a scan must contain at least one reading")
        for ap, rss in self.readings.items():
            if not isinstance(rss, (int, np.integer)) or isinstance(rss, bool):
                raise DatasetError(f"RSS of {ap!r} must be an integer dBm, got {rss!r}")
            if not RSS_MIN <= rss <= RSS_MAX:
                raise DatasetError(f"RSS of {ap!r} = {rss} outside [{RSS_MIN}, {RSS_MAX}] dBm")
        if self.position_id is not None:
            if self.position_id < 0:
                raise DatasetError(f"negative position_id {self.position_id}")
            if self.location is None:
                raise DatasetError("labelled scans must carry a location")


@dataclass(frozen=True)
class Dataset:
    samples: tuple[RssSample, ...]
    positions: Mapping[int, tuple[float, float]] = field(default_factory=dict)
    kind: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if self.kind not in KINDS:
            raise DatasetError(f"unknown dataset kind {self.kind!r}")
        coords = [tuple(map(float, xy)) for xy in self.positions.values()]
        if len(set(coords)) != len(coords):
            raise DatasetError("two positions share the same coordinates")
        if self.kind in ("train", "test-known"):
            for i, s in enumerate(self.samples):
                if s.position_id is None:
                    raise DatasetError(f"sample {i} of a {self.kind} dataset has no position_id")
                if s.position_id not in self.positions:
                    raise DatasetError(f"sample {i} references unknown position {s.position_id}")
        if self.kind == "test-trajectory":
            prev = -math.inf
            for i, s in enumerate(self.samples):
                if s.timestamp is None or s.location is None:
                    raise DatasetError(f"trajectory sample {i} needs a timestamp and a location")
                if s.timestamp < prev:
                    raise DatasetError(f"trajectory sample {i} is out of time order")
                prev = s.timestamp

    def __len__(self):
        return len(self.samples)

    @property
    def labels(self) -> list[Optional[int]]:
        return [s.position_id for s in self.samples]


@dataclass(frozen=True)
class SpacingStats:
    min_m: float
    mean_m: float
    max_m: float


def _fmt_float(v: Optional[float]) -> str:
    return "" if v is None else repr(float(v))


def _format_readings(readings: Mapping[str, int]) -> str:
    return ";".join(f"{ap}:{int(rss)}" for ap, rss in readings.items())


def _parse_readings(text: str, lineno: int) -> dict[str, int]:
    readings: dict[str, int] = {}
    for chunk in text.split(";"):
        ap, sep, rss_txt = chunk.rpartition(":")
        if not sep or not ap:
            raise DatasetError(f"line {lineno}: malformed reading {chunk!r}")
        try:
            rss = int(rss_txt)
        except ValueError:
            raise DatasetError(f"line {lineno}: RSS {rss_txt!r} is not an integer") from None
        if not RSS_MIN <= rss <= RSS_MAX:
            raise DatasetError(f"line {lineno}: RSS {rss} outside [{RSS_MIN}, {RSS_MAX}] dBm")
        if ap in readings:
            raise DatasetError(f"line {lineno}: AP {ap!r} appears twice in one scan")
        readings[ap] = rss
    return readings


def parse_dataset(path: str | Path, kind: str = "train") -> Dataset:
    """Read a dataset CSV (see README for the column layout)."""
    if kind not in KINDS:
        raise DatasetError(f"unknown dataset kind {kind!r}")
    samples = []
    positions: dict[int, tuple[float, float]] = {}
    seen: set[tuple] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != HEADER:
            raise DatasetError(f"line 1: expected header {','.join(HEADER)!r}, got {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(HEADER):
                raise DatasetError(f"line {lineno}: expected {len(HEADER)} fields, got {len(row)}")
            ts_txt, pid_txt, x_txt, y_txt, readings_txt = row
            try:
                ts = float(ts_txt) if ts_txt else None
                pid = int(pid_txt) if pid_txt else None
                loc = (float(x_txt), float(y_txt)) if x_txt or y_txt else None
            except ValueError as exc:
                raise DatasetError(f"line {lineno}: {exc}") from None
            readings = _parse_readings(readings_txt, lineno)
            if pid is None and kind in ("train", "test-known"):
                raise DatasetError(f"line {lineno}: {kind} rows need a position_id")
            if pid is not None:
                if loc is None:
                    raise DatasetError(f"line {lineno}: position {pid} has no coordinates")
                if positions.setdefault(pid, loc) != loc:
                    raise DatasetError(f"line {lineno}: position {pid} moved to {loc}")
            for ap in readings:
                key = (ts, pid, ap)
                if ts is not None and key in seen:
                    raise DatasetError(f"line {lineno}: duplicate (timestamp, position_id, ap_id) {key}")
                seen.add(key)
            try:
                samples.append(RssSample(readings, pid, loc, ts))
            except DatasetError as exc:
                raise DatasetError(f"line {lineno}: {exc}") from None
    try:
        return Dataset(tuple(samples), positions, kind)
    except DatasetError as exc:
        raise DatasetError(f"{path}: {exc}") from None


def serialize_dataset(ds: Dataset, path: str | Path) -> None:
    if not ds.samples:
        raise DatasetError("refusing to write a dataset without samples")
    referenced = {s.position_id for s in ds.samples if s.position_id is not None}
    if set(ds.positions) != referenced:
        # the CSV only carries positions through their samples
        raise DatasetError("every position must be referenced by at least one sample")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HEADER)
        for s in ds.samples:
            x, y = s.location if s.location is not None else (None, None)
            writer.writerow([
                _fmt_float(s.timestamp),
                "" if s.position_id is None else str(s.position_id),
                _fmt_float(x),
                _fmt_float(y),
                _format_readings(s.readings),
            ])


def nearest_neighbour_distances(points: Iterable[tuple[float, float]]) -> np.ndarray:
    pts = np.asarray(list(points), dtype=float).reshape(-1, 2)
    if len(pts) < 2:
        raise DatasetError("need at least two positions")
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    return d.min(axis=1)


def spacing_stats_xy(points: Iterable[tuple[float, float]]) -> SpacingStats:
    nn = nearest_neighbour_distances(points)
    return SpacingStats(float(nn.min()), float(nn.mean()), float(nn.max()))


def spacing_stats(ds: Dataset) -> SpacingStats:
    """Min/mean/max distance from each position to its nearest neighbour."""
    return spacing_stats_xy(ds.positions.values())
