"""Synthetic indoor radio environments and fingerprint datasets.

Training positions sit along a serpentine corridor (horizontal runs joined by
vertical connectors, every turn on a position). Gaps between consecutive
positions are ``min_spacing + scale * Exp(1)``, with ``scale`` tuned so the
nearest-neighbour spacing profile hits the requested mean. RSS follows a
log-distance path-loss model with per-scan log-normal shadowing and a
per-(AP, epoch) drift term standing in for the week/month gap between
training and test campaigns.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataset import RSS_MAX, RSS_MIN, Dataset, RssSample, spacing_stats_xy

# epoch offsets used by the three test protocols
EPOCH_TRAIN = 0
EPOCH_WEEK = 1
EPOCH_MONTHS = 2

_KIND_CODE = {"train": 0, "test-known": 1, "test-unknown": 2, "test-trajectory": 3}
_T0 = 1_600_000_000.0  # arbitrary campaign start, seconds since epoch
_EPOCH_SECONDS = (0.0, 7 * 86400.0, 60 * 86400.0)


class InfeasibleLayout(ValueError):
    pass


@dataclass
class EnvironmentSpec:
    width: float = 60.0
    height: float = 60.0
    n_aps: int = 113
    n_positions: int = 30
    n_unknown: int = 67
    layout: str = "corridor"  # or "grid"
    min_spacing: float = 3.0
    mean_spacing: float = 4.46
    row_separation: float = 15.0
    margin: float = 5.0
    grid_pitch: float = 5.0
    grid_shape: Optional[tuple[int, int]] = None  # (rows, cols) for layout="grid"
    p0_range: tuple[float, float] = (-45.0, -35.0)
    unknown_clearance: float = 1.0
    spacing_tolerance: float = 0.15

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("bounds must be positive")
        if self.n_aps < 1 or self.n_positions < 2:
            raise ValueError("need at least 1 AP and 2 positions")
        if self.layout not in ("corridor", "grid"):
            raise ValueError(f"unknown layout {self.layout!r}")
        if not 0 < self.min_spacing <= self.mean_spacing:
            raise ValueError("need 0 < min_spacing <= mean_spacing")
        if self.grid_shape is not None:
            self.grid_shape = tuple(int(v) for v in self.grid_shape)
        self.p0_range = tuple(float(v) for v in self.p0_range)


@dataclass
class RadioModel:
    exponent: float = 3.0
    shadow_std: float = 4.0
    drift_std: tuple[float, ...] = (0.0, 2.0, 3.0)  # indexed by epoch offset
    floor: float = RSS_MIN
    ceiling: float = RSS_MAX
    p_drop: float = 0.0
    d0: float = 1.0

    def __post_init__(self):
        self.drift_std = tuple(float(v) for v in self.drift_std)
        if self.exponent <= 0:
            raise ValueError("path-loss exponent must be positive")
        if self.shadow_std < 0 or min(self.drift_std) < 0:
            raise ValueError("noise levels must be non-negative")
        if not 0 <= self.p_drop <= 1:
            raise ValueError("p_drop must lie in [0, 1]")

    def drift_for(self, epoch: int) -> float:
        return self.drift_std[min(epoch, len(self.drift_std) - 1)]


@dataclass
class Trajectory:
    waypoints: list[tuple[float, float]]
    speed: float = 1.0
    interval: float = 1.0

    def __post_init__(self):
        if len(self.waypoints) < 2:
            raise ValueError("a trajectory needs at least two waypoints")
        if self.speed <= 0 or self.interval <= 0:
            raise ValueError("speed and scan interval must be positive")

    @property
    def length(self) -> float:
        w = np.asarray(self.waypoints, dtype=float)
        return float(np.linalg.norm(np.diff(w, axis=0), axis=1).sum())


@dataclass
class Environment:
    width: float
    height: float
    ap_ids: list[str]
    ap_xy: np.ndarray  # (n_ap, 2)
    ap_p0: np.ndarray  # (n_ap,)
    train_positions: np.ndarray  # (n_pos, 2)
    unknown_positions: np.ndarray  # (n_unknown, 2)
    route: list[tuple[float, float]]  # corridor polyline, used as the walking route
    seed: int = 0
    spec: EnvironmentSpec = field(default_factory=EnvironmentSpec)

    @property
    def positions(self) -> dict[int, tuple[float, float]]:
        return {i: (float(x), float(y)) for i, (x, y) in enumerate(self.train_positions)}

    def default_trajectory(self, speed: float = 1.0, interval: float = 1.0) -> Trajectory:
        return Trajectory(list(self.route), speed, interval)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "bounds": [self.width, self.height],
            "spec": asdict(self.spec),
            "aps": [{"id": a, "x": float(x), "y": float(y), "p0": float(p)}
                    for a, (x, y), p in zip(self.ap_ids, self.ap_xy, self.ap_p0)],
            "train_positions": self.train_positions.tolist(),
            "unknown_positions": self.unknown_positions.tolist(),
            "route": [list(p) for p in self.route],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, obj: dict) -> "Environment":
        aps = obj["aps"]
        spec = obj.get("spec") or {}
        return cls(
            width=obj["bounds"][0], height=obj["bounds"][1],
            ap_ids=[a["id"] for a in aps],
            ap_xy=np.array([[a["x"], a["y"]] for a in aps], dtype=float).reshape(-1, 2),
            ap_p0=np.array([a["p0"] for a in aps], dtype=float),
            train_positions=np.array(obj["train_positions"], dtype=float).reshape(-1, 2),
            unknown_positions=np.array(obj["unknown_positions"], dtype=float).reshape(-1, 2),
            route=[tuple(p) for p in obj["route"]],
            seed=obj["seed"],
            spec=EnvironmentSpec(**spec),
        )

    @classmethod
    def load(cls, path) -> "Environment":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


# --------------------------------------------------------------------------
# layouts


def _serpentine(gaps: Sequence[float], spec: EnvironmentSpec) -> tuple[np.ndarray, list]:
    """Walk the gaps along horizontal runs joined by vertical connectors.

    Turns always happen at a position, so each position's path neighbours are
    also its nearest neighbours unless two runs come closer than a gap.
    """
    lo_x, hi_x = spec.margin, spec.width - spec.margin
    top = spec.height - spec.margin
    p = np.array([lo_x, spec.margin])
    pts = [p.copy()]
    route = [tuple(p)]
    heading = 1.0  # +x or -x on horizontal runs
    vertical = False
    climbed = 0.0
    for g in gaps:
        if not vertical:
            nx = p[0] + heading * g
            if lo_x <= nx <= hi_x:
                p = np.array([nx, p[1]])
            else:
                vertical, climbed = True, 0.0
                route.append(tuple(p))
        if vertical:
            p = np.array([p[0], p[1] + g])
            climbed += g
            if p[1] > top:
                raise InfeasibleLayout(f"corridor of {len(gaps) + 1} positions does not fit "
                                       f"in {spec.width}x{spec.height} m")
            if climbed >= spec.row_separation:
                vertical = False
                heading = -heading
                route.append(tuple(p))
        pts.append(p.copy())
    route.append(tuple(p))
    dedup = [route[0]] + [q for a, q in zip(route, route[1:]) if q != a]
    return np.array(pts), [(float(x), float(y)) for x, y in dedup]


def _corridor_positions(spec: EnvironmentSpec, rng: np.random.Generator):
    n = spec.n_positions
    target_extra = spec.mean_spacing - spec.min_spacing
    best = None
    for _attempt in range(20):
        w = rng.exponential(1.0, n - 1)
        scale = 2.0 * target_extra
        for _ in range(30):
            gaps = spec.min_spacing + scale * w
            try:
                pts, route = _serpentine(gaps, spec)
            except InfeasibleLayout:
                break
            st = spacing_stats_xy(pts)
            err_min = abs(st.min_m - spec.min_spacing) / spec.min_spacing
            err_mean = abs(st.mean_m - spec.mean_spacing) / spec.mean_spacing
            if best is None or max(err_min, err_mean) < best[0]:
                best = (max(err_min, err_mean), pts, route)
            if err_mean < 0.01 or st.mean_m <= spec.min_spacing:
                break
            if scale == 0:
                break
            scale *= target_extra / max(st.mean_m - spec.min_spacing, 1e-9)
        if best is not None and best[0] < 0.01:
            break
    if best is None or best[0] > spec.spacing_tolerance:
        raise InfeasibleLayout(
            f"cannot place {n} positions with spacing profile "
            f"({spec.min_spacing}, {spec.mean_spacing}) m in {spec.width}x{spec.height} m")
    return best[1], best[2]


def _grid_positions(spec: EnvironmentSpec):
    if spec.grid_shape is not None:
        rows, cols = spec.grid_shape
    else:
        cols = math.ceil(math.sqrt(spec.n_positions))
        rows = math.ceil(spec.n_positions / cols)
    if (cols - 1) * spec.grid_pitch > spec.width or (rows - 1) * spec.grid_pitch > spec.height:
        raise InfeasibleLayout(f"{rows}x{cols} grid at {spec.grid_pitch} m does not fit")
    x0 = (spec.width - (cols - 1) * spec.grid_pitch) / 2
    y0 = (spec.height - (rows - 1) * spec.grid_pitch) / 2
    pts = []
    route = []
    for r in range(rows):
        cs = range(cols) if r % 2 == 0 else range(cols - 1, -1, -1)
        row = [(x0 + c * spec.grid_pitch, y0 + r * spec.grid_pitch) for c in cs]
        pts += row
        route += [row[0], row[-1]]
    pts = np.array(pts[:spec.n_positions] if spec.grid_shape is None else pts, dtype=float)
    dedup = [route[0]] + [q for a, q in zip(route, route[1:]) if q != a]
    return pts, dedup


def _points_along(route: Sequence[tuple[float, float]], s: np.ndarray) -> np.ndarray:
    w = np.asarray(route, dtype=float)
    seg = np.linalg.norm(np.diff(w, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    s = np.clip(s, 0.0, cum[-1])
    return np.column_stack([np.interp(s, cum, w[:, 0]), np.interp(s, cum, w[:, 1])])


def _unknown_positions(spec, route, train, rng):
    if spec.n_unknown == 0:
        return np.zeros((0, 2))
    length = Trajectory(list(route)).length
    out: list[np.ndarray] = []
    for _ in range(200):
        cand = _points_along(route, rng.uniform(0.0, length, 4 * spec.n_unknown))
        for c in cand:
            if np.min(np.linalg.norm(train - c, axis=1)) < spec.unknown_clearance:
                continue
            if out and np.min(np.linalg.norm(np.array(out) - c, axis=1)) < 1e-6:
                continue
            out.append(c)
            if len(out) == spec.n_unknown:
                return np.array(out)
    raise InfeasibleLayout("could not place the requested unknown positions")


def _bssid(rng: np.random.Generator) -> str:
    b = rng.integers(0, 256, 6)
    b[0] = (b[0] & 0xFC) | 0x02  # locally administered, unicast
    return ":".join(f"{v:02X}" for v in b)


def generate_environment(spec: Optional[EnvironmentSpec] = None, seed: int = 0) -> Environment:
    spec = spec or EnvironmentSpec()
    rng = np.random.default_rng([seed, 11])
    if spec.layout == "corridor":
        train, route = _corridor_positions(spec, rng)
    else:
        train, route = _grid_positions(spec)
    unknown = _unknown_positions(spec, route, train, rng)
    ap_xy = np.column_stack([rng.uniform(0, spec.width, spec.n_aps),
                             rng.uniform(0, spec.height, spec.n_aps)])
    ap_p0 = rng.uniform(spec.p0_range[0], spec.p0_range[1], spec.n_aps)
    ids: list[str] = []
    while len(ids) < spec.n_aps:
        b = _bssid(rng)
        if b not in ids:
            ids.append(b)
    return Environment(spec.width, spec.height, ids, ap_xy, ap_p0, train, unknown,
                       route, seed, spec)


# --------------------------------------------------------------------------
# RSS sampling


def drift_offsets(env: Environment, model: RadioModel, epoch: int) -> np.ndarray:
    """Per-AP drift for one measurement epoch, shared by every scan in it."""
    std = model.drift_for(epoch)
    if std == 0:
        return np.zeros(len(env.ap_ids))
    return np.random.default_rng([env.seed, 23, epoch]).normal(0.0, std, len(env.ap_ids))


def mean_rss(env: Environment, model: RadioModel, location) -> np.ndarray:
    d = np.linalg.norm(env.ap_xy - np.asarray(location, dtype=float), axis=1)
    return env.ap_p0 - 10.0 * model.exponent * np.log10(np.maximum(d, model.d0) / model.d0)


def _scan(env, model, location, drift, rng) -> dict[str, int]:
    rss = mean_rss(env, model, location) + drift
    if model.shadow_std:
        rss = rss + rng.normal(0.0, model.shadow_std, rss.shape)
    keep = rss >= model.floor
    if model.p_drop:
        keep &= rng.random(rss.shape) >= model.p_drop
    vals = np.rint(np.clip(rss, model.floor, model.ceiling)).astype(int)
    idx = np.flatnonzero(keep)
    # strongest first, like a typical scan listing
    idx = idx[np.lexsort((idx, -vals[idx]))]
    return {env.ap_ids[i]: int(vals[i]) for i in idx}


def sample_rss(env: Environment, model: RadioModel, location, epoch_offset: int = 0,
               seed: int = 0) -> Optional[RssSample]:
    """One scan at ``location``; None when no AP is heard."""
    x, y = location
    if not (0 <= x <= env.width and 0 <= y <= env.height):
        raise ValueError(f"location {location} outside the environment bounds")
    rng = np.random.default_rng([env.seed, 29, seed])
    readings = _scan(env, model, location, drift_offsets(env, model, epoch_offset), rng)
    if not readings:
        return None
    return RssSample(readings, location=(float(x), float(y)))


def generate_dataset(env: Environment, model: RadioModel, kind: str, scans_per_point: int,
                     seed: int = 0, epoch: Optional[int] = None) -> Dataset:
    """Fingerprints for the train, known-position or unknown-position protocol.

    Default epochs: train 0, test-known one week later, test-unknown two months later.
    """
    if scans_per_point < 1:
        raise ValueError("scans_per_point must be at least 1")
    if kind == "train" or kind == "test-known":
        points = env.train_positions
        labelled = True
    elif kind == "test-unknown":
        points = env.unknown_positions
        labelled = False
    else:
        raise ValueError(f"generate_dataset does not produce {kind!r} data")
    if len(points) == 0:
        raise ValueError("no positions to sample")
    if epoch is None:
        epoch = {"train": EPOCH_TRAIN, "test-known": EPOCH_WEEK}.get(kind, EPOCH_MONTHS)
    drift = drift_offsets(env, model, epoch)
    t0 = _T0 + _EPOCH_SECONDS[min(epoch, 2)] + 86400.0 * max(epoch - 2, 0)
    samples = []
    for i, xy in enumerate(points):
        loc = (float(xy[0]), float(xy[1]))
        for j in range(scans_per_point):
            rng = np.random.default_rng([env.seed, seed, _KIND_CODE[kind], i, j])
            readings = _scan(env, model, loc, drift, rng)
            if not readings:
                continue
            samples.append(RssSample(readings, i if labelled else None, loc,
                                     t0 + i * 10_000.0 + j))
    positions = env.positions if labelled else {}
    if kind == "train":
        positions = {i: p for i, p in positions.items() if any(s.position_id == i for s in samples)}
    if not samples:
        raise ValueError("every scan came back empty")
    return Dataset(tuple(samples), positions, kind)


def generate_trajectory_dataset(env: Environment, model: RadioModel,
                                traj: Optional[Trajectory] = None, seed: int = 0,
                                epoch: int = EPOCH_MONTHS) -> Dataset:
    """Scans every ``interval`` seconds while walking the waypoints at ``speed``."""
    traj = traj or env.default_trajectory()
    for x, y in traj.waypoints:
        if not (0 <= x <= env.width and 0 <= y <= env.height):
            raise ValueError(f"waypoint {(x, y)} outside the environment bounds")
    step = traj.speed * traj.interval
    n = int(math.floor(traj.length / step + 1e-9)) + 1
    pts = _points_along(traj.waypoints, np.arange(n) * step)
    drift = drift_offsets(env, model, epoch)
    t0 = _T0 + _EPOCH_SECONDS[min(epoch, 2)]
    samples = []
    for i, xy in enumerate(pts):
        rng = np.random.default_rng([env.seed, seed, _KIND_CODE["test-trajectory"], i])
        readings = _scan(env, model, xy, drift, rng)
        if readings:
            samples.append(RssSample(readings, None, (float(xy[0]), float(xy[1])),
                                     t0 + i * traj.interval))
    if not samples:
        raise ValueError("every scan along the trajectory came back empty")
    return Dataset(tuple(samples), {}, "test-trajectory")
