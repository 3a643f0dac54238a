"""Turn RSS scans into fingerprint images.

APs are laid out row-major on a Y x Y grid in the order they first show up in
the training data, Y = ceil(sqrt(N_AP)). A seen AP gets intensity RSS + 200
(so -99..-30 dBm land in 101..170); unseen APs and padding pixels are 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .dataset import RSS_MIN, Dataset, RssSample

OFFSET = 200
# fill value for unseen APs in raw-vector mode, one below the weakest RSS
RAW_MISSING = RSS_MIN - 1


@dataclass(frozen=True)
class ApDirectory:
    order: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "order", tuple(self.order))
        if not self.order:
            raise ValueError("an AP directory needs at least one AP")
        if len(set(self.order)) != len(self.order):
            raise ValueError("duplicate AP in directory")
        object.__setattr__(self, "_index", {ap: k for k, ap in enumerate(self.order)})

    @property
    def n_ap(self) -> int:
        return len(self.order)

    @property
    def side(self) -> int:
        return math.isqrt(self.n_ap - 1) + 1

    def pixel_of(self, ap: str) -> tuple[int, int]:
        k = self._index[ap]
        return divmod(k, self.side)

    def index(self, ap: str) -> Optional[int]:
        return self._index.get(ap)

    def to_json(self) -> dict:
        return {"order": list(self.order), "side": self.side}

    @classmethod
    def from_json(cls, obj: dict) -> "ApDirectory":
        d = cls(obj["order"])
        if "side" in obj and obj["side"] != d.side:
            raise ValueError(f"directory side {obj['side']} does not match {d.n_ap} APs")
        return d

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ApDirectory":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class FingerprintImage:
    pixels: np.ndarray  # (side, side) uint8
    label: Optional[int] = None

    @property
    def side(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other):
        if not isinstance(other, FingerprintImage):
            return NotImplemented
        return self.label == other.label and np.array_equal(self.pixels, other.pixels)


def build_directory(train: Dataset) -> ApDirectory:
    if train.kind != "train":
        raise ValueError(f"AP directory must come from training data, got {train.kind!r}")
    if not train.samples:
        raise ValueError("cannot build an AP directory from an empty dataset")
    order = {}
    for s in train.samples:
        for ap in s.readings:
            order.setdefault(ap, None)
    return ApDirectory(tuple(order))


def encode_readings(readings: Mapping[str, int], directory: ApDirectory) -> np.ndarray:
    flat = np.zeros(directory.side * directory.side, dtype=np.uint8)
    for ap, rss in readings.items():
        k = directory.index(ap)
        if k is not None:
            flat[k] = rss + OFFSET
    return flat.reshape(directory.side, directory.side)


def encode_sample(s: Union[RssSample, Mapping[str, int]], directory: ApDirectory) -> FingerprintImage:
    """Encode one scan; APs missing from the directory are dropped."""
    if isinstance(s, RssSample):
        return FingerprintImage(encode_readings(s.readings, directory), s.position_id)
    return FingerprintImage(encode_readings(s, directory))


def encode_dataset(ds: Union[Dataset, Sequence[RssSample]], directory: ApDirectory) -> list[FingerprintImage]:
    samples = ds.samples if isinstance(ds, Dataset) else ds
    return [encode_sample(s, directory) for s in samples]


def encode_raw(s: RssSample, directory: ApDirectory) -> np.ndarray:
    """Raw RSS vector in directory order, RAW_MISSING where an AP is unseen."""
    v = np.full(directory.n_ap, RAW_MISSING, dtype=float)
    for ap, rss in s.readings.items():
        k = directory.index(ap)
        if k is not None:
            v[k] = rss
    return v


def stack_images(images: Sequence[FingerprintImage]) -> tuple[np.ndarray, np.ndarray]:
    """(N, side, side) float pixels and (N,) int labels (-1 when unlabelled)."""
    if not images:
        raise ValueError("no images")
    x = np.stack([im.pixels for im in images]).astype(float)
    y = np.array([-1 if im.label is None else im.label for im in images], dtype=np.int64)
    return x, y


def export_image(img: FingerprintImage, path: Union[str, Path], binary: bool = False) -> None:
    """Write a greymap (P2, or P5 when binary) with maxval 255."""
    h, w = img.pixels.shape
    px = np.asarray(img.pixels, dtype=np.uint8)
    if binary:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(px.tobytes())
        return
    lines = [f"P2\n{w} {h}\n255"]
    lines += [" ".join(str(v) for v in row) for row in px]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def load_image(path: Union[str, Path]) -> FingerprintImage:
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic == b"P2":
        tokens = [t for line in data.decode("ascii").splitlines()
                  for t in line.split("#", 1)[0].split()]
        w, h, maxval = map(int, tokens[1:4])
        px = np.array(tokens[4:4 + w * h], dtype=np.int64)
    elif magic == b"P5":
        # header is 4 whitespace-separated tokens followed by exactly one whitespace byte
        fields, pos = [], 0
        while len(fields) < 4:
            while data[pos:pos + 1].isspace():
                pos += 1
            start = pos
            while pos < len(data) and not data[pos:pos + 1].isspace():
                pos += 1
            fields.append(data[start:pos])
        w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
        px = np.frombuffer(data[pos + 1: pos + 1 + w * h], dtype=np.uint8)
    else:
        raise ValueError(f"{path}: not a PGM file")
    if maxval != 255 or px.size != w * h:
        raise ValueError(f"{path}: unsupported or truncated greymap")
    return FingerprintImage(px.reshape(h, w).astype(np.uint8))
