"""WiFiNet: stem Conv+BN+ReLU, four (Conv+BN)x3+ReLU blocks, dense + softmax.

All convolutions are stride 1 with same padding and there is no pooling, so
the feature maps keep the input's side length all the way to the head.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from . import nn
from .encoder import ApDirectory, FingerprintImage, stack_images

log = logging.getLogger(__name__)

DEFAULT_WIDTHS = (8, 16, 24, 32, 48)
MODEL_VERSION = 2
PIXEL_SCALE = 255.0
NORMALIZATIONS = ("zerocenter", "none")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    minibatch: int = 120
    epochs: int = 15
    seed: int = 0
    shuffle: bool = True
    momentum: float = 0.9
    weight_decay: float = 0.0
    check_finite: bool = False  # per-step NaN/Inf audit of all parameters

    def __post_init__(self):
        if self.minibatch < 2:
            raise ValueError("minibatch must be at least 2 (batch norm)")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")


class Block(nn.Layer):
    """Three Conv+BN pairs and a trailing ReLU, with an optional identity skip.

    The skip zero-pads the block input along channels, so it adds no layers.
    """

    kind = "block"

    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator, skip: bool = False,
                 init: str = "he_normal"):
        self.skip = skip
        self.in_ch = in_ch
        self.layers = []
        c = in_ch
        for _ in range(3):
            self.layers += [nn.Conv2D(c, out_ch, k, rng, init), nn.BatchNorm2D(out_ch)]
            c = out_ch
        self.relu = nn.ReLU()

    def children(self):
        return self.layers + [self.relu]

    def forward(self, x, training=False):
        h = x
        for layer in self.layers:
            h = layer.forward(h, training)
        if self.skip:
            h = h.copy()
            h[:, :self.in_ch] += x
        return self.relu.forward(h, training)

    def backward(self, grad):
        g = self.relu.backward(grad)
        gx = g
        for layer in reversed(self.layers):
            gx = layer.backward(gx)
        if self.skip:
            gx = gx + g[:, :self.in_ch]
        return gx


class WiFiNet:
    name = "wifinet"

    def __init__(self, side: int, n_classes: int, widths: Sequence[int] = DEFAULT_WIDTHS,
                 seed: int = 0, kernel: int = 3, residual: bool = False,
                 normalize: str = "zerocenter", init: str = "fan_in_uniform",
                 directory: Optional[ApDirectory] = None,
                 class_table: Optional[Mapping[int, tuple[float, float]]] = None):
        widths = tuple(int(w) for w in widths)
        if side < 1:
            raise ValueError(f"image side must be >= 1, got {side}")
        if n_classes < 2:
            raise ValueError("need at least 2 classes")
        if len(widths) != 5 or min(widths) < 1:
            raise ValueError(f"need 5 positive channel widths, got {widths}")
        if any(b <= a for a, b in zip(widths[1:], widths[2:])):
            raise ValueError(f"block widths must strictly increase, got {widths[1:]}")
        if normalize not in NORMALIZATIONS:
            raise ValueError(f"normalize must be one of {NORMALIZATIONS}, got {normalize!r}")
        if directory is not None and directory.side != side:
            raise ValueError(f"directory side {directory.side} != model side {side}")
        self.side = side
        self.n_classes = n_classes
        self.widths = widths
        self.seed = seed
        self.kernel = kernel
        self.residual = residual
        self.normalize = normalize
        self.init = init
        # mean training image (scaled pixels); fitted by the first call to train()
        self.mean_image = np.zeros((side, side))
        self.directory = directory
        self.class_table = {int(k): tuple(map(float, v)) for k, v in (class_table or {}).items()}
        self.epochs_trained = 0

        rng = np.random.default_rng(seed)
        layers: list[nn.Layer] = [nn.Conv2D(1, widths[0], kernel, rng, init), nn.BatchNorm2D(widths[0]), nn.ReLU()]
        c = widths[0]
        for w in widths[1:]:
            layers.append(Block(c, w, kernel, rng, skip=residual, init=init))
            c = w
        layers.append(nn.Dense(side * side * c, n_classes, rng, init))
        self.body = nn.Sequential(layers)
        self.softmax = nn.Softmax()

    @property
    def head(self) -> nn.Dense:
        return self.body.layers[-1]

    def layer_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for leaf in list(self.body.walk()) + [self.softmax]:
            counts[leaf.kind] = counts.get(leaf.kind, 0) + 1
        return counts

    def params(self) -> list[np.ndarray]:
        return [p for _, p in nn.named_tensors(self.body, "params")]

    def grads(self) -> list[np.ndarray]:
        return [g for _, g in nn.named_tensors(self.body, "grads")]

    def _as_batch(self, pixels: np.ndarray) -> np.ndarray:
        x = np.asarray(pixels, dtype=float)
        if x.ndim == 2:
            x = x[None]
        if x.shape[1:] != (self.side, self.side):
            raise ValueError(f"expected {self.side}x{self.side} images, got {x.shape[1:]}")
        return self.scale(x)

    def scale(self, x: np.ndarray) -> np.ndarray:
        """(N, S, S) raw pixels -> (N, 1, S, S) network input."""
        return (x / PIXEL_SCALE - self.mean_image)[:, None]

    def logits(self, pixels: np.ndarray, training: bool = False) -> np.ndarray:
        return self.body.forward(self._as_batch(pixels), training)

    def predict_proba(self, pixels: np.ndarray) -> np.ndarray:
        return self.softmax.forward(self.logits(pixels))

    def predict(self, img: Union[FingerprintImage, np.ndarray]) -> tuple[int, np.ndarray]:
        """Most likely class and its probability vector (ties -> lowest index)."""
        px = img.pixels if isinstance(img, FingerprintImage) else img
        p = self.predict_proba(px)[0]
        return int(np.argmax(p)), p

    def predict_label(self, img) -> int:
        return self.predict(img)[0]

    def predict_batch(self, pixels: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(pixels), axis=1)

    def predict_xy(self, img) -> tuple[float, float]:
        return self.class_table[self.predict_label(img)]


def build_wifinet(side: int, n_classes: int, widths: Sequence[int] = DEFAULT_WIDTHS,
                  seed: int = 0, **kwargs) -> WiFiNet:
    return WiFiNet(side, n_classes, widths, seed, **kwargs)


@dataclass
class TrainResult:
    model: WiFiNet
    losses: list[float] = field(default_factory=list)


def _batches(n: int, size: int, order: np.ndarray) -> list[np.ndarray]:
    batches = [order[i:i + size] for i in range(0, n, size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        # a lone trailing sample cannot be batch-normalised; fold it into the previous batch
        batches[-2] = np.concatenate(batches[-2:])
        batches.pop()
    return batches


class TrainingError(RuntimeError):
    pass


def train(model: WiFiNet, images: Sequence[FingerprintImage], cfg: TrainConfig,
          class_table: Optional[Mapping[int, tuple[float, float]]] = None,
          directory: Optional[ApDirectory] = None) -> TrainResult:
    """Mini-batch SGD with momentum on mean softmax cross-entropy.

    Mutates ``model`` and returns it with the per-epoch mean training loss.
    """
    x, y = stack_images(images)
    if x.shape[1:] != (model.side, model.side):
        raise ValueError(f"image side {x.shape[1]} != model side {model.side}")
    if y.min() < 0 or y.max() >= model.n_classes:
        raise ValueError(f"labels must lie in [0, {model.n_classes})")
    if len(x) < 2:
        raise ValueError("need at least 2 training images")
    if class_table is not None:
        model.class_table = {int(k): tuple(map(float, v)) for k, v in class_table.items()}
    if directory is not None:
        model.directory = directory

    rng = np.random.default_rng(cfg.seed)
    state = nn.SgdmState(cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    params = model.params()
    grads = model.grads()
    if model.normalize == "zerocenter" and model.epochs_trained == 0:
        model.mean_image = x.mean(axis=0) / PIXEL_SCALE
    xb_all = model.scale(x)
    losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x)) if cfg.shuffle else np.arange(len(x))
        total = 0.0
        for step, idx in enumerate(_batches(len(x), cfg.minibatch, order)):
            logits = model.body.forward(xb_all[idx], training=True)
            loss, g = nn.softmax_xent(logits, y[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch} step {step}")
            model.body.backward(g)
            nn.sgdm_step(params, grads, state)
            if cfg.check_finite:
                for name, p in nn.named_tensors(model.body, "params"):
                    if not np.all(np.isfinite(p)):
                        raise TrainingError(f"non-finite parameter {name} at epoch {epoch} step {step}")
            total += loss * len(idx)
        losses.append(total / len(x))
        model.epochs_trained += 1
        log.info("epoch %d loss %.5f", epoch + 1, losses[-1])
    return TrainResult(model, losses)


# --------------------------------------------------------------------------
# persistence


def save(model: WiFiNet, path, train_config: Optional[TrainConfig] = None) -> None:
    header = {
        "model": "wifinet",
        "model_version": MODEL_VERSION,
        "architecture": {
            "side": model.side,
            "n_classes": model.n_classes,
            "widths": list(model.widths),
            "kernel": model.kernel,
            "residual": model.residual,
            "normalize": model.normalize,
            "init": model.init,
        },
        "seed": model.seed,
        "epoch": model.epochs_trained,
        "train_config": asdict(train_config) if train_config else None,
        "directory": model.directory.to_json() if model.directory else None,
        "class_table": {str(k): list(v) for k, v in sorted(model.class_table.items())},
    }
    arrays = {"input.mean": model.mean_image}
    arrays.update(nn.named_tensors(model.body, "params"))
    arrays.update(nn.named_tensors(model.body, "buffers"))
    nn.write_checkpoint(path, header, arrays)


def from_checkpoint(header: dict, arrays: dict) -> WiFiNet:
    if header.get("model") != "wifinet":
        raise nn.CheckpointError(f"not a WiFiNet checkpoint: {header.get('model')!r}")
    if header.get("model_version") != MODEL_VERSION:
        raise nn.CheckpointError(f"WiFiNet checkpoint version {header.get('model_version')}, "
                                 f"expected {MODEL_VERSION}")
    arch = header["architecture"]
    directory = ApDirectory.from_json(header["directory"]) if header.get("directory") else None
    model = WiFiNet(arch["side"], arch["n_classes"], arch["widths"], header["seed"],
                    kernel=arch["kernel"], residual=arch["residual"],
                    normalize=arch["normalize"], init=arch["init"], directory=directory,
                    class_table={int(k): tuple(v) for k, v in header["class_table"].items()})
    model.epochs_trained = header["epoch"]
    named = nn.named_tensors(model.body, "params") + nn.named_tensors(model.body, "buffers")
    if {n for n, _ in named} | {"input.mean"} != set(arrays):
        raise nn.CheckpointError("checkpoint tensors do not match the architecture")
    for name, arr in named:
        if arrays[name].shape != arr.shape:
            raise nn.CheckpointError(f"{name}: shape {arrays[name].shape} != {arr.shape}")
        arr[...] = arrays[name]
    if arrays["input.mean"].shape != model.mean_image.shape:
        raise nn.CheckpointError("input mean image has the wrong shape")
    model.mean_image = np.array(arrays["input.mean"], dtype=float)
    return model


def load(path) -> WiFiNet:
    return from_checkpoint(*nn.read_checkpoint(path))
