"""Classic fingerprinting classifiers on flattened fingerprint images.

KNN (K=1, Euclidean), one-vs-rest linear SVM trained by primal subgradient
descent, and Subspace KNN (random feature subsets, majority vote). With
``features="raw"`` the images are mapped back to RSS vectors first.
"""

from __future__ import annotations

import math
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from . import nn
from .encoder import OFFSET, RAW_MISSING, ApDirectory, FingerprintImage, stack_images

MODEL_VERSION = 1
FEATURE_MODES = ("image", "raw")


def image_features(pixels: np.ndarray, mode: str = "image", n_ap: Optional[int] = None) -> np.ndarray:
    """(N, side, side) pixels -> (N, D) feature rows."""
    x = np.asarray(pixels, dtype=float)
    if x.ndim == 2:
        x = x[None]
    flat = x.reshape(len(x), -1)
    if mode == "image":
        return flat
    if mode == "raw":
        flat = flat[:, :n_ap]
        return np.where(flat > 0, flat - OFFSET, float(RAW_MISSING))
    raise ValueError(f"unknown feature mode {mode!r}")


def _pixels(img) -> np.ndarray:
    return img.pixels if isinstance(img, FingerprintImage) else np.asarray(img)


class _Classifier:
    name = "?"

    def __init__(self, directory: Optional[ApDirectory], class_table: Optional[Mapping], features: str):
        if features not in FEATURE_MODES:
            raise ValueError(f"unknown feature mode {features!r}")
        if features == "raw" and directory is None:
            raise ValueError("raw-vector features need the AP directory")
        self.directory = directory
        self.class_table = {int(k): tuple(map(float, v)) for k, v in (class_table or {}).items()}
        self.features = features

    def _features(self, pixels) -> np.ndarray:
        n_ap = self.directory.n_ap if self.directory else None
        return image_features(pixels, self.features, n_ap)

    def predict_label(self, img) -> int:
        return int(self.predict_batch(_pixels(img))[0])

    def predict_xy(self, img) -> tuple[float, float]:
        return self.class_table[self.predict_label(img)]

    def predict_batch(self, pixels) -> np.ndarray:
        raise NotImplementedError


def _check_dim(x: np.ndarray, d: int):
    if x.shape[1] != d:
        raise ValueError(f"feature dimension {x.shape[1]} != trained dimension {d}")


def nearest_index(train: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Index of the nearest training row per query; ties -> lowest index."""
    out = np.empty(len(queries), dtype=np.int64)
    for i, q in enumerate(queries):
        d = train - q
        out[i] = np.argmin(np.einsum("ij,ij->i", d, d))
    return out


class KnnModel(_Classifier):
    name = "knn"
    k = 1

    def __init__(self, x: np.ndarray, y: np.ndarray, directory=None, class_table=None, features="image"):
        super().__init__(directory, class_table, features)
        self.x = np.asarray(x, dtype=float)
        self.y = np.asarray(y, dtype=np.int64)

    def predict_batch(self, pixels) -> np.ndarray:
        q = self._features(pixels)
        _check_dim(q, self.x.shape[1])
        return self.y[nearest_index(self.x, q)]


def _labelled(images):
    px, y = stack_images(images)
    if (y < 0).any():
        raise ValueError("training images must be labelled")
    return px, y


def knn_train(images: Sequence[FingerprintImage], directory=None, class_table=None,
              features: str = "image") -> KnnModel:
    px, y = _labelled(images)
    n_ap = directory.n_ap if directory else None
    return KnnModel(image_features(px, features, n_ap), y, directory, class_table, features)


def knn_predict(model: KnnModel, img) -> int:
    return model.predict_label(img)


class LinearSvmModel(_Classifier):
    """One linear scorer per class; features are standardised with training statistics."""

    name = "svm"

    def __init__(self, w: np.ndarray, b: np.ndarray, classes: np.ndarray, mu: np.ndarray,
                 scale: np.ndarray, directory=None, class_table=None, features="image"):
        super().__init__(directory, class_table, features)
        self.w, self.b = np.asarray(w, float), np.asarray(b, float)
        self.classes = np.asarray(classes, dtype=np.int64)
        self.mu, self.scale = np.asarray(mu, float), np.asarray(scale, float)

    def scores(self, pixels) -> np.ndarray:
        x = self._features(pixels)
        _check_dim(x, self.w.shape[1])
        return ((x - self.mu) / self.scale) @ self.w.T + self.b

    def predict_batch(self, pixels) -> np.ndarray:
        return self.classes[np.argmax(self.scores(pixels), axis=1)]


def svm_train(images: Sequence[FingerprintImage], C: float = 1.0, epochs: int = 100, seed: int = 0,
              directory=None, class_table=None, features: str = "image",
              batch: int = 64, lr0: float = 0.1) -> LinearSvmModel:
    """One-vs-rest hinge loss, minimised per class over (w, b):

        0.5 * |w|^2 / (C * N) + mean_i max(0, 1 - t_i (w . x_i + b))

    by shuffled mini-batch subgradient steps with step lr0 / sqrt(t). The
    iterate with the lowest full objective (checked once per epoch) is kept.
    """
    px, y = _labelled(images)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("SVM training needs at least two classes")
    n_ap = directory.n_ap if directory else None
    x = image_features(px, features, n_ap)
    mu = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    xs = (x - mu) / scale
    n, d = xs.shape
    t = np.where(y[:, None] == classes[None, :], 1.0, -1.0)  # (n, n_classes)
    lam = 1.0 / (C * n)
    w = np.zeros((len(classes), d))
    b = np.zeros(len(classes))

    def objective(w, b):
        margins = np.maximum(0.0, 1.0 - t * (xs @ w.T + b))
        return 0.5 * lam * (w * w).sum(axis=1) + margins.mean(axis=0)

    best_obj = objective(w, b)
    best_w, best_b = w.copy(), b.copy()
    rng = np.random.default_rng(seed)
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for i in range(0, n, batch):
            idx = order[i:i + batch]
            step += 1
            eta = lr0 / math.sqrt(step)
            active = (t[idx] * (xs[idx] @ w.T + b)) < 1.0  # (m, n_classes)
            coef = -(active * t[idx])  # hinge subgradient coefficients
            gw = lam * w + coef.T @ xs[idx] / len(idx)
            gb = coef.mean(axis=0)
            w -= eta * gw
            b -= eta * gb
        obj = objective(w, b)
        better = obj < best_obj
        best_w[better] = w[better]
        best_b[better] = b[better]
        best_obj = np.minimum(obj, best_obj)
    return LinearSvmModel(best_w, best_b, classes, mu, scale, directory, class_table, features)


def svm_predict(model: LinearSvmModel, img) -> int:
    return model.predict_label(img)


def majority_vote(votes: np.ndarray) -> int:
    """Most frequent label; ties -> lowest label."""
    labels, counts = np.unique(votes, return_counts=True)
    return int(labels[np.argmax(counts)])


class SubspaceKnnModel(_Classifier):
    name = "subknn"

    def __init__(self, x: np.ndarray, y: np.ndarray, subsets: np.ndarray, directory=None,
                 class_table=None, features="image"):
        super().__init__(directory, class_table, features)
        self.x = np.asarray(x, dtype=float)
        self.y = np.asarray(y, dtype=np.int64)
        self.subsets = np.asarray(subsets, dtype=np.int64)  # (m, d)
        self._views = [np.ascontiguousarray(self.x[:, s]) for s in self.subsets]

    def member_votes(self, pixels) -> np.ndarray:
        q = self._features(pixels)
        _check_dim(q, self.x.shape[1])
        return np.stack([self.y[nearest_index(v, q[:, s])] for v, s in zip(self._views, self.subsets)], axis=1)

    def predict_batch(self, pixels) -> np.ndarray:
        return np.array([majority_vote(v) for v in self.member_votes(pixels)], dtype=np.int64)


def subknn_train(images: Sequence[FingerprintImage], m: int = 30, d: Optional[int] = None, seed: int = 0,
                 directory=None, class_table=None, features: str = "image") -> SubspaceKnnModel:
    px, y = _labelled(images)
    n_ap = directory.n_ap if directory else None
    x = image_features(px, features, n_ap)
    n_feat = x.shape[1]
    d = math.ceil(n_feat / 2) if d is None else d
    if m < 1:
        raise ValueError("need at least one ensemble member")
    if not 1 <= d <= n_feat:
        raise ValueError(f"subspace size {d} must lie in [1, {n_feat}]")
    rng = np.random.default_rng(seed)
    subsets = np.stack([np.sort(rng.choice(n_feat, size=d, replace=False)) for _ in range(m)])
    return SubspaceKnnModel(x, y, subsets, directory, class_table, features)


def subknn_predict(model: SubspaceKnnModel, img) -> int:
    return model.predict_label(img)


# --------------------------------------------------------------------------
# persistence, same envelope as WiFiNet checkpoints


def save(model: _Classifier, path) -> None:
    header = {
        "model": model.name,
        "model_version": MODEL_VERSION,
        "features": model.features,
        "directory": model.directory.to_json() if model.directory else None,
        "class_table": {str(k): list(v) for k, v in sorted(model.class_table.items())},
    }
    if isinstance(model, KnnModel):
        arrays = {"x": model.x, "y": model.y}
    elif isinstance(model, LinearSvmModel):
        arrays = {"w": model.w, "b": model.b, "classes": model.classes, "mu": model.mu, "scale": model.scale}
    elif isinstance(model, SubspaceKnnModel):
        arrays = {"x": model.x, "y": model.y, "subsets": model.subsets}
    else:
        raise TypeError(f"cannot save {type(model).__name__}")
    nn.write_checkpoint(path, header, arrays)


def from_checkpoint(header: dict, arrays: dict) -> _Classifier:
    if header.get("model_version") != MODEL_VERSION:
        raise nn.CheckpointError(f"baseline checkpoint version {header.get('model_version')}, "
                                 f"expected {MODEL_VERSION}")
    common = dict(
        directory=ApDirectory.from_json(header["directory"]) if header.get("directory") else None,
        class_table={int(k): tuple(v) for k, v in header["class_table"].items()},
        features=header["features"],
    )
    kind = header.get("model")
    if kind == "knn":
        return KnnModel(arrays["x"], arrays["y"], **common)
    if kind == "svm":
        return LinearSvmModel(arrays["w"], arrays["b"], arrays["classes"], arrays["mu"], arrays["scale"], **common)
    if kind == "subknn":
        return SubspaceKnnModel(arrays["x"], arrays["y"], arrays["subsets"], **common)
    raise nn.CheckpointError(f"unknown baseline model {kind!r}")


def load(path) -> _Classifier:
    return from_checkpoint(*nn.read_checkpoint(path))
