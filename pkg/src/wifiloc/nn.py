"""Small float64 CNN engine with hand-written backward passes.

Activations are NCHW (or (batch, features) for dense layers). Every op has a
functional form (``conv2d_forward`` / ``conv2d_backward`` ...) and a layer
object that caches what its backward pass needs.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# --------------------------------------------------------------------------
# functional ops


def _check_conv(x: np.ndarray, weight: np.ndarray) -> None:
    if x.ndim != 4:
        raise ValueError(f"conv input must be 4-D (N, C, H, W), got shape {x.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv expects {weight.shape[1]} input channels, got {x.shape[1]}")


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(N, C, H, W) -> (N*H*W, k*k*C) patch rows, channel fastest."""
    n, c, h, w = x.shape
    p = k // 2
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c))
    xp[:, p:p + h, p:p + w, :] = x.transpose(0, 2, 3, 1)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (n, h, w, c, k, k)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * w, k * k * c)


def _col2im(g: np.ndarray, wmat: np.ndarray, shape: tuple, k: int) -> np.ndarray:
    """Input gradient from output rows g (N*H*W, O) and the (O, k*k*C) weight matrix.

    One small matmul per kernel offset, so the full patch gradient is never built.
    """
    n, c, h, w = shape
    p = k // 2
    wk = wmat.reshape(-1, k, k, c)
    dxp = np.zeros((n, h + 2 * p, w + 2 * p, c))
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + h, j:j + w, :] += (g @ wk[:, i, j, :]).reshape(n, h, w, c)
    return np.ascontiguousarray(dxp[:, p:p + h, p:p + w, :].transpose(0, 3, 1, 2))


def _wmat(weight: np.ndarray) -> np.ndarray:
    # (O, C, k, k) -> (O, k*k*C), matching the patch-row layout
    return weight.transpose(0, 2, 3, 1).reshape(weight.shape[0], -1)


def _conv_cols(cols, weight, bias, shape):
    n, _, h, w = shape
    out = cols @ _wmat(weight).T + bias
    return np.ascontiguousarray(out.reshape(n, h, w, -1).transpose(0, 3, 1, 2))


def _conv_back_cols(cols, weight, grad_out, shape):
    o, c, k, _ = weight.shape
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, o)
    grad_w = (g.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2)
    grad_b = g.sum(axis=0)
    grad_x = _col2im(g, _wmat(weight), shape, k)
    return grad_x, grad_w, grad_b


def conv2d_forward(x: np.ndarray, layer: "Conv2D") -> np.ndarray:
    """Stride-1 'same' cross-correlation."""
    _check_conv(x, layer.weight)
    return _conv_cols(_im2col(x, layer.k), layer.weight, layer.bias, x.shape)


def conv2d_backward(x: np.ndarray, layer: "Conv2D", grad_out: np.ndarray):
    """Returns (grad_x, grad_w, grad_b)."""
    _check_conv(x, layer.weight)
    expect = (x.shape[0], layer.weight.shape[0]) + x.shape[2:]
    if grad_out.shape != expect:
        raise ValueError(f"grad_out shape {grad_out.shape} != {expect}")
    return _conv_back_cols(_im2col(x, layer.k), layer.weight, grad_out, x.shape)


def batchnorm_forward(x: np.ndarray, layer: "BatchNorm2D", training: bool = True,
                      update_stats: bool = True):
    """Returns (y, cache). Train mode uses batch statistics over (N, H, W)."""
    c = layer.gamma.shape[0]
    if x.ndim != 4 or x.shape[1] != c:
        raise ValueError(f"batchnorm expects (N, {c}, H, W), got {x.shape}")
    shape = (1, c, 1, 1)
    if training:
        if x.shape[0] < 2:
            raise ValueError("batch norm in train mode needs a batch of at least 2")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if update_stats:
            m = layer.momentum
            count = x.shape[0] * x.shape[2] * x.shape[3]
            layer.running_mean[:] = (1 - m) * layer.running_mean + m * mean
            layer.running_var[:] = (1 - m) * layer.running_var + m * var * count / max(count - 1, 1)
    else:
        mean, var = layer.running_mean, layer.running_var
    inv_std = 1.0 / np.sqrt(var + layer.eps)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    y = layer.gamma.reshape(shape) * xhat + layer.beta.reshape(shape)
    return y, (xhat, inv_std, training)


def batchnorm_backward(grad_out: np.ndarray, layer: "BatchNorm2D", cache):
    """Returns (grad_x, grad_gamma, grad_beta)."""
    xhat, inv_std, training = cache
    shape = (1, -1, 1, 1)
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    dxhat = grad_out * layer.gamma.reshape(shape)
    if not training:
        return dxhat * inv_std.reshape(shape), grad_gamma, grad_beta
    m = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
    grad_x = (inv_std.reshape(shape) / m) * (
        m * dxhat
        - dxhat.sum(axis=(0, 2, 3)).reshape(shape)
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape)
    )
    return grad_x, grad_gamma, grad_beta


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def dense_forward(x: np.ndarray, layer: "Dense") -> np.ndarray:
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != layer.weight.shape[1]:
        raise ValueError(f"dense layer expects {layer.weight.shape[1]} features, got {flat.shape[1]}")
    return flat @ layer.weight.T + layer.bias


def dense_backward(x: np.ndarray, layer: "Dense", grad_out: np.ndarray):
    flat = x.reshape(x.shape[0], -1)
    grad_w = grad_out.T @ flat
    grad_b = grad_out.sum(axis=0)
    grad_x = (grad_out @ layer.weight).reshape(x.shape)
    return grad_x, grad_w, grad_b


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy of softmax(logits); returns (loss, grad_logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} != ({n},)")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(lse - z[rows, labels]))
    grad = np.exp(z - lse[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / n


@dataclass
class SgdmState:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: list = field(default_factory=list)


def sgdm_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: SgdmState) -> None:
    """v <- mu*v - lr*g ; p <- p + v, in place."""
    if not state.velocity:
        state.velocity = [np.zeros_like(p) for p in params]
    if len(state.velocity) != len(params) or len(grads) != len(params):
        raise ValueError("params, grads and velocity lists differ in length")
    for p, g, v in zip(params, grads, state.velocity):
        if state.weight_decay:
            g = g + state.weight_decay * p
        v *= state.momentum
        v -= state.learning_rate * g
        p += v


# --------------------------------------------------------------------------
# layers


class Layer:
    kind = "layer"

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def grads(self) -> dict[str, np.ndarray]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def children(self) -> Sequence["Layer"]:
        return ()

    def walk(self) -> Iterator["Layer"]:
        kids = self.children()
        if not kids:
            yield self
        for k in kids:
            yield from k.walk()

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


INITS = ("he_normal", "fan_in_uniform")


def init_weight(rng: np.random.Generator, shape: tuple, fan_in: int, init: str = "he_normal") -> np.ndarray:
    """Fan-in scaled random weights.

    he_normal: N(0, 2 / fan_in). fan_in_uniform: U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
    i.e. variance 1 / (3 fan_in).
    """
    if init == "he_normal":
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
    if init == "fan_in_uniform":
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, shape)
    raise ValueError(f"unknown init {init!r}; choose from {INITS}")


class Conv2D(Layer):
    kind = "conv"

    def __init__(self, in_ch: int, out_ch: int, k: int = 3, rng: Optional[np.random.Generator] = None,
                 init: str = "he_normal"):
        if k % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {k}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.k = k
        self.weight = init_weight(rng, (out_ch, in_ch, k, k), in_ch * k * k, init)
        self.bias = np.zeros(out_ch)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._cache = None

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def grads(self):
        return {"weight": self.grad_weight, "bias": self.grad_bias}

    def forward(self, x, training=False):
        _check_conv(x, self.weight)
        cols = _im2col(x, self.k)
        self._cache = (cols, x.shape)
        return _conv_cols(cols, self.weight, self.bias, x.shape)

    def backward(self, grad):
        cols, shape = self._cache
        gx, gw, gb = _conv_back_cols(cols, self.weight, grad, shape)
        self.grad_weight[...] = gw
        self.grad_bias[...] = gb
        return gx


class BatchNorm2D(Layer):
    kind = "bn"

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        if not 0 < momentum < 1:
            raise ValueError("running-stat momentum must be in (0, 1)")
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps
        self.update_stats = True
        self.grad_gamma = np.zeros(channels)
        self.grad_beta = np.zeros(channels)
        self._cache = None

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self):
        return {"gamma": self.grad_gamma, "beta": self.grad_beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, training=False):
        y, self._cache = batchnorm_forward(x, self, training, self.update_stats)
        return y

    def backward(self, grad):
        gx, gg, gb = batchnorm_backward(grad, self, self._cache)
        self.grad_gamma[...] = gg
        self.grad_beta[...] = gb
        return gx


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False):
        self._x = x
        return relu(x)

    def backward(self, grad):
        return relu_backward(self._x, grad)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, out_features: int, rng: Optional[np.random.Generator] = None,
                 init: str = "he_normal"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = init_weight(rng, (out_features, in_features), in_features, init)
        self.bias = np.zeros(out_features)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def grads(self):
        return {"weight": self.grad_weight, "bias": self.grad_bias}

    def forward(self, x, training=False):
        self._x = x
        return dense_forward(x, self)

    def backward(self, grad):
        gx, gw, gb = dense_backward(self._x, self, grad)
        self.grad_weight[...] = gw
        self.grad_bias[...] = gb
        return gx


class Softmax(Layer):
    """Probability head; training goes through ``softmax_xent`` on the logits instead."""

    kind = "softmax"

    def forward(self, x, training=False):
        return softmax(x)


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)

    def children(self):
        return self.layers

    def forward(self, x, training=False):
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


def named_tensors(root: Layer, what: str = "params") -> list[tuple[str, np.ndarray]]:
    """Deterministically ordered (name, array) pairs for params, grads or buffers."""
    out = []
    for i, leaf in enumerate(root.walk()):
        for name, arr in getattr(leaf, what)().items():
            out.append((f"{i:03d}.{leaf.kind}.{name}", arr))
    return out


def set_stat_updates(root: Layer, enabled: bool) -> None:
    for leaf in root.walk():
        if isinstance(leaf, BatchNorm2D):
            leaf.update_stats = enabled


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: str
    analytic: float
    numeric: float
    n_checked: int
    tol: float
    n_skipped: int = 0  # probes whose stencil crossed a ReLU kink

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error <= self.tol


def _relu_pattern(network: Layer) -> bytes:
    return b"".join(np.packbits(layer._x > 0).tobytes()
                    for layer in network.walk() if isinstance(layer, ReLU))


def grad_check(network: Layer, x: np.ndarray, labels: np.ndarray, h: float = 1e-5,
               tol: float = 1e-4, n_per_tensor: int = 5, seed: int = 0,
               training: bool = True, check_input: bool = True,
               skip_kinks: bool = True) -> GradCheckReport:
    """Compare backprop gradients of mean softmax cross-entropy with central differences.

    ``network`` maps x to logits. Error is |analytic - numeric| / max(1, |analytic|),
    over a random subset of entries from every parameter tensor (and the input).
    With ``skip_kinks`` a probe whose +-h stencil flips any ReLU on or off is
    not differentiable there; it is counted in ``n_skipped`` and another entry
    of the same tensor is drawn instead. Running statistics are left untouched.
    """
    rng = np.random.default_rng(seed)
    set_stat_updates(network, False)
    try:
        def loss_at() -> float:
            return softmax_xent(network.forward(x, training), labels)[0]

        logits = network.forward(x, training)
        base = _relu_pattern(network)
        _, g = softmax_xent(logits, labels)
        gx = network.backward(g)
        targets = [(n, p, gr.copy()) for (n, p), (_, gr) in
                   zip(named_tensors(network, "params"), named_tensors(network, "grads"))]
        if check_input:
            targets.append(("input", x, gx.copy()))
        worst = GradCheckReport(0.0, "", 0.0, 0.0, 0, tol)
        count = skipped = 0
        for name, arr, grad in targets:
            flat = arr.reshape(-1)
            gflat = grad.reshape(-1)
            done = 0
            for idx in rng.permutation(flat.size):
                if done == n_per_tensor:
                    break
                old = flat[idx]
                flat[idx] = old + h
                up = loss_at()
                kink = _relu_pattern(network) != base
                flat[idx] = old - h
                down = loss_at()
                kink = kink or _relu_pattern(network) != base
                flat[idx] = old
                if skip_kinks and kink:
                    skipped += 1
                    continue
                done += 1
                numeric = (up - down) / (2 * h)
                analytic = float(gflat[idx])
                err = abs(analytic - numeric) / max(1.0, abs(analytic))
                if not np.isfinite(err):
                    err = np.inf
                count += 1
                if err >= worst.max_rel_error or not worst.worst:
                    worst = GradCheckReport(err, f"{name}[{idx}]", analytic, numeric, 0, tol)
        worst.n_checked = count
        worst.n_skipped = skipped
        return worst
    finally:
        set_stat_updates(network, True)


# --------------------------------------------------------------------------
# checkpoint envelope: magic, version, JSON header length, JSON header, blob

MAGIC = b"WFLCKPT\0"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = "<i8" if np.issubdtype(arr.dtype, np.integer) else "<f8"
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    head = dict(header)
    head["arrays"] = entries
    head["sha256"] = hashlib.sha256(blob).hexdigest()
    head_bytes = json.dumps(head, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(head_bytes)))
        fh.write(head_bytes)
        fh.write(blob)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    if not str(path):
        raise FileNotFoundError("empty checkpoint path")
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    start = len(MAGIC) + struct.calcsize("<IQ")
    if len(data) < start:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: corrupt header") from None
    blob = data[start + hlen:]
    if hashlib.sha256(blob).hexdigest() != header.get("sha256"):
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt blob)")
    arrays = {}
    for e in header.pop("arrays"):
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
    header.pop("sha256")
    return header, arrays
