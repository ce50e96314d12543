"""Desk-scale classifiers: linear softmax and one-hidden-layer ReLU MLP.

Parameters live in a :class:`ParameterMap` under ``linear.W``/``linear.b`` or
``mlp.W1``/``mlp.b1``/``mlp.W2``/``mlp.b2``.  Inference runs in float64 on the
stored float32 weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CorruptionError, DivergenceError, DomainError, ValidationError
from .params import ParameterMap, atomic_write, pack_container, unpack_container
from .probs import softmax

ARCHES = ("linear", "mlp")
DATASET_MAGIC = b"TTDS"
DATASET_VERSION = 1


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    c: int
    split: str = "test"

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype="<f4")
        self.y = np.ascontiguousarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or len(self.X) < 1:
            raise ValidationError("dataset needs a non-empty [N, D] feature matrix")
        if self.y.shape != (len(self.X),):
            raise ValidationError(f"labels shape {self.y.shape} does not match N={len(self.X)}")
        if self.c < 2 or np.any(self.y < 0) or np.any(self.y >= self.c):
            raise ValidationError(f"labels must lie in [0, {self.c})")
        if not np.all(np.isfinite(self.X)):
            raise ValidationError("non-finite features")
        if self.split not in ("train", "val", "test"):
            raise ValidationError(f"unknown split tag {self.split!r}")

    def __len__(self) -> int:
        return len(self.X)

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def slice(self, start: int, stop: int) -> "Dataset":
        return Dataset(self.X[start:stop], self.y[start:stop], self.c, self.split)

    def batches(self, batch_size: int):
        """Contiguous batches in dataset order; the last one may be short."""
        if batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        for start in range(0, len(self), batch_size):
            yield self.slice(start, start + batch_size)

    def to_bytes(self) -> bytes:
        header = {"n": len(self), "d": self.d, "c": int(self.c)}
        body = self.X.astype("<f4").tobytes() + self.y.astype("<u4").tobytes()
        return pack_container(DATASET_MAGIC, DATASET_VERSION, header, body)

    def save(self, path) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes, split: str = "test") -> "Dataset":
        header, body = unpack_container(blob, DATASET_MAGIC, DATASET_VERSION)
        try:
            n, d, c = int(header["n"]), int(header["d"]), int(header["c"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptionError("dataset header needs integer n, d, c") from exc
        if len(body) != 4 * n * d + 4 * n:
            raise CorruptionError(f"dataset body has {len(body)} bytes, expected {4 * n * d + 4 * n}")
        X = np.frombuffer(body[: 4 * n * d], dtype="<f4").reshape(n, d)
        y = np.frombuffer(body[4 * n * d :], dtype="<u4")
        return cls(X, y, c, split)

    @classmethod
    def load(cls, path, split: str = "test") -> "Dataset":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), split)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    epochs: int = 100
    batch_size: int = 64
    l2: float = 0.0


def arch_of(params) -> str:
    names = set(params)
    if names == {"linear.W", "linear.b"}:
        return "linear"
    if names == {"mlp.W1", "mlp.b1", "mlp.W2", "mlp.b2"}:
        return "mlp"
    raise ValidationError(f"unrecognized parameter layout {sorted(names)}")


def _dense(X: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Broadcast-and-reduce instead of BLAS so each row's bits do not depend
    # on which other rows share the call.
    return (X[:, None, :] * W[None, :, :]).sum(axis=-1) + b


def forward(params, x) -> np.ndarray:
    """Logits for one feature vector ``[D]`` or a batch ``[N, D]``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    p = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    arch = arch_of(p)
    d_in = p["linear.W"].shape[1] if arch == "linear" else p["mlp.W1"].shape[1]
    if X.ndim != 2 or X.shape[1] != d_in:
        raise DomainError(f"feature dimension {X.shape[-1]} != model input {d_in}")
    if arch == "linear":
        z = _dense(X, p["linear.W"], p["linear.b"])
    else:
        h = np.maximum(_dense(X, p["mlp.W1"], p["mlp.b1"]), 0.0)
        z = _dense(h, p["mlp.W2"], p["mlp.b2"])
    return z[0] if single else z


def init_params(arch: str, d: int, c: int, rng, hidden: int = 32) -> dict[str, np.ndarray]:
    """Uniform(-a, a) weights with a = sqrt(6 / (fan_in + fan_out)); zero biases."""

    def glorot(fan_out, fan_in):
        a = math.sqrt(6.0 / (fan_in + fan_out))
        return a * (2.0 * rng.uniform((fan_out, fan_in)) - 1.0)

    if arch == "linear":
        return {"linear.W": glorot(c, d), "linear.b": np.zeros(c)}
    if arch == "mlp":
        return {
            "mlp.W1": glorot(hidden, d),
            "mlp.b1": np.zeros(hidden),
            "mlp.W2": glorot(c, hidden),
            "mlp.b2": np.zeros(c),
        }
    raise ValidationError(f"unknown architecture {arch!r}")


def loss_and_grad(p: dict[str, np.ndarray], X: np.ndarray, y: np.ndarray, l2: float = 0.0):
    """Mean cross-entropy plus ``0.5*l2*||W||^2`` over weight matrices, and its gradient."""
    m = len(X)
    arch = arch_of(p)
    if arch == "linear":
        z = X @ p["linear.W"].T + p["linear.b"]
    else:
        pre = X @ p["mlp.W1"].T + p["mlp.b1"]
        h = np.maximum(pre, 0.0)
        z = h @ p["mlp.W2"].T + p["mlp.b2"]
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_norm - shifted[np.arange(m), y]))
    G = softmax(z)
    G[np.arange(m), y] -= 1.0
    G /= m
    weights = [k for k in p if ".W" in k]
    loss += 0.5 * l2 * sum(float(np.sum(p[k] ** 2)) for k in weights)
    if arch == "linear":
        grads = {"linear.W": G.T @ X, "linear.b": G.sum(axis=0)}
    else:
        dh = (G @ p["mlp.W2"]) * (pre > 0)
        grads = {
            "mlp.W2": G.T @ h,
            "mlp.b2": G.sum(axis=0),
            "mlp.W1": dh.T @ X,
            "mlp.b1": dh.sum(axis=0),
        }
    for k in weights:
        grads[k] = grads[k] + l2 * p[k]
    return loss, grads


def _fit(p, data: Dataset, hyper: TrainConfig, rng, trace):
    if len(data) == 0:
        raise ValidationError("cannot train on an empty dataset")
    if hyper.batch_size < 1 or hyper.epochs < 0:
        raise ValidationError("need batch_size >= 1 and epochs >= 0")
    X = data.X.astype(np.float64)
    y = data.y
    # overflow is reported as DivergenceError below, not as a warning
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(hyper.epochs):
            order = rng.permutation(len(X))
            for start in range(0, len(X), hyper.batch_size):
                idx = order[start : start + hyper.batch_size]
                loss, grads = loss_and_grad(p, X[idx], y[idx], hyper.l2)
                if not math.isfinite(loss):
                    raise DivergenceError("training loss became non-finite; lower the learning rate")
                for k in p:
                    p[k] = p[k] - hyper.lr * grads[k]
            if trace is not None:
                trace.append(loss_and_grad(p, X, y, hyper.l2)[0])
    f32_max = float(np.finfo(np.float32).max)
    if any(not np.all(np.abs(v) <= f32_max) for v in p.values()):
        raise DivergenceError("weights overflowed; lower the learning rate")
    return ParameterMap(p)


def train(data: Dataset, hyper: TrainConfig, rng, arch: str = "linear", hidden: int = 32, trace=None) -> ParameterMap:
    """Shuffled mini-batch gradient descent from a fresh initialization."""
    p = init_params(arch, data.d, data.c, rng, hidden)
    if hyper.epochs == 0:
        return ParameterMap(p)
    return _fit(p, data, hyper, rng, trace)


def finetune(init: ParameterMap, data: Dataset, hyper: TrainConfig, rng, trace=None) -> ParameterMap:
    """Same loop as :func:`train` starting from ``init``."""
    arch_of(init)
    p = {k: v.astype(np.float64) for k, v in init.items()}
    return _fit(p, data, hyper, rng, trace)


def accuracy(params, data: Dataset) -> float:
    return float(np.mean(forward(params, data.X).argmax(axis=1) == data.y))
