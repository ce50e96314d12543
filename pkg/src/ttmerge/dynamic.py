"""Test-time adaptive merging: per-sample and per-batch drivers, the lambda cache,
and forward-pass accounting.

Cost bookkeeping follows one rule: a model evaluation on one feature vector is a
*sample forward*, an evaluation on a whole batch is a *batch forward*, and every
parameter interpolation is a *merge*.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .coefficient import CoefficientConfig, LambdaRecord, batch_lambda, coefficient_for, coefficients, records_from
from .errors import CorruptionError, StalenessError, ValidationError
from .models import Dataset, forward
from .params import ParameterMap, atomic_write, check_aligned, lerp_params, pack_container, unpack_container
from .probs import argmax, softmax

DEFAULT_BATCH_SIZE = 32
CACHE_MAGIC = b"TTLC"
CACHE_VERSION = 1
_RECORD = struct.Struct("<5d")


@dataclass
class ForwardCounter:
    sample_forwards: int = 0
    batch_forwards: int = 0
    merges: int = 0

    def __add__(self, other: "ForwardCounter") -> "ForwardCounter":
        return ForwardCounter(
            self.sample_forwards + other.sample_forwards,
            self.batch_forwards + other.batch_forwards,
            self.merges + other.merges,
        )

    def as_dict(self) -> dict[str, int]:
        return {"batch_forwards": self.batch_forwards, "merges": self.merges, "sample_forwards": self.sample_forwards}


def _features(batch) -> np.ndarray:
    X = batch.X if isinstance(batch, Dataset) else np.asarray(batch)
    return np.atleast_2d(X)


# -- online drivers -------------------------------------------------------------


def t3_sample_predict(
    theta_pt: ParameterMap,
    theta_ft: ParameterMap,
    x,
    cfg: CoefficientConfig,
    counter: ForwardCounter,
    index: int = 0,
) -> tuple[int, LambdaRecord]:
    """Merge once for a single input and classify it with the merged weights."""
    check_aligned(theta_pt, theta_ft)
    x = np.asarray(x)
    p_pt = softmax(forward(theta_pt, x))
    p_ft = softmax(forward(theta_ft, x))
    counter.sample_forwards += 2
    record = coefficient_for(p_pt, p_ft, cfg, index)
    merged = lerp_params(theta_pt, theta_ft, record.lambda_prime)
    counter.merges += 1
    z = forward(merged, x)
    counter.sample_forwards += 1
    return int(argmax(z)), record


def t3_batch_predict(
    theta_pt: ParameterMap,
    theta_ft: ParameterMap,
    batch,
    cfg: CoefficientConfig,
    counter: ForwardCounter,
    records: list | None = None,
    start: int = 0,
) -> tuple[np.ndarray, float]:
    """One merge per batch at the mean of the per-sample coefficients.

    Per-sample records are appended to ``records`` when a list is given.
    """
    check_aligned(theta_pt, theta_ft)
    X = _features(batch)
    if len(X) == 0:
        raise ValidationError("empty batch")
    p_pt = softmax(forward(theta_pt, X))
    p_ft = softmax(forward(theta_ft, X))
    counter.batch_forwards += 2
    coeffs = coefficients(p_pt, p_ft, cfg)
    lam_bar = batch_lambda(coeffs["lambda_prime"])
    merged = lerp_params(theta_pt, theta_ft, lam_bar)
    counter.merges += 1
    preds = argmax(forward(merged, X))
    counter.batch_forwards += 1
    if records is not None:
        records.extend(records_from(coeffs, start))
    return preds, lam_bar


def ensemble_predict(theta_pt: ParameterMap, theta_ft: ParameterMap, x, counter: ForwardCounter) -> int:
    """Argmax of the mean of the two models' logits for one input."""
    check_aligned(theta_pt, theta_ft)
    z = 0.5 * (forward(theta_pt, x) + forward(theta_ft, x))
    counter.sample_forwards += 2
    return int(argmax(z))


def ensemble_predict_batch(theta_pt: ParameterMap, theta_ft: ParameterMap, batch, counter: ForwardCounter) -> np.ndarray:
    check_aligned(theta_pt, theta_ft)
    X = _features(batch)
    z = 0.5 * (forward(theta_pt, X) + forward(theta_ft, X))
    counter.batch_forwards += 2
    return argmax(z)


def model_predict_batch(theta: ParameterMap, batch, counter: ForwardCounter) -> np.ndarray:
    X = _features(batch)
    counter.batch_forwards += 1
    return argmax(forward(theta, X))


# -- whole-dataset helpers ------------------------------------------------------


def predict_single(theta, data: Dataset, batch_size: int, counter: ForwardCounter) -> np.ndarray:
    return np.concatenate([model_predict_batch(theta, b, counter) for b in data.batches(batch_size)])


def predict_ensemble(theta_pt, theta_ft, data: Dataset, batch_size: int, counter: ForwardCounter) -> np.ndarray:
    return np.concatenate([ensemble_predict_batch(theta_pt, theta_ft, b, counter) for b in data.batches(batch_size)])


def predict_t3(theta_pt, theta_ft, data: Dataset, cfg: CoefficientConfig, counter: ForwardCounter):
    """Sample-wise merging over a dataset; returns (predictions, records)."""
    preds, records = [], []
    for i, x in enumerate(data.X):
        cls, rec = t3_sample_predict(theta_pt, theta_ft, x, cfg, counter, i)
        preds.append(cls)
        records.append(rec)
    return np.asarray(preds, dtype=np.int64), records


def predict_t3_batch(theta_pt, theta_ft, data: Dataset, cfg: CoefficientConfig, batch_size: int, counter: ForwardCounter):
    """Batch-wise merging; returns (predictions, records, batch means)."""
    preds, records, means = [], [], []
    for b, batch in enumerate(data.batches(batch_size)):
        p, lam = t3_batch_predict(theta_pt, theta_ft, batch, cfg, counter, records, b * batch_size)
        preds.append(p)
        means.append(lam)
    return np.concatenate(preds), records, means


# -- lambda cache -----------------------------------------------------------------


@dataclass
class LambdaCache:
    per_sample: list[LambdaRecord]
    per_batch_means: list[float]
    batch_size: int
    config_digest: str

    @property
    def n(self) -> int:
        return len(self.per_sample)

    def check(self, cfg: CoefficientConfig | None = None, n: int | None = None) -> None:
        if cfg is not None and cfg.digest() != self.config_digest:
            raise StalenessError("lambda cache was built with a different coefficient config")
        if n is not None and n != self.n:
            raise StalenessError(f"lambda cache covers {self.n} samples, dataset has {n}")

    def to_bytes(self) -> bytes:
        header = {"batch_size": self.batch_size, "n": self.n, "config_digest": self.config_digest}
        body = b"".join(_RECORD.pack(*r.as_tuple()) for r in self.per_sample)
        body += np.asarray(self.per_batch_means, dtype="<f8").tobytes()
        return pack_container(CACHE_MAGIC, CACHE_VERSION, header, body)

    def save(self, path) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "LambdaCache":
        header, body = unpack_container(blob, CACHE_MAGIC, CACHE_VERSION)
        try:
            n, bs, digest = int(header["n"]), int(header["batch_size"]), str(header["config_digest"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptionError("cache header needs n, batch_size, config_digest") from exc
        if bs < 1:
            raise CorruptionError("cache batch_size must be >= 1")
        n_batches = -(-n // bs)
        if len(body) != n * _RECORD.size + 8 * n_batches:
            raise CorruptionError(f"cache body has {len(body)} bytes, expected {n * _RECORD.size + 8 * n_batches}")
        records = [LambdaRecord(i, *_RECORD.unpack_from(body, i * _RECORD.size)) for i in range(n)]
        means = np.frombuffer(body[n * _RECORD.size :], dtype="<f8").tolist()
        return cls(records, means, bs, digest)

    @classmethod
    def load(cls, path, cfg: CoefficientConfig | None = None, n: int | None = None) -> "LambdaCache":
        with open(path, "rb") as fh:
            cache = cls.from_bytes(fh.read())
        cache.check(cfg, n)
        return cache


def precompute_lambdas(
    theta_pt: ParameterMap,
    theta_ft: ParameterMap,
    data: Dataset,
    cfg: CoefficientConfig,
    batch_size: int = DEFAULT_BATCH_SIZE,
) -> LambdaCache:
    """Offline scan: per-sample records and per-batch means for later single-pass inference."""
    check_aligned(theta_pt, theta_ft)
    records, means = [], []
    for b, batch in enumerate(data.batches(batch_size)):
        p_pt = softmax(forward(theta_pt, batch.X))
        p_ft = softmax(forward(theta_ft, batch.X))
        recs = records_from(coefficients(p_pt, p_ft, cfg), b * batch_size)
        records.extend(recs)
        means.append(batch_lambda([r.lambda_prime for r in recs]))
    return LambdaCache(records, means, batch_size, cfg.digest())


def predict_with_cache(
    theta_pt: ParameterMap,
    theta_ft: ParameterMap,
    data: Dataset,
    cache: LambdaCache,
    mode: str,
    counter: ForwardCounter,
    cfg: CoefficientConfig | None = None,
) -> np.ndarray:
    """Single-pass inference from precomputed coefficients.

    ``mode="sample"`` merges per input, ``mode="batch"`` merges once per cached batch.
    """
    check_aligned(theta_pt, theta_ft)
    cache.check(cfg, len(data))
    if mode == "sample":
        preds = []
        for rec, x in zip(cache.per_sample, data.X):
            merged = lerp_params(theta_pt, theta_ft, rec.lambda_prime)
            counter.merges += 1
            preds.append(int(argmax(forward(merged, x))))
            counter.sample_forwards += 1
        return np.asarray(preds, dtype=np.int64)
    if mode == "batch":
        out = []
        for lam, batch in zip(cache.per_batch_means, data.batches(cache.batch_size)):
            merged = lerp_params(theta_pt, theta_ft, lam)
            counter.merges += 1
            out.append(model_predict_batch(merged, batch, counter))
        return np.concatenate(out)
    raise ValidationError(f"unknown cache mode {mode!r}")
