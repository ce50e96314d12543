"""Probability-space quantities over the last axis of an array.

Every function accepts a single vector of length C or a stack ``(..., C)`` and
reduces over the final axis, so a row gives the same bits whether it is
evaluated alone or inside a batch.  Logarithms are natural (nats) and carry a
shared stabilizer ``EPS``.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError

EPS = 1e-12
SIMPLEX_TOL = 1e-6


def _as_simplex(p, name: str = "p") -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 0 or p.shape[-1] < 2:
        raise DomainError(f"{name} needs at least two classes")
    if not np.all(np.isfinite(p)) or np.any(p < -SIMPLEX_TOL) or np.any(p > 1 + SIMPLEX_TOL):
        raise DomainError(f"{name} has entries outside [0, 1]")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > SIMPLEX_TOL):
        raise DomainError(f"{name} does not sum to 1")
    return p


def _pair(p, q) -> tuple[np.ndarray, np.ndarray]:
    p, q = _as_simplex(p, "p"), _as_simplex(q, "q")
    if p.shape != q.shape:
        raise DomainError(f"shape mismatch {p.shape} vs {q.shape}")
    return p, q


def softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise DomainError("logits must be finite")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def entropy(p, eps: float = EPS):
    p = _as_simplex(p)
    return -(p * np.log(p + eps)).sum(axis=-1)


def kl_divergence(p, q, eps: float = EPS):
    p, q = _pair(p, q)
    return (p * np.log((p + eps) / (q + eps))).sum(axis=-1)


def js_divergence(p, q, eps: float = EPS):
    """Mean KL of each distribution to their midpoint; bounded by ln 2."""
    p, q = _pair(p, q)
    m = 0.5 * (p + q)
    return 0.5 * (kl_divergence(p, m, eps) + kl_divergence(q, m, eps))


def js_via_entropy(p, q, eps: float = EPS):
    """Same quantity as :func:`js_divergence`, written as H(mixture) - mean entropy."""
    p, q = _pair(p, q)
    m = 0.5 * (p + q)
    return entropy(m, eps) - 0.5 * (entropy(p, eps) + entropy(q, eps))


def entropy_ratio(p_pt, p_ft, eps: float = EPS):
    """Share of the expert's entropy in the summed entropy; 0.5 if both are ~0."""
    p_pt, p_ft = _pair(p_pt, p_ft)
    h_pt, h_ft = entropy(p_pt, eps), entropy(p_ft, eps)
    total = h_pt + h_ft
    degenerate = (h_pt < eps) & (h_ft < eps)
    ratio = np.divide(h_ft, total, out=np.full_like(total, 0.5), where=~degenerate)
    return np.clip(ratio, 0.0, 1.0)


def xentropy_ratio(p_pt, p_ft, y, eps: float = EPS):
    """Label-aware analogue of :func:`entropy_ratio`. Diagnostics only."""
    p_pt, p_ft = _pair(p_pt, p_ft)
    y = np.asarray(y)
    n_classes = p_pt.shape[-1]
    if np.any(y < 0) or np.any(y >= n_classes):
        raise DomainError(f"label out of range [0, {n_classes})")
    y = y[..., None]
    l_pt = -np.log(np.take_along_axis(p_pt, y, axis=-1)[..., 0] + eps)
    l_ft = -np.log(np.take_along_axis(p_ft, y, axis=-1)[..., 0] + eps)
    total = l_pt + l_ft
    return np.divide(l_ft, total, out=np.full_like(total, 0.5), where=total > 0)


def confidence_ratio(p_pt, p_ft):
    p_pt, p_ft = _pair(p_pt, p_ft)
    c_pt, c_ft = p_pt.max(axis=-1), p_ft.max(axis=-1)
    return c_ft / (c_pt + c_ft)


def argmax(scores) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest class index."""
    return np.asarray(scores).argmax(axis=-1)
