"""Interpolation coefficients derived from the two models' predictive distributions.

``lambda`` always weights the expert: the merged parameters are
``(1 - lambda) * theta_pt + lambda * theta_ft``.
"""

from __future__ import annotations

import hashlib
import json
import statistics
import re
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import probs
from .errors import DomainError, ValidationError

POLICIES = ("js_sigmoid", "entropy_ratio", "confidence_ratio")
DIRECTIONS = ("per_eq10", "inverted")
_FIXED = re.compile(r"^fixed\(([^)]+)\)$")
JSON_KEYS = ("lambda_min", "lambda_max", "delta", "tau_pt", "tau_ft", "policy", "direction")


@dataclass(frozen=True)
class CoefficientConfig:
    lambda_min: float = 0.0
    lambda_max: float = 1.0
    delta: float = 0.5
    tau_pt: float = 0.05
    tau_ft: float = 0.05
    policy: str = "js_sigmoid"
    direction: str = "per_eq10"
    sigmoid_gain: float = 1.0
    sigmoid_center: float = 0.0
    eps: float = probs.EPS

    def __post_init__(self):
        if not (0.0 <= self.lambda_min <= self.lambda_max <= 1.0):
            raise ValidationError(f"need 0 <= lambda_min <= lambda_max <= 1, got {self.lambda_min}, {self.lambda_max}")
        if not 0.0 <= self.delta <= 1.0:
            raise ValidationError(f"delta={self.delta} outside [0, 1]")
        if self.tau_pt < 0 or self.tau_ft < 0:
            raise ValidationError("entropy thresholds must be non-negative")
        if self.direction not in DIRECTIONS:
            raise ValidationError(f"direction must be one of {DIRECTIONS}")
        if self.policy not in POLICIES and self.fixed_alpha is None:
            raise ValidationError(f"unknown policy {self.policy!r}")

    @property
    def fixed_alpha(self) -> float | None:
        m = _FIXED.match(self.policy)
        if not m:
            return None
        try:
            alpha = float(m.group(1))
        except ValueError:
            raise ValidationError(f"bad fixed coefficient in {self.policy!r}") from None
        if not 0.0 <= alpha <= 1.0:
            raise ValidationError(f"fixed coefficient {alpha} outside [0, 1]")
        return alpha

    @classmethod
    def fixed(cls, alpha: float, **kw) -> "CoefficientConfig":
        return cls(policy=f"fixed({float(alpha)!r})", **kw)

    def to_json(self) -> dict:
        """The config block; the sigmoid hook and eps only appear when non-default."""
        out = {k: getattr(self, k) for k in JSON_KEYS}
        default = CoefficientConfig()
        for extra in ("sigmoid_gain", "sigmoid_center", "eps"):
            if getattr(self, extra) != getattr(default, extra):
                out[extra] = getattr(self, extra)
        return out

    @classmethod
    def from_json(cls, block: dict) -> "CoefficientConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(block) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**block)

    def digest(self) -> str:
        text = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


@dataclass(frozen=True)
class LambdaRecord:
    sample_index: int
    I: float
    H_pt: float
    H_ft: float
    lambda_raw: float
    lambda_prime: float

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.I, self.H_pt, self.H_ft, self.lambda_raw, self.lambda_prime)


def _sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


def lambda_from_mi(I, cfg: CoefficientConfig = CoefficientConfig()):
    I = np.asarray(I, dtype=np.float64)
    if np.any(I < -1e-9):
        raise DomainError("divergence must be non-negative")
    s = _sigmoid(cfg.sigmoid_gain * (I - cfg.sigmoid_center))
    return cfg.lambda_min + (cfg.lambda_max - cfg.lambda_min) * s


def extrapolate(lam, H_pt, H_ft, cfg: CoefficientConfig = CoefficientConfig()):
    """Nudge lambda by ``delta`` toward a model whose entropy is below its threshold.

    The expert check runs first, so it wins when both models are that confident.
    """
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam < 0.0) or np.any(lam > 1.0):
        raise DomainError("lambda outside [0, 1]")
    H_pt = np.asarray(H_pt, dtype=np.float64)
    H_ft = np.asarray(H_ft, dtype=np.float64)
    return np.where(
        H_ft < cfg.tau_ft,
        np.minimum(lam + cfg.delta, 1.0),
        np.where(H_pt < cfg.tau_pt, np.maximum(lam - cfg.delta, 0.0), lam),
    )


def batch_lambda(lambda_primes) -> float:
    """Arithmetic mean, rounded once from the exact sum (order independent)."""
    values = [float(v) for v in np.asarray(lambda_primes, dtype=np.float64).ravel()]
    if not values:
        raise DomainError("batch_lambda of an empty batch")
    if any(not 0.0 <= v <= 1.0 for v in values):
        raise DomainError("batch member outside [0, 1]")
    return float(statistics.mean(values))


def dawin_lambda(p_pt, p_ft, eps: float = probs.EPS):
    return probs.entropy_ratio(p_pt, p_ft, eps)


def coefficients(p_pt, p_ft, cfg: CoefficientConfig = CoefficientConfig()) -> dict[str, np.ndarray]:
    """Vectorized core of :func:`coefficient_for` over rows of ``p_pt``/``p_ft``."""
    p_pt = np.atleast_2d(np.asarray(p_pt, dtype=np.float64))
    p_ft = np.atleast_2d(np.asarray(p_ft, dtype=np.float64))
    I = probs.js_divergence(p_pt, p_ft, cfg.eps)
    H_pt = probs.entropy(p_pt, cfg.eps)
    H_ft = probs.entropy(p_ft, cfg.eps)
    alpha = cfg.fixed_alpha
    if alpha is not None:
        raw = np.full(I.shape, alpha)
        prime = raw
    elif cfg.policy == "entropy_ratio":
        raw = prime = probs.entropy_ratio(p_pt, p_ft, cfg.eps)
    elif cfg.policy == "confidence_ratio":
        raw = prime = probs.confidence_ratio(p_pt, p_ft)
    else:
        raw = lambda_from_mi(np.maximum(I, 0.0), cfg)
        prime = extrapolate(raw, H_pt, H_ft, cfg)
    if cfg.direction == "inverted":
        prime = 1.0 - prime
    return {"I": I, "H_pt": H_pt, "H_ft": H_ft, "lambda_raw": raw, "lambda_prime": prime}


def records_from(coeffs: dict[str, np.ndarray], start: int = 0) -> list[LambdaRecord]:
    n = len(coeffs["I"])
    return [
        LambdaRecord(
            start + i,
            float(coeffs["I"][i]),
            float(coeffs["H_pt"][i]),
            float(coeffs["H_ft"][i]),
            float(coeffs["lambda_raw"][i]),
            float(coeffs["lambda_prime"][i]),
        )
        for i in range(n)
    ]


def coefficient_for(p_pt, p_ft, cfg: CoefficientConfig = CoefficientConfig(), sample_index: int = 0) -> LambdaRecord:
    return records_from(coefficients(p_pt, p_ft, cfg), sample_index)[0]
