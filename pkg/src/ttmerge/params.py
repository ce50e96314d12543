"""Named float32 tensors, the checkpoint file format, and static weight-space merges.

Checkpoint layout (all integers little-endian)::

    b"TTMC" | u32 version (=1) | u64 header length | JSON header | data region

The header maps each tensor name, in lexicographic order, to
``{"dtype": "f32", "shape": [...], "offset": int, "nbytes": int}`` with offsets
relative to the start of the data region.  Tensors are packed back to back
with no padding.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from collections.abc import Iterator, Mapping

import numpy as np

from .errors import AlignmentError, CorruptionError, DomainError, FormatError, ValidationError

CHECKPOINT_MAGIC = b"TTMC"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


def _freeze(value) -> np.ndarray:
    arr = np.array(value, dtype="<f4", copy=True, order="C")
    if arr.ndim == 0:
        raise ValidationError("tensors need at least one dimension")
    if 0 in arr.shape:
        raise ValidationError(f"tensor shape {list(arr.shape)} has an empty dimension")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("tensor contains non-finite values")
    arr.flags.writeable = False
    return arr


class ParameterMap(Mapping):
    """Immutable, name-sorted mapping from tensor name to float32 array."""

    __slots__ = ("_tensors",)

    def __init__(self, tensors: Mapping[str, np.ndarray] | None = None):
        tensors = tensors or {}
        self._tensors = {name: _freeze(tensors[name]) for name in sorted(tensors)}

    @classmethod
    def _trusted(cls, tensors: dict[str, np.ndarray]) -> "ParameterMap":
        # skips the copy for arrays this module just produced
        obj = cls.__new__(cls)
        for arr in tensors.values():
            if not np.all(np.isfinite(arr)):
                raise ValidationError("merge produced non-finite values")
            arr.flags.writeable = False
        obj._tensors = {name: tensors[name] for name in sorted(tensors)}
        return obj

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}: {list(v.shape)}" for k, v in self._tensors.items())
        return f"ParameterMap({{{shapes}}})"

    def __eq__(self, other) -> bool:
        """Bitwise equality of names, shapes and payloads."""
        if not isinstance(other, ParameterMap):
            return NotImplemented
        return list(self) == list(other) and all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.values(), other.values())
        )

    __hash__ = None

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._tensors.items()}

    def flatten(self) -> np.ndarray:
        """All tensors concatenated in name order, as float64."""
        if not self._tensors:
            return np.zeros(0)
        return np.concatenate([v.astype(np.float64).ravel() for v in self._tensors.values()])

    def unflatten(self, vector: np.ndarray) -> "ParameterMap":
        """Split a flat vector back into this map's layout."""
        out, start = {}, 0
        for name, arr in self._tensors.items():
            stop = start + arr.size
            out[name] = np.asarray(vector[start:stop]).reshape(arr.shape).astype("<f4")
            start = stop
        if start != len(vector):
            raise AlignmentError(f"vector length {len(vector)} != parameter count {start}")
        return ParameterMap._trusted(out)


def check_aligned(a: ParameterMap, b: ParameterMap) -> None:
    if list(a) != list(b):
        diff = sorted(set(a).symmetric_difference(b))
        raise AlignmentError(f"parameter names differ: {diff}")
    for name in a:
        if a[name].shape != b[name].shape:
            raise AlignmentError(f"{name}: shape {a[name].shape} != {b[name].shape}")


# -- checkpoint IO ------------------------------------------------------------


def atomic_write(path: str | os.PathLike, payload: bytes) -> None:
    """Write bytes via a sibling temp file and rename, so readers never see partial files."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def pack_container(magic: bytes, version: int, header: dict, body: bytes) -> bytes:
    """Shared framing of every binary file in this package."""
    text = json.dumps(header, separators=(",", ":"), sort_keys=False).encode("utf-8")
    return _PREFIX.pack(magic, version, len(text)) + text + body


def unpack_container(blob: bytes, magic: bytes, version: int) -> tuple[dict, memoryview]:
    if len(blob) < _PREFIX.size:
        raise FormatError("file too short for header prefix")
    got_magic, got_version, hlen = _PREFIX.unpack_from(blob)
    if got_magic != magic:
        raise FormatError(f"bad magic {got_magic!r}, expected {magic!r}")
    if got_version != version:
        raise FormatError(f"unsupported version {got_version}")
    start = _PREFIX.size
    if start + hlen > len(blob):
        raise CorruptionError("header length runs past end of file")
    try:
        header = json.loads(bytes(blob[start : start + hlen]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unparsable header: {exc}") from exc
    if not isinstance(header, dict):
        raise FormatError("header must be a JSON object")
    return header, memoryview(blob)[start + hlen :]


def checkpoint_bytes(params: ParameterMap) -> bytes:
    header, chunks, offset = {}, [], 0
    for name, arr in params.items():
        raw = arr.astype("<f4").tobytes(order="C")
        header[name] = {"dtype": "f32", "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    return pack_container(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, header, b"".join(chunks))


def save_checkpoint(params: ParameterMap, path) -> None:
    atomic_write(path, checkpoint_bytes(params))


def parse_checkpoint(blob: bytes) -> ParameterMap:
    header, data = unpack_container(blob, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    tensors, expected_offset = {}, 0
    for name, info in header.items():
        try:
            dtype, shape = info["dtype"], [int(s) for s in info["shape"]]
            offset, nbytes = int(info["offset"]), int(info["nbytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{name}: malformed tensor entry") from exc
        if dtype != "f32":
            raise FormatError(f"{name}: unsupported dtype {dtype!r}")
        if not shape or any(s <= 0 for s in shape):
            raise CorruptionError(f"{name}: invalid shape {shape}")
        if math.prod(shape) * 4 != nbytes:
            raise CorruptionError(f"{name}: shape {shape} needs {math.prod(shape) * 4} bytes, header says {nbytes}")
        if offset != expected_offset or offset + nbytes > len(data):
            raise CorruptionError(f"{name}: offset {offset} inconsistent with packed layout")
        expected_offset += nbytes
        arr = np.frombuffer(data[offset : offset + nbytes], dtype="<f4").reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"{name}: non-finite values in checkpoint")
        tensors[name] = arr
    if list(header) != sorted(header):
        raise FormatError("tensor names are not in lexicographic order")
    if expected_offset != len(data):
        raise CorruptionError(f"data region has {len(data)} bytes, header accounts for {expected_offset}")
    return ParameterMap(tensors)


def load_checkpoint(path) -> ParameterMap:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


# -- static merges --------------------------------------------------------------


def _combine(a: ParameterMap, b: ParameterMap, fn) -> ParameterMap:
    check_aligned(a, b)
    out = {}
    for name in a:
        x = a[name].astype(np.float64)
        y = b[name].astype(np.float64)
        out[name] = fn(x, y).astype("<f4")
    return ParameterMap._trusted(out)


def lerp_params(theta_pt: ParameterMap, theta_ft: ParameterMap, lam: float) -> ParameterMap:
    """Elementwise ``(1 - lam) * theta_pt + lam * theta_ft``.

    Arithmetic is done in float64 and rounded once, so ``lam`` of exactly 0 or 1
    returns the corresponding endpoint bit for bit.
    """
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise DomainError(f"interpolation weight {lam} outside [0, 1]")
    return _combine(theta_pt, theta_ft, lambda x, y: (1.0 - lam) * x + lam * y)


def soup(theta_pt: ParameterMap, theta_ft: ParameterMap) -> ParameterMap:
    return lerp_params(theta_pt, theta_ft, 0.5)


SLERP_MIN_ANGLE = 1e-7


def slerp_params(theta1: ParameterMap, theta2: ParameterMap, t: float) -> ParameterMap:
    """Spherical interpolation of the two maps seen as single flat vectors.

    Falls back to :func:`lerp_params` when the angle between them is below
    ``SLERP_MIN_ANGLE`` radians.
    """
    check_aligned(theta1, theta2)
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"slerp t={t} outside [0, 1]")
    v1, v2 = theta1.flatten(), theta2.flatten()
    n1, n2 = np.linalg.norm(v1), np.linalg.norm(v2)
    if n1 == 0.0 or n2 == 0.0:
        raise DomainError("slerp needs two nonzero parameter vectors")
    cos = float(np.clip(np.dot(v1, v2) / (n1 * n2), -1.0, 1.0))
    omega = math.acos(cos)
    if omega < SLERP_MIN_ANGLE:
        return lerp_params(theta1, theta2, t)
    s = math.sin(omega)
    merged = (math.sin((1.0 - t) * omega) / s) * v1 + (math.sin(t * omega) / s) * v2
    return theta1.unflatten(merged)


def task_arithmetic(theta_pt: ParameterMap, theta_ft: ParameterMap, scale: float = 1.0) -> ParameterMap:
    """``theta_pt + scale * (theta_ft - theta_pt)``.

    With one task vector this equals ``lerp_params(theta_pt, theta_ft, scale)`` up to
    rounding; ``scale`` is not restricted to [0, 1] here.
    """
    scale = float(scale)
    if not math.isfinite(scale):
        raise DomainError("task arithmetic scale must be finite")
    return _combine(theta_pt, theta_ft, lambda x, y: x + scale * (y - x))


def trim_mask(delta: np.ndarray, k: float) -> np.ndarray:
    """Boolean mask keeping the ``ceil(k * n)`` largest-magnitude entries.

    Ties at the boundary go to the lower flat index.
    """
    flat = np.abs(delta.ravel())
    keep = min(flat.size, math.ceil(k * flat.size))
    # lexsort: last key is primary -> sort by -|d|, then by index
    order = np.lexsort((np.arange(flat.size), -flat))
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:keep]] = True
    return mask.reshape(delta.shape)


def ties_merge(theta_pt: ParameterMap, theta_ft: ParameterMap, k: float = 0.2, scale: float = 1.0) -> ParameterMap:
    """Trim-elect-merge with a single task vector.

    Sign election over one task vector is the identity, so only the per-tensor
    magnitude trim remains.
    """
    k = float(k)
    if not 0.0 < k <= 1.0:
        raise DomainError(f"TIES keep fraction k={k} outside (0, 1]")
    check_aligned(theta_pt, theta_ft)
    out = {}
    for name in theta_pt:
        base = theta_pt[name].astype(np.float64)
        delta = theta_ft[name].astype(np.float64) - base
        if k == 1.0 and scale == 1.0:
            out[name] = np.array(theta_ft[name])
            continue
        kept = np.where(trim_mask(delta, k), delta, 0.0)
        out[name] = (base + scale * kept).astype("<f4")
    return ParameterMap._trusted(out)


def mixup_merge(theta_pt: ParameterMap, theta_ft: ParameterMap, rng, alpha: float = 0.5) -> tuple[ParameterMap, float]:
    """Lerp with a coefficient drawn once from ``Beta(alpha, alpha)``."""
    if not alpha > 0:
        raise DomainError(f"mixup alpha={alpha} must be positive")
    check_aligned(theta_pt, theta_ft)
    lam = float(rng.beta(alpha, alpha))
    return lerp_params(theta_pt, theta_ft, lam), lam
