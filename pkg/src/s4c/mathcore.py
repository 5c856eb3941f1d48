"""Dense double-precision kernels shared by the models, drafter and verifier.

Matrices and distributions are plain ``numpy.float64`` arrays; the helpers
below validate shapes and raise :class:`~s4c.errors.ShapeError` on mismatch.
"""

from __future__ import annotations

import numpy as np

from .errors import ArgumentError, ShapeError

PROB_FLOOR = 1e-12


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with an explicit inner-dimension check."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Tempered softmax over the last axis.

    ``temperature == 0`` returns the greedy one-hot (ties go to the lowest id).
    Works on a single logit vector or on a stack of rows.
    """
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError("softmax needs a non-empty logit vector")
    if temperature < 0:
        raise ArgumentError(f"temperature must be >= 0, got {temperature}")
    if temperature == 0:
        out = np.zeros_like(x)
        idx = np.argmax(x, axis=-1)
        np.put_along_axis(out, np.expand_dims(idx, -1), 1.0, axis=-1)
        return out
    z = (x - x.max(axis=-1, keepdims=True)) / temperature
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def temper(probs, temperature: float) -> np.ndarray:
    """Apply a sampling temperature to an explicit distribution (p ** (1/T), renormalised)."""
    p = np.asarray(probs, dtype=np.float64)
    if temperature < 0:
        raise ArgumentError(f"temperature must be >= 0, got {temperature}")
    if temperature == 1.0:
        return p.copy()
    if temperature == 0:
        out = np.zeros_like(p)
        np.put_along_axis(out, np.expand_dims(np.argmax(p, axis=-1), -1), 1.0, axis=-1)
        return out
    w = np.power(p, 1.0 / temperature)
    return w / w.sum(axis=-1, keepdims=True)


def top_k(dist, k: int) -> list[tuple[int, float]]:
    """The ``k`` most probable tokens, highest first, ties by ascending id."""
    p = np.asarray(dist, dtype=np.float64)
    if p.ndim != 1:
        raise ShapeError("top_k expects a single distribution")
    if not 1 <= k <= p.shape[0]:
        raise ArgumentError(f"k={k} outside [1, {p.shape[0]}]")
    order = np.argsort(-p, kind="stable")[:k]
    return [(int(i), float(p[i])) for i in order]


def argmax(dist) -> int:
    return int(np.argmax(dist))


def rms_normalize(x, gain, epsilon: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    if x.shape[-1] != gain.shape[-1]:
        raise ShapeError(f"gain length {gain.shape[-1]} != feature length {x.shape[-1]}")
    if epsilon <= 0:
        raise ArgumentError("epsilon must be positive")
    scale = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + epsilon)
    return x * scale * gain


def check_prob_dist(p, atol: float = 1e-12) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ShapeError("a distribution is a non-empty vector")
    if not np.all(np.isfinite(p)) or p.min() < 0 or p.max() > 1:
        raise ArgumentError("probabilities must lie in [0, 1]")
    if abs(p.sum() - 1.0) > atol:
        raise ArgumentError(f"probabilities sum to {p.sum()!r}, not 1")
    return p
