"""Dense linear algebra and probability primitives (float64 throughout)."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, InvalidTemperatureError

DTYPE = np.float64
PROB_FLOOR = 1e-12


def make_rng(seed: int) -> np.random.Generator:
    """Return an independent generator for ``seed``; never touches global state."""
    return np.random.Generator(np.random.PCG64(np.uint64(seed % 2**64)))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Split ``seed`` into ``n`` statistically independent child streams."""
    children = np.random.SeedSequence(seed % 2**64).spawn(n)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=DTYPE)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def affine(x, W, b) -> np.ndarray:
    x = as_matrix(x)
    W = as_matrix(W)
    b = np.asarray(b, dtype=DTYPE).reshape(-1)
    if x.shape[1] != W.shape[0] or b.shape[0] != W.shape[1]:
        raise DimensionError(
            f"affine shape mismatch: x {x.shape}, W {W.shape}, b {b.shape}"
        )
    return x @ W + b


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=DTYPE), 0.0)


def _check_temperature(T: float) -> float:
    T = float(T)
    if not (T > 0.0) or not np.isfinite(T):
        raise InvalidTemperatureError(f"temperature must be a finite value > 0, got {T!r}")
    return T


def softmax_t(logits, T: float = 1.0) -> np.ndarray:
    """Softmax of ``logits / T`` along the last axis.

    Works on a single row vector or on a batch of rows.
    """
    T = _check_temperature(T)
    z = np.asarray(logits, dtype=DTYPE) / T
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_t(logits, T: float = 1.0) -> np.ndarray:
    T = _check_temperature(T)
    z = np.asarray(logits, dtype=DTYPE) / T
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(target, pred) -> np.ndarray | float:
    """``-sum_c target_c * log(pred_c)`` per row, with ``pred`` floored at 1e-12."""
    target = np.asarray(target, dtype=DTYPE)
    pred = np.asarray(pred, dtype=DTYPE)
    if target.shape != pred.shape:
        raise DimensionError(f"cross_entropy shape mismatch: {target.shape} vs {pred.shape}")
    out = -(target * np.log(np.maximum(pred, PROB_FLOOR))).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def entropy(p) -> np.ndarray | float:
    p = np.asarray(p, dtype=DTYPE)
    safe = np.where(p > 0, p, 1.0)
    out = -(p * np.log(safe)).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def kl_divergence(p, q) -> np.ndarray | float:
    """``sum_c p_c log(p_c / q_c)`` per row; ``0 log 0 = 0``; ``q`` floored at 1e-12."""
    p = np.asarray(p, dtype=DTYPE)
    q = np.asarray(q, dtype=DTYPE)
    if p.shape != q.shape:
        raise DimensionError(f"kl_divergence shape mismatch: {p.shape} vs {q.shape}")
    safe_p = np.where(p > 0, p, 1.0)
    terms = np.where(p > 0, p * (np.log(safe_p) - np.log(np.maximum(q, PROB_FLOOR))), 0.0)
    out = terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def he_normal(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Gaussian init with std ``sqrt(2 / rows)``; ``rows`` is the fan-in."""
    if rows < 1 or cols < 1:
        raise DimensionError(f"he_normal needs rows, cols >= 1, got ({rows}, {cols})")
    return rng.normal(0.0, np.sqrt(2.0 / rows), size=(rows, cols))


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes), dtype=DTYPE)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out
