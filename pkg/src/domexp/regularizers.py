"""Domain-expansion objectives (WCA, EWC, SKLD, SKLD-EWC) and the Fisher estimator.

Every objective returns ``(loss, gradient)`` where the gradient is a
:class:`~domexp.net.ParamVector` sharing the model layout. Data terms are
batch means; weight penalties are evaluated once per step on the full
parameter vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import numkit
from .errors import ConfigError, DatasetError, DimensionError, LayoutMismatchError
from .net import ParamVector, backward, forward, load_container, save_container


@dataclass(frozen=True)
class FisherDiagonal:
    """Raw per-parameter gradient variances plus the additive offset used at penalty time."""

    values: np.ndarray
    offset: float = 1.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=numkit.DTYPE)
        if values.ndim != 1 or np.any(values < 0):
            raise ValueError("fisher values must be a non-negative 1-D array")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def importance(self) -> np.ndarray:
        return self.values + self.offset

    def save(self, path):
        return save_container(path, "fisher", {"offset": self.offset}, {"values": self.values})

    @classmethod
    def load(cls, path) -> FisherDiagonal:
        meta, arrays = load_container(path, "fisher")
        return cls(arrays["values"].copy(), float(meta["offset"]))


@dataclass(frozen=True)
class SoftTargets:
    """Frozen original-model output distributions, one row per training sample."""

    probs: np.ndarray
    temperature: float

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=numkit.DTYPE)
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    def __len__(self) -> int:
        return self.probs.shape[0]

    def save(self, path):
        return save_container(path, "soft_targets", {"temperature": self.temperature},
                              {"probs": self.probs})

    @classmethod
    def load(cls, path) -> SoftTargets:
        meta, arrays = load_container(path, "soft_targets")
        return cls(arrays["probs"].copy(), float(meta["temperature"]))


@dataclass(frozen=True)
class RegWeights:
    lambda_w: float = 0.0
    lambda_e: float = 0.0
    lambda_s: float = 0.0
    temperature: float = 1.0

    def __post_init__(self):
        if self.lambda_w < 0 or self.lambda_e < 0:
            raise ConfigError(f"lambda_w and lambda_e must be >= 0, got {self}")
        if not 0.0 <= self.lambda_s <= 1.0:
            raise ConfigError(f"lambda_s must lie in [0, 1], got {self.lambda_s}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")


def _delta(theta_n: ParamVector, theta_o: ParamVector) -> np.ndarray:
    theta_n.check_layout(theta_o)
    return theta_n.flat - theta_o.flat


def cross_entropy_loss(params: ParamVector, x, labels) -> tuple[float, ParamVector]:
    """Batch-mean cross-entropy against hard labels (the fine-tuning objective)."""
    trace = forward(params, x)
    labels = np.asarray(labels, dtype=np.int64)
    B = trace.logits.shape[0]
    p = numkit.softmax_t(trace.logits, 1.0)
    y = numkit.one_hot(labels, params.config.num_classes)
    loss = float(numkit.cross_entropy(y, p).sum() / B)
    return loss, backward(params, trace, (p - y) / B)


def wca_penalty(theta_n: ParamVector, theta_o: ParamVector, lambda_w: float):
    d = _delta(theta_n, theta_o)
    penalty = 0.5 * lambda_w * float(np.dot(d, d))
    return penalty, theta_n.with_flat(lambda_w * d)


def ewc_penalty(theta_n: ParamVector, theta_o: ParamVector, fisher: FisherDiagonal,
                lambda_e: float):
    d = _delta(theta_n, theta_o)
    if fisher.values.shape != d.shape:
        raise LayoutMismatchError(
            f"fisher has {fisher.values.shape[0]} entries, parameters have {d.shape[0]}"
        )
    weighted = fisher.importance * d
    penalty = 0.5 * lambda_e * float(np.dot(weighted, d))
    return penalty, theta_n.with_flat(lambda_e * weighted)


def per_sample_gradients(params: ParamVector, x, labels) -> np.ndarray:
    """Cross-entropy gradient of each sample separately, stacked as ``(N, P)``."""
    x = numkit.as_matrix(x)
    labels = np.asarray(labels, dtype=np.int64)
    G = np.empty((x.shape[0], len(params)), dtype=numkit.DTYPE)
    for i in range(x.shape[0]):
        trace = forward(params, x[i : i + 1])
        p = numkit.softmax_t(trace.logits, 1.0)
        p[0, labels[i]] -= 1.0
        G[i] = backward(params, trace, p).flat
    return G


def _population_variance(G: np.ndarray) -> np.ndarray:
    """Per-column population variance, correctly rounded from the exact value.

    Each float is ``m * 2**e`` with an integer 53-bit ``m``, so the column
    sums of values and squares are computed exactly in Python integers. The
    result is therefore independent of row order and summation strategy.
    """
    n = G.shape[0]
    mant, expo = np.frexp(G.T)
    ints = (mant * 2.0**53).astype(np.int64)
    out = np.empty(G.shape[1], dtype=numkit.DTYPE)
    for j in range(G.shape[1]):
        lo = int(expo[j].min())
        A = [int(a) << int(k - lo) for a, k in zip(ints[j], expo[j])]
        s1 = sum(A)
        s2 = sum(a * a for a in A)
        out[j] = float(Fraction(n * s2 - s1 * s1, n * n) * Fraction(2) ** (2 * (lo - 53)))
    return out


def estimate_fisher_diagonal(model: ParamVector, dataset, offset: float = 1.0) -> FisherDiagonal:
    """Empirical Fisher diagonal: per-parameter population variance of
    per-sample cross-entropy gradients against the ground-truth labels."""
    if len(dataset.labels) == 0:
        raise DatasetError("cannot estimate a Fisher diagonal from an empty dataset")
    G = per_sample_gradients(model, dataset.features, dataset.labels)
    return FisherDiagonal(_population_variance(G), float(offset))


def precompute_soft_targets(original: ParamVector, features, T: float) -> SoftTargets:
    """Run the frozen original model once over ``features`` at temperature ``T``."""
    logits = forward(original, features).logits
    return SoftTargets(numkit.softmax_t(logits, T), float(T))


def skld_loss(theta_n: ParamVector, x, labels, soft_rows, lambda_s: float, T: float,
              *, t_squared: bool = False, kl_form: bool = False) -> tuple[float, ParamVector]:
    """``(1 - lambda_s) * J_cross + lambda_s * distillation``.

    The tuning term always uses T = 1. The distillation term compares
    ``soft_rows`` with the new model's softmax at temperature ``T`` using
    cross-entropy, or the full KL divergence when ``kl_form`` is set (which
    only adds the soft-target entropy). ``t_squared`` multiplies the
    distillation term by ``T**2``.
    """
    if not 0.0 <= lambda_s <= 1.0:
        raise ConfigError(f"lambda_s must lie in [0, 1], got {lambda_s}")
    trace = forward(theta_n, x)
    logits = trace.logits
    B, C = logits.shape
    soft = np.asarray(soft_rows, dtype=numkit.DTYPE)
    if soft.shape != logits.shape:
        raise DimensionError(f"soft targets {soft.shape} do not align with batch {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)

    p1 = numkit.softmax_t(logits, 1.0)
    y = numkit.one_hot(labels, C)
    tune = numkit.cross_entropy(y, p1).sum() / B
    dtune = (p1 - y) / B

    pT = numkit.softmax_t(logits, T)
    scale = T * T if t_squared else 1.0
    if kl_form:
        distill = numkit.kl_divergence(soft, pT).sum() / B
        # d/dz_j of -sum_c s_c log pT_c, without assuming the rows of s sum to 1
        ddistill = (pT * soft.sum(axis=1, keepdims=True) - soft) / (T * B)
    else:
        distill = numkit.cross_entropy(soft, pT).sum() / B
        ddistill = (pT - soft) / (T * B)

    loss = (1.0 - lambda_s) * tune + lambda_s * scale * distill
    dlogits = (1.0 - lambda_s) * dtune + lambda_s * scale * ddistill
    return float(loss), backward(theta_n, trace, dlogits)


def hybrid_loss(theta_n: ParamVector, theta_o: ParamVector, x, labels, soft_rows,
                fisher: FisherDiagonal, reg: RegWeights, *, t_squared: bool = False):
    """SKLD objective plus the (unscaled) EWC penalty."""
    loss_s, grad_s = skld_loss(theta_n, x, labels, soft_rows, reg.lambda_s, reg.temperature,
                               t_squared=t_squared)
    loss_e, grad_e = ewc_penalty(theta_n, theta_o, fisher, reg.lambda_e)
    grad_s.flat += grad_e.flat
    return loss_s + loss_e, grad_s
