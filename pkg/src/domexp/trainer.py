"""Adam, original-domain training with early stopping, and the expansion loop."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numkit
from .datagen import Dataset
from .errors import ConfigError, DatasetError
from .net import NetConfig, ParamVector, clone_params, forward, init
from .regularizers import (
    FisherDiagonal,
    RegWeights,
    SoftTargets,
    cross_entropy_loss,
    ewc_penalty,
    hybrid_loss,
    skld_loss,
    wca_penalty,
)

METHODS = ("fine-tune", "WCA", "EWC", "SKLD", "SKLD-EWC")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: ParamVector, **kw) -> AdamState:
        return cls(np.zeros(len(params)), np.zeros(len(params)), **kw)


def adam_step(params: ParamVector, grads: ParamVector, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    params.check_layout(grads)
    if state.m.shape != params.flat.shape:
        raise ConfigError("Adam state does not match the parameter layout")
    g = grads.flat
    state.step_count += 1
    t = state.step_count
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = state.m / (1.0 - state.beta1**t)
    v_hat = state.v / (1.0 - state.beta2**t)
    params.flat -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 32
    max_epochs: int = 100
    early_stop_patience: int = 5
    fixed_epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.fixed_epochs < 1:
            raise ConfigError(f"batch_size, max_epochs and fixed_epochs must be >= 1: {self}")
        if self.early_stop_patience < 0:
            raise ConfigError(f"early_stop_patience must be >= 0, got {self.early_stop_patience}")

    @classmethod
    def original_defaults(cls, **kw) -> TrainConfig:
        return cls(**{"learning_rate": 0.001, **kw})

    @classmethod
    def expansion_defaults(cls, **kw) -> TrainConfig:
        return cls(**{"learning_rate": 0.0001, **kw})


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    errors: dict[str, float] = field(default_factory=dict)


def evaluate(model: ParamVector, dataset: Dataset) -> float:
    """Classification error at T = 1; ties go to the lowest class index."""
    if len(dataset) == 0:
        raise DatasetError("cannot evaluate on an empty dataset")
    pred = np.argmax(numkit.softmax_t(forward(model, dataset.features).logits, 1.0), axis=1)
    return float(np.mean(pred != dataset.labels))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _check_labels(dataset: Dataset, config: NetConfig) -> None:
    if len(dataset) == 0:
        raise DatasetError("training set is empty")
    if dataset.labels.max() >= config.num_classes:
        raise DatasetError(
            f"label {dataset.labels.max()} out of range for {config.num_classes} classes"
        )
    if dataset.feature_dim != config.input_dim:
        raise DatasetError(
            f"dataset has {dataset.feature_dim} features, network expects {config.input_dim}"
        )


def train_original(net_config: NetConfig, train_set: Dataset, dev_set: Dataset,
                   train_config: TrainConfig) -> tuple[ParamVector, list[EpochLog]]:
    """Cross-entropy training from scratch with dev-error early stopping.

    Returns the parameters from the epoch with the lowest dev error. With
    ``early_stop_patience = 0`` training stops after the first epoch.
    """
    _check_labels(train_set, net_config)
    _check_labels(dev_set, net_config)
    init_rng, shuffle_rng = numkit.spawn_rngs(train_config.seed, 2)
    params = init(net_config, init_rng)
    state = AdamState.fresh(params)
    best, best_err, since_best = clone_params(params), math.inf, 0
    logs: list[EpochLog] = []
    for epoch in range(1, train_config.max_epochs + 1):
        total, n = 0.0, 0
        for idx in _batches(len(train_set), train_config.batch_size, shuffle_rng):
            loss, grads = cross_entropy_loss(params, train_set.features[idx], train_set.labels[idx])
            adam_step(params, grads, state, train_config.learning_rate)
            total += loss * idx.size
            n += idx.size
        dev_err = evaluate(params, dev_set)
        logs.append(EpochLog(epoch, total / n, {"dev": dev_err}))
        if dev_err < best_err:
            best, best_err, since_best = clone_params(params), dev_err, 0
        else:
            since_best += 1
        if since_best >= train_config.early_stop_patience:
            break
    return best, logs


@dataclass(frozen=True)
class Objective:
    """A per-batch loss closure for one expansion method."""

    method: str
    reg: RegWeights
    theta_o: ParamVector
    fisher: FisherDiagonal | None = None
    soft_targets: SoftTargets | None = None
    t_squared: bool = False

    def __call__(self, params: ParamVector, x, labels, idx) -> tuple[float, ParamVector]:
        m = self.method
        if m == "fine-tune":
            return cross_entropy_loss(params, x, labels)
        if m == "WCA":
            loss, grad = cross_entropy_loss(params, x, labels)
            pen, pgrad = wca_penalty(params, self.theta_o, self.reg.lambda_w)
        elif m == "EWC":
            loss, grad = cross_entropy_loss(params, x, labels)
            pen, pgrad = ewc_penalty(params, self.theta_o, self.fisher, self.reg.lambda_e)
        elif m == "SKLD":
            return skld_loss(params, x, labels, self.soft_targets.probs[idx], self.reg.lambda_s,
                             self.reg.temperature, t_squared=self.t_squared)
        else:
            return hybrid_loss(params, self.theta_o, x, labels, self.soft_targets.probs[idx],
                               self.fisher, self.reg, t_squared=self.t_squared)
        grad.flat += pgrad.flat
        return loss + pen, grad


def build_objective(method: str, theta_o: ParamVector, reg: RegWeights,
                    fisher: FisherDiagonal | None = None,
                    soft_targets: SoftTargets | None = None,
                    train_size: int | None = None, t_squared: bool = False) -> Objective:
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    if method in ("EWC", "SKLD-EWC"):
        if fisher is None:
            raise ConfigError(f"method {method} needs a Fisher diagonal")
        if fisher.values.shape[0] != len(theta_o):
            raise ConfigError("Fisher diagonal does not match the model layout")
    if method in ("SKLD", "SKLD-EWC"):
        if soft_targets is None:
            raise ConfigError(f"method {method} needs precomputed soft targets")
        if train_size is not None and len(soft_targets) != train_size:
            raise ConfigError(
                f"soft targets cover {len(soft_targets)} samples, training set has {train_size}"
            )
        if soft_targets.temperature != reg.temperature:
            raise ConfigError(
                f"soft targets were computed at T={soft_targets.temperature}, "
                f"objective uses T={reg.temperature}"
            )
    return Objective(method, reg, theta_o, fisher, soft_targets, t_squared)


def expand_domain(original: ParamVector, new_train: Dataset, method: str, reg: RegWeights,
                  train_config: TrainConfig, *, fisher: FisherDiagonal | None = None,
                  soft_targets: SoftTargets | None = None,
                  eval_sets: dict[str, Dataset] | None = None, t_squared: bool = False,
                  on_step=None) -> tuple[ParamVector, list[EpochLog]]:
    """Adapt ``original`` to ``new_train`` for exactly ``fixed_epochs`` epochs.

    ``original`` is never modified. Row 0 of the returned log holds the
    full-set objective and errors of the unadapted model. ``on_step(step, params)`` is called after
    every optimizer update when given.
    """
    _check_labels(new_train, original.config)
    objective = build_objective(method, clone_params(original), reg, fisher, soft_targets,
                                len(new_train), t_squared)
    eval_sets = eval_sets or {}
    (shuffle_rng,) = numkit.spawn_rngs(train_config.seed, 1)
    params = clone_params(original)
    state = AdamState.fresh(params)
    everything = np.arange(len(new_train))
    loss0, _ = objective(params, new_train.features, new_train.labels, everything)
    logs = [EpochLog(0, loss0, {k: evaluate(params, d) for k, d in eval_sets.items()})]
    step = 0
    for epoch in range(1, train_config.fixed_epochs + 1):
        total, n = 0.0, 0
        for idx in _batches(len(new_train), train_config.batch_size, shuffle_rng):
            loss, grads = objective(params, new_train.features[idx], new_train.labels[idx], idx)
            adam_step(params, grads, state, train_config.learning_rate)
            step += 1
            if on_step is not None:
                on_step(step, params)
            total += loss * idx.size
            n += idx.size
        logs.append(EpochLog(epoch, total / n, {k: evaluate(params, d) for k, d in eval_sets.items()}))
    return params, logs


def write_epoch_log_csv(logs: list[EpochLog], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(logs[0].errors) if logs else []
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", *(f"eval_{k}_error" for k in names)])
        for log in logs:
            w.writerow([log.epoch, repr(log.train_loss), *(repr(log.errors[k]) for k in names)])
    return path
