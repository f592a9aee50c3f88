"""Fully connected ReLU classifier with hand-written backprop."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numkit
from .errors import DimensionError, LayoutMismatchError

FORMAT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.num_classes)
        if any(int(d) < 1 for d in dims):
            raise DimensionError(f"all layer sizes must be >= 1, got {dims}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.num_classes]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def num_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_dims)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> NetConfig:
        return cls(int(d["input_dim"]), tuple(d["hidden_dims"]), int(d["num_classes"]))


class ParamVector:
    """All learnable parameters stored in one contiguous float64 buffer.

    ``layers`` holds ``(W, b)`` views into ``flat``, so writes through either
    view are visible through the other. Layout per layer is ``W`` (row-major,
    fan_in x fan_out) followed by ``b``.
    """

    def __init__(self, config: NetConfig, flat: np.ndarray | None = None):
        self.config = config
        if flat is None:
            flat = np.zeros(config.num_params, dtype=numkit.DTYPE)
        flat = np.ascontiguousarray(flat, dtype=numkit.DTYPE)
        if flat.shape != (config.num_params,):
            raise LayoutMismatchError(
                f"flat vector has shape {flat.shape}, layout needs ({config.num_params},)"
            )
        self.flat = flat
        self.layers: list[tuple[np.ndarray, np.ndarray]] = []
        offset = 0
        for fan_in, fan_out in config.layer_dims:
            W = flat[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = flat[offset : offset + fan_out]
            offset += fan_out
            self.layers.append((W, b))

    def __len__(self) -> int:
        return self.flat.shape[0]

    def __repr__(self) -> str:
        return f"ParamVector({self.config}, n={len(self)})"

    def zeros_like(self) -> ParamVector:
        return ParamVector(self.config)

    def with_flat(self, flat: np.ndarray) -> ParamVector:
        return ParamVector(self.config, np.array(flat, dtype=numkit.DTYPE, copy=True))

    def check_layout(self, other: ParamVector) -> None:
        if self.config != other.config or len(self) != len(other):
            raise LayoutMismatchError(
                f"parameter layouts differ: {self.config} vs {other.config}"
            )


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    pre_activations: list[np.ndarray] = field(default_factory=list)
    activations: list[np.ndarray] = field(default_factory=list)

    @property
    def logits(self) -> np.ndarray:
        return self.pre_activations[-1]


def init(config: NetConfig, rng: np.random.Generator) -> ParamVector:
    params = ParamVector(config)
    for (W, b), (fan_in, fan_out) in zip(params.layers, config.layer_dims):
        W[...] = numkit.he_normal(fan_in, fan_out, rng)
        b[...] = 0.0
    return params


def clone_params(params: ParamVector) -> ParamVector:
    return params.with_flat(params.flat)


def forward(params: ParamVector, x) -> ForwardTrace:
    x = numkit.as_matrix(x)
    if x.shape[1] != params.config.input_dim:
        raise DimensionError(
            f"input has {x.shape[1]} features, network expects {params.config.input_dim}"
        )
    trace = ForwardTrace(inputs=x)
    h = x
    last = len(params.layers) - 1
    for k, (W, b) in enumerate(params.layers):
        z = numkit.affine(h, W, b)
        trace.pre_activations.append(z)
        h = z if k == last else numkit.relu(z)
        trace.activations.append(h)
    return trace


def backward(params: ParamVector, trace: ForwardTrace, dloss_dlogits) -> ParamVector:
    """Batch-summed gradient of the loss w.r.t. every parameter.

    ``dloss_dlogits`` is the upstream gradient, shape ``(B, num_classes)``.
    ReLU's derivative at exactly 0 is taken as 0.
    """
    delta = numkit.as_matrix(dloss_dlogits)
    if len(trace.pre_activations) != len(params.layers) or delta.shape != trace.logits.shape:
        raise DimensionError(
            f"trace does not match these parameters/upstream gradient "
            f"(upstream {delta.shape}, logits {trace.logits.shape if trace.pre_activations else None})"
        )
    grads = params.zeros_like()
    for k in range(len(params.layers) - 1, -1, -1):
        W, _ = params.layers[k]
        gW, gb = grads.layers[k]
        h_prev = trace.inputs if k == 0 else trace.activations[k - 1]
        gW[...] = h_prev.T @ delta
        gb[...] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ W.T) * (trace.pre_activations[k - 1] > 0)
    return grads


def predict_proba(params: ParamVector, x, T: float = 1.0) -> np.ndarray:
    return numkit.softmax_t(forward(params, x).logits, T)


# -- checkpoint container ----------------------------------------------------


def save_container(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> Path:
    """Write a versioned ``.npz`` container: JSON header plus raw float arrays."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "kind": kind, **meta}, sort_keys=True
    )
    payload = {"header": np.frombuffer(header.encode("utf-8"), dtype=np.uint8)}
    payload.update({k: np.asarray(v) for k, v in arrays.items()})
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_container(path, kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(data["header"].tobytes().decode("utf-8"))
        arrays = {k: data[k] for k in data.files if k != "header"}
    if meta.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind!r} container, found {meta.get('kind')!r}")
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {meta.get('format_version')}")
    return meta, arrays


def save_checkpoint(path, params: ParamVector, seed: int | None = None) -> Path:
    return save_container(
        path, "checkpoint", {"net_config": params.config.to_dict(), "seed": seed},
        {"flat": params.flat},
    )


def load_checkpoint(path) -> tuple[ParamVector, int | None]:
    meta, arrays = load_container(path, "checkpoint")
    config = NetConfig.from_dict(meta["net_config"])
    return ParamVector(config, arrays["flat"].copy()), meta.get("seed")
