"""Shared fixtures-by-function for the test suite."""

from fractions import Fraction

import numpy as np

from domexp import numkit
from domexp.datagen import Dataset
from domexp.net import NetConfig, init


def random_net(rng, max_params=1000):
    """A small random MLP with He-initialised weights and non-zero biases."""
    while True:
        d = int(rng.integers(2, 8))
        hidden = tuple(int(h) for h in rng.integers(2, 12, size=int(rng.integers(0, 3))))
        C = int(rng.integers(2, 6))
        cfg = NetConfig(d, hidden, C)
        if cfg.num_params <= max_params:
            break
    params = init(cfg, rng)
    params.flat += rng.normal(0.0, 0.1, size=len(params))
    return params


def random_batch(rng, params, n=None):
    n = n or int(rng.integers(1, 9))
    x = rng.normal(size=(n, params.config.input_dim))
    labels = rng.integers(0, params.config.num_classes, size=n)
    return x, labels


def random_soft(rng, n, C):
    return numkit.softmax_t(rng.normal(size=(n, C)) * 2.0, 1.0)


def central_difference(f, flat, h=1e-5):
    grad = np.empty_like(flat)
    for i in range(flat.shape[0]):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def relative_error(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def blob_dataset(n_per_class=20, C=3, d=4, seed=0, spread=3.0):
    rng = numkit.make_rng(seed)
    centers = rng.normal(0.0, spread, size=(C, d))
    labels = np.repeat(np.arange(C), n_per_class)
    x = centers[labels] + rng.normal(size=(labels.size, d))
    return Dataset(x, labels, C, f"blobs{seed}")


def oracle_gradients(p, x, labels):
    """Per-sample gradients written out layer by layer, independent of backward()."""
    rows = []
    for xi, yi in zip(x, labels):
        acts, pres, h = [xi], [], xi
        for k, (W, b) in enumerate(p.layers):
            z = h @ W + b
            pres.append(z)
            h = np.maximum(z, 0.0) if k < len(p.layers) - 1 else z
            acts.append(h)
        e = np.exp(h - h.max())
        delta = e / e.sum()
        delta[yi] -= 1.0
        parts = []
        for k in range(len(p.layers) - 1, -1, -1):
            parts.append(np.concatenate([np.outer(acts[k], delta).ravel(), delta]))
            if k:
                delta = (p.layers[k][0] @ delta) * (pres[k - 1] > 0)
        rows.append(np.concatenate(parts[::-1]))
    return np.array(rows)


def exact_population_variance(G):
    n = G.shape[0]
    out = []
    for col in G.T:
        fr = [Fraction(v) for v in col]
        mean = sum(fr) / n
        out.append(float(sum((v - mean) ** 2 for v in fr) / n))
    return np.array(out)
