"""Synthetic shifted domains, feature-file I/O, frame stacking, pooling and splitting."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from . import numkit
from .errors import DatasetError, DimensionError, ParseError


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    domain_tag: str = "unnamed"

    def __post_init__(self):
        self.features = numkit.as_matrix(self.features)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.features.shape[0] != self.labels.shape[0]:
            raise DatasetError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )
        if self.labels.shape[0] == 0:
            raise DatasetError("a dataset needs at least one sample")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, idx, tag: str | None = None) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes,
                       tag or self.domain_tag)


@dataclass(frozen=True)
class DomainSpec:
    """Recipe for one synthetic domain.

    Class means are drawn from ``seed`` alone, so every domain built from the
    same seed shares the same base layout. The means live in a random
    ``latent_dim``-dimensional subspace of the feature space (the whole space
    when ``latent_dim`` is 0). ``domain_shift`` then moves that layout: the
    means are rotated inside the subspace by ``domain_shift *
    rotation_strength`` radians about their centroid and translated by
    ``domain_shift * offset_scale`` along a fixed random direction.
    """

    num_classes: int = 8
    feature_dim: int = 20
    samples_per_class: int = 75
    class_center_scale: float = 1.0
    domain_shift: float = 0.0
    offset_scale: float = 1.0
    rotation_strength: float = 1.0
    noise_std: float = 1.0
    latent_dim: int = 0
    seed: int = 0
    name: str = "domain"

    def __post_init__(self):
        if min(self.num_classes, self.feature_dim, self.samples_per_class) < 1:
            raise DatasetError(f"class count, feature dim and samples per class must be >= 1: {self}")
        if min(self.class_center_scale, self.offset_scale, self.rotation_strength,
               self.noise_std) < 0 or self.domain_shift < 0:
            raise DatasetError(f"scales, shift and noise must be non-negative: {self}")
        if not 0 <= self.latent_dim <= self.feature_dim:
            raise DatasetError(f"latent_dim must lie in [0, feature_dim], got {self.latent_dim}")


def _stream_seed(*parts) -> int:
    digest = hashlib.sha256("/".join(map(str, parts)).encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class Layout:
    latent_means: np.ndarray  # (C, k)
    embedding: np.ndarray  # (k, d), orthonormal rows
    direction: np.ndarray  # (d,), unit norm
    generator: np.ndarray  # (k, k) skew-symmetric, unit spectral norm


def base_layout(spec: DomainSpec) -> Layout:
    """The shared, seed-determined geometry that every domain of ``spec.seed`` starts from."""
    k = spec.latent_dim or spec.feature_dim
    rng = numkit.make_rng(_stream_seed("layout", spec.seed, spec.num_classes, spec.feature_dim, k))
    means = rng.normal(0.0, spec.class_center_scale, size=(spec.num_classes, k))
    if k == spec.feature_dim:
        embedding = np.eye(k)
    else:
        q, _ = np.linalg.qr(rng.normal(size=(spec.feature_dim, k)))
        embedding = q.T
    direction = rng.normal(size=spec.feature_dim)
    direction /= np.linalg.norm(direction)
    A = rng.normal(size=(k, k))
    skew = A - A.T
    if k > 1:
        # unit spectral norm, so rotation angles are measured in radians
        skew /= np.max(np.abs(np.linalg.eigvals(skew)))
    return Layout(means, embedding, direction, skew)


def shifted_means(spec: DomainSpec) -> np.ndarray:
    lay = base_layout(spec)
    latent = lay.latent_means
    if spec.domain_shift > 0:
        R = expm(spec.domain_shift * spec.rotation_strength * lay.generator)
        centroid = latent.mean(axis=0)
        latent = (latent - centroid) @ R.T + centroid
    return latent @ lay.embedding + spec.domain_shift * spec.offset_scale * lay.direction


def generate_domain(spec: DomainSpec) -> Dataset:
    means = shifted_means(spec)
    rng = numkit.make_rng(_stream_seed("samples", spec.seed, spec.domain_shift, spec.name))
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    noise = rng.normal(0.0, 1.0, size=(labels.shape[0], spec.feature_dim)) * spec.noise_std
    features = means[labels] + noise
    order = rng.permutation(labels.shape[0])
    return Dataset(features[order], labels[order], spec.num_classes, spec.name)


def stack_frames(frames, context: int = 5) -> np.ndarray:
    """Concatenate each frame with ``context`` neighbours on each side.

    Out-of-range neighbours repeat the first or last frame.
    """
    frames = numkit.as_matrix(frames)
    T = frames.shape[0]
    if context < 0:
        raise DimensionError(f"context must be >= 0, got {context}")
    padded = np.pad(frames, ((context, context), (0, 0)), mode="edge")
    width = 2 * context + 1
    return np.concatenate([padded[k : k + T] for k in range(width)], axis=1)


def pool(*datasets: Dataset) -> Dataset:
    if not datasets:
        raise DatasetError("pool needs at least one dataset")
    first = datasets[0]
    for ds in datasets[1:]:
        if ds.feature_dim != first.feature_dim or ds.num_classes != first.num_classes:
            raise DimensionError(
                f"cannot pool {ds.domain_tag} ({ds.feature_dim} features, {ds.num_classes} classes) "
                f"with {first.domain_tag} ({first.feature_dim} features, {first.num_classes} classes)"
            )
    return Dataset(
        np.concatenate([d.features for d in datasets]),
        np.concatenate([d.labels for d in datasets]),
        first.num_classes,
        "pooled",
    )


def split(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> list[Dataset]:
    """Stratified, seed-deterministic split into ``len(fractions)`` disjoint parts.

    Per class, each part gets the floor or ceiling of its exact share; the
    leftover samples go to the parts furthest behind their overall share, so
    part sizes also stay within one sample of ``fractions * len(dataset)``.
    """
    fr = np.asarray(fractions, dtype=float)
    if np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise DatasetError(f"fractions must be non-negative and sum to 1, got {tuple(fractions)}")
    rng = numkit.make_rng(_stream_seed("split", seed, dataset.domain_tag))
    parts: list[list[np.ndarray]] = [[] for _ in fr]
    assigned = np.zeros(len(fr))
    seen = 0
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        seen += idx.size
        exact = fr * idx.size
        counts = np.floor(exact + 1e-9).astype(int)
        short = idx.size - counts.sum()
        # candidates for an extra sample: parts with a fractional share in this class
        frac = exact - counts
        deficit = fr * seen - (assigned + counts)
        order = sorted(range(len(fr)), key=lambda k: (frac[k] <= 1e-9, -deficit[k], k))
        for k in order[:short]:
            counts[k] += 1
        assigned += counts
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for k in range(len(fr)):
            parts[k].append(idx[bounds[k] : bounds[k + 1]])
    out = []
    for k, chunks in enumerate(parts):
        sel = np.sort(np.concatenate(chunks)) if chunks else np.empty(0, dtype=np.int64)
        if sel.size == 0:
            raise DatasetError(f"split part {k} would be empty (fractions {tuple(fractions)})")
        out.append(dataset.subset(sel))
    return out


# -- feature CSV -------------------------------------------------------------


def save_feature_file(dataset: Dataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", *(f"f{j}" for j in range(dataset.feature_dim))])
        for label, row in zip(dataset.labels, dataset.features):
            w.writerow([int(label), *(repr(float(v)) for v in row)])
    return path


def load_feature_file(path, num_classes: int | None = None, *, stack_context: int | None = None,
                      domain_tag: str | None = None) -> Dataset:
    """Read a ``label,f0,...,f{d-1}`` CSV.

    With ``stack_context`` the rows are treated as consecutive frames and
    frame-stacked before returning.
    """
    path = Path(path)
    labels: list[int] = []
    rows: list[list[float]] = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path}: file is empty", line=1)
        if not header or header[0].strip() != "label" or any(
            h.strip() != f"f{j}" for j, h in enumerate(header[1:])
        ) or len(header) < 2:
            raise ParseError(f"{path}: header must be label,f0,...,f{{d-1}}", line=1)
        width = len(header)
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != width:
                raise ParseError(f"{path}: expected {width} fields, got {len(rec)}", line=lineno)
            try:
                label = int(rec[0])
                vals = [float(v) for v in rec[1:]]
            except ValueError as exc:
                raise ParseError(f"{path}: non-numeric field ({exc})", line=lineno) from None
            if label < 0 or (num_classes is not None and label >= num_classes):
                raise ParseError(f"{path}: label {label} outside [0, {num_classes})", line=lineno)
            if not all(np.isfinite(vals)):
                raise ParseError(f"{path}: non-finite feature value", line=lineno)
            labels.append(label)
            rows.append(vals)
    if not rows:
        raise ParseError(f"{path}: no samples", line=2)
    features = np.array(rows, dtype=numkit.DTYPE)
    if stack_context is not None:
        features = stack_frames(features, stack_context)
    C = num_classes if num_classes is not None else max(labels) + 1
    return Dataset(features, np.array(labels), C, domain_tag or path.stem)
