"""Synthetic data, table I/O, and the three client heterogeneity constructions."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class ShiftMeta:
    client_id: int | None = None
    class_order: tuple[int, ...] | None = None  # class ids, most frequent first
    domain_id: int = 0
    label_map_version: int = 0


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    meta: ShiftMeta = field(default_factory=ShiftMeta)

    def __post_init__(self) -> None:
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2:
            raise ValueError("features must be 2-D")
        if len(x) != len(y):
            raise ValueError("features and labels differ in length")
        if len(y) and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def is_empty(self) -> bool:
        return len(self.labels) == 0

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, features=self.features[idx], labels=self.labels[idx])


ClientDataset = Dataset


@dataclass(frozen=True)
class ShiftConfig:
    imbalance_ratio: float = 0.01
    sample_fraction: float = 0.1
    concept_shift_prob: float = 0.0
    concept_shift_mode: str = "single"
    covariate_scale_range: tuple[float, float] = (0.5, 2.0)
    covariate_bias_scale: float = 1.0
    covariate_seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.imbalance_ratio <= 1.0:
            raise ValueError("imbalance_ratio must be in (0, 1]")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ValueError("sample_fraction must be in (0, 1]")
        if not 0.0 <= self.concept_shift_prob <= 1.0:
            raise ValueError("concept_shift_prob must be in [0, 1]")
        if self.concept_shift_mode not in ("single", "per_class"):
            raise ValueError("concept_shift_mode must be 'single' or 'per_class'")
        lo, hi = self.covariate_scale_range
        if not 0.0 < lo <= hi:
            raise ValueError("covariate_scale_range must satisfy 0 < lo <= hi")
        if self.covariate_bias_scale < 0:
            raise ValueError("covariate_bias_scale must be >= 0")


def _class_means(n_classes: int, dim: int, seed: int, radius: float = 3.0) -> np.ndarray:
    rng = np.random.default_rng([seed, 0])
    means = rng.standard_normal((n_classes, dim))
    return radius * means / np.linalg.norm(means, axis=1, keepdims=True)


def gen_synthetic(n_classes: int, dim: int, n_per_class: int, seed: int,
                  split: int = 0) -> Dataset:
    """Unit-variance Gaussian mixture, one component per class.

    Means lie on a sphere of radius 3 and depend only on ``seed``; ``split``
    selects an independent sample stream from the same mixture, so a train
    and a validation set are ``split=0`` and ``split=1``.
    """
    if n_classes < 2 or dim < 2:
        raise ValueError("need n_classes >= 2 and dim >= 2")
    means = _class_means(n_classes, dim, seed)
    rng = np.random.default_rng([seed, 1, split])
    labels = np.repeat(np.arange(n_classes), n_per_class)
    features = means[labels] + rng.standard_normal((len(labels), dim))
    return Dataset(features, labels, n_classes)


def long_tail_counts(n_max: int, n_classes: int, ratio: float) -> np.ndarray:
    """Samples kept per rank: max(1, floor(n_max * ratio ** (rank / (C - 1))))."""
    ranks = np.arange(n_classes)
    # exact powers through math.pow keep the profile identical to the formula
    return np.array([max(1, math.floor(n_max * math.pow(ratio, r / (n_classes - 1))))
                     for r in ranks], dtype=np.int64)


def partition_prior_shift(dataset: Dataset, client_seed: int, cfg: ShiftConfig,
                          client_id: int | None = None) -> Dataset:
    """Subsample a class-balanced set, then trim it to a client-specific long tail."""
    counts = dataset.class_counts()
    if len(set(counts.tolist())) != 1:
        raise ValueError("prior-shift partitioning expects a class-balanced dataset")
    C = dataset.n_classes
    rng = np.random.default_rng(client_seed)
    n_max = max(1, math.floor(counts[0] * cfg.sample_fraction))
    by_class = [np.flatnonzero(dataset.labels == c) for c in range(C)]
    picked = [rng.choice(idx, size=n_max, replace=False) for idx in by_class]
    order = rng.permutation(C)
    keep = long_tail_counts(n_max, C, cfg.imbalance_ratio)
    chosen = np.sort(np.concatenate([picked[c][:keep[rank]] for rank, c in enumerate(order)]))
    shard = dataset.subset(chosen)
    return replace(shard, meta=replace(dataset.meta, client_id=client_id,
                                       class_order=tuple(int(c) for c in order)))


@dataclass(frozen=True)
class AffineTransform:
    rotation: np.ndarray
    scale: np.ndarray
    bias: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x @ self.rotation.T) * self.scale + self.bias

    def invert(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.bias) / self.scale) @ self.rotation


def domain_transform(domain_id: int, dim: int, cfg: ShiftConfig) -> AffineTransform:
    """Plane rotation, per-feature scale and bias; domain 0 is the identity."""
    if domain_id < 0:
        raise ValueError("domain_id must be >= 0")
    if domain_id == 0:
        return AffineTransform(np.eye(dim), np.ones(dim), np.zeros(dim))
    rng = np.random.default_rng([cfg.covariate_seed, domain_id])
    basis, _ = np.linalg.qr(rng.standard_normal((dim, 2)))
    u, v = basis[:, 0], basis[:, 1]
    theta = rng.uniform(0.0, 2.0 * np.pi)
    rotation = (np.eye(dim) + (np.cos(theta) - 1.0) * (np.outer(u, u) + np.outer(v, v))
                + np.sin(theta) * (np.outer(v, u) - np.outer(u, v)))
    lo, hi = cfg.covariate_scale_range
    scale = rng.uniform(lo, hi, size=dim)
    bias = cfg.covariate_bias_scale * rng.standard_normal(dim)
    return AffineTransform(rotation, scale, bias)


def apply_covariate_shift(dataset: Dataset, domain_id: int, cfg: ShiftConfig) -> Dataset:
    t = domain_transform(domain_id, dataset.dim, cfg)
    features = dataset.features if domain_id == 0 else t.apply(dataset.features)
    return replace(dataset, features=features, meta=replace(dataset.meta, domain_id=domain_id))


@dataclass(frozen=True)
class LabelMap:
    n_classes: int
    history: tuple[tuple[int, int, int], ...] = ()  # (round, source class, new label)

    @property
    def version(self) -> int:
        return len(self.history)

    @property
    def mapping(self) -> np.ndarray:
        m = np.arange(self.n_classes)
        for _, source, target in self.history:
            m[source] = target
        return m

    def remap(self, round_: int, source: int, target: int) -> "LabelMap":
        if target == self.mapping[source]:
            raise ValueError("a remap must change the class label")
        return replace(self, history=self.history + ((round_, source, target),))

    def apply(self, dataset: Dataset) -> Dataset:
        if self.version == 0:
            return dataset
        return replace(dataset, labels=self.mapping[dataset.labels],
                       meta=replace(dataset.meta, label_map_version=self.version))


def concept_shift_step(label_map: LabelMap, round_: int, cfg: ShiftConfig,
                       rng: np.random.Generator, force: bool = False) -> LabelMap:
    """Possibly remap one class (or, in per-class mode, each class) to a new label.

    ``force`` makes the single-class remap happen regardless of the coin flip.
    """
    C = label_map.n_classes
    if C < 2:
        raise ValueError("concept shift needs at least two classes")
    if cfg.concept_shift_mode == "per_class" and not force:
        flips = rng.random(C) < cfg.concept_shift_prob
        for c in np.flatnonzero(flips):
            label_map = _remap_class(label_map, round_, int(c), rng)
        return label_map
    if force or rng.random() < cfg.concept_shift_prob:
        label_map = _remap_class(label_map, round_, int(rng.integers(C)), rng)
    return label_map


def _remap_class(label_map: LabelMap, round_: int, source: int,
                 rng: np.random.Generator) -> LabelMap:
    current = label_map.mapping[source]
    others = [c for c in range(label_map.n_classes) if c != current]
    return label_map.remap(round_, source, others[int(rng.integers(len(others)))])


class TableFormatError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


def write_table(dataset: Dataset, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"f{i}" for i in range(dataset.dim)] + ["label"])
        for row, label in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def load_table(path, n_classes: int | None = None) -> Dataset:
    """Read a ``f0,...,f{dim-1},label`` table; errors name the offending line."""
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise TableFormatError(path, 1, "missing header")
    header = rows[0]
    dim = len(header) - 1
    expected = [f"f{i}" for i in range(dim)] + ["label"]
    if dim < 1 or header != expected:
        raise TableFormatError(path, 1, f"header must be {','.join(expected) if dim >= 1 else 'f0,...,label'}")
    features = np.empty((len(rows) - 1, dim))
    labels = np.empty(len(rows) - 1, dtype=np.int64)
    for i, row in enumerate(rows[1:]):
        line = i + 2
        if len(row) != dim + 1:
            raise TableFormatError(path, line, f"expected {dim + 1} cells, got {len(row)}")
        try:
            features[i] = [float(v) for v in row[:-1]]
        except ValueError:
            raise TableFormatError(path, line, "non-numeric feature cell") from None
        try:
            labels[i] = int(row[-1], 10)
        except ValueError:
            raise TableFormatError(path, line, f"label {row[-1]!r} is not an integer") from None
        if labels[i] < 0 or (n_classes is not None and labels[i] >= n_classes):
            raise TableFormatError(path, line, f"label {labels[i]} out of range")
    if not np.all(np.isfinite(features)):
        bad = int(np.flatnonzero(~np.isfinite(features).all(axis=1))[0]) + 2
        raise TableFormatError(path, bad, "non-finite feature value")
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if len(labels) else 1
    return Dataset(features, labels, n_classes)
