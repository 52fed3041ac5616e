"""Dataset ingestion, seeded splitting, standardization and synthetic data.

All randomness goes through :func:`make_rng`, a Philox counter-based
generator keyed by ``(seed, stream)`` so that independent consumers (splits,
initialisation, batching, sampling noise) never share a stream.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy import special

from .forecast import GaussianForecast

log = logging.getLogger(__name__)

PRNG_ID = "numpy.Philox4x64-10/SeedSequence"
STREAMS = {"synthetic": 0, "split": 1, "init": 2, "batch": 3, "noise": 4,
           "val_noise": 5, "eval": 6, "bandwidth": 7}
MAX_CLASSES = 1000


def make_rng(seed: int, stream: str | int = 0) -> np.random.Generator:
    key = STREAMS[stream] if isinstance(stream, str) else int(stream)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(key,))))


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    columns: list
    family: str  # "regression" | "classification"
    target: str = "y"
    groups: np.ndarray | None = None
    classes: list | None = None
    # Ground-truth conditional for synthetic data; maps raw features to a
    # GaussianForecast (regression) or a pmf matrix (classification).
    truth: Callable | None = field(default=None, repr=False)
    dropped_rows: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.family == "classification":
            self.labels = np.asarray(self.labels, dtype=np.int64)
        else:
            self.labels = np.asarray(self.labels, dtype=np.float64)
        if not (np.all(np.isfinite(self.features)) and np.all(np.isfinite(self.labels))):
            raise ValueError("dataset contains NaN or Inf")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int | None:
        if self.family != "classification":
            return None
        return len(self.classes) if self.classes is not None else int(self.labels.max()) + 1

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, features=self.features[idx], labels=self.labels[idx],
                       groups=None if self.groups is None else self.groups[idx])

    def column_index(self, name: str) -> int:
        try:
            return self.columns.index(name)
        except ValueError:
            raise KeyError(f"feature column {name!r} not found; have {self.columns}") from None


# --- CSV ---------------------------------------------------------------------

def _parse_float(s: str) -> float | None:
    try:
        v = float(s)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def _sort_key(v: str):
    f = _parse_float(v)
    return (0, f, "") if f is not None else (1, 0.0, v)


def load_csv(path, target: str, family: str, group_column: str | None = None) -> Dataset:
    """Read a headered, comma-separated file into a :class:`Dataset`.

    A column is numeric when more than half of its values parse as finite
    numbers; other feature columns are one-hot encoded in lexicographic
    category order. Rows with an unparseable numeric cell are dropped.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows = [[c.strip() for c in r] for r in reader if r and any(c.strip() for c in r)]
    if target not in header:
        raise KeyError(f"{path}: target column {target!r} not in header {header}")
    if group_column is not None and group_column not in header:
        raise KeyError(f"{path}: group column {group_column!r} not in header {header}")
    rows = [r for r in rows if len(r) == len(header)]

    numeric = {}
    for j, name in enumerate(header):
        vals = [r[j] for r in rows]
        ok = sum(_parse_float(v) is not None for v in vals)
        numeric[name] = ok * 2 > len(vals)
    if family == "regression" and not numeric[target]:
        raise ValueError(f"{path}: regression target {target!r} is not numeric")

    keep, dropped = [], 0
    num_cols = [j for j, h in enumerate(header) if numeric[h] and (h != target or family == "regression")]
    for r in rows:
        if any(_parse_float(r[j]) is None for j in num_cols):
            dropped += 1
            continue
        keep.append(r)
    if dropped:
        log.info("%s: dropped %d rows with unparseable values", path, dropped)
    if not keep:
        raise ValueError(f"{path}: no usable rows")

    t = header.index(target)
    if family == "classification":
        cats = sorted({r[t] for r in keep}, key=_sort_key)
        if len(cats) > MAX_CLASSES:
            raise ValueError(f"{path}: target {target!r} has {len(cats)} distinct values (> {MAX_CLASSES})")
        code = {c: k for k, c in enumerate(cats)}
        labels = np.array([code[r[t]] for r in keep], dtype=np.int64)
        classes = cats
    else:
        labels = np.array([float(r[t]) for r in keep])
        classes = None

    columns, blocks = [], []
    for j, name in enumerate(header):
        if j == t:
            continue
        if numeric[name]:
            columns.append(name)
            blocks.append(np.array([[float(r[j])] for r in keep]))
        else:
            cats = sorted({r[j] for r in keep})
            columns.extend(f"{name}={c}" for c in cats)
            blocks.append(np.array([[1.0 if r[j] == c else 0.0 for c in cats] for r in keep]))
    features = np.hstack(blocks) if blocks else np.zeros((len(keep), 0))

    groups = None
    if group_column is not None:
        g = header.index(group_column)
        cats = sorted({r[g] for r in keep}, key=_sort_key)
        code = {c: k for k, c in enumerate(cats)}
        groups = np.array([code[r[g]] for r in keep], dtype=np.int64)

    return Dataset(features, labels, columns, family, target, groups, classes, dropped_rows=dropped)


# --- splitting and standardization ---------------------------------------------

def split_indices(n: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if n < 10:
        raise ValueError(f"need at least 10 examples to split, got {n}")
    perm = make_rng(seed, "split").permutation(n)
    n_train, n_val = int(0.7 * n), int(0.1 * n)
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


def split(dataset: Dataset, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """70/10/20 train/validation/test split from a seeded permutation."""
    tr, va, te = split_indices(len(dataset), seed)
    return dataset.subset(tr), dataset.subset(va), dataset.subset(te)


@dataclass
class Standardizer:
    """Per-column affine standardization fitted on the training split."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float = 0.0
    y_std: float = 1.0

    @classmethod
    def fit(cls, train: Dataset) -> "Standardizer":
        mean = train.features.mean(axis=0)
        std = train.features.std(axis=0)
        std = np.where(std > 1e-12, std, 1.0)
        if train.family == "regression":
            ys = float(train.labels.std())
            return cls(mean, std, float(train.labels.mean()), ys if ys > 1e-12 else 1.0)
        return cls(mean, std)

    def x(self, features) -> np.ndarray:
        return (np.asarray(features, dtype=np.float64) - self.x_mean) / self.x_std

    def x_inverse(self, z) -> np.ndarray:
        return np.asarray(z) * self.x_std + self.x_mean

    def y(self, labels) -> np.ndarray:
        return (np.asarray(labels, dtype=np.float64) - self.y_mean) / self.y_std

    def y_inverse(self, z) -> np.ndarray:
        return np.asarray(z) * self.y_std + self.y_mean

    def forecast(self, raw: GaussianForecast) -> GaussianForecast:
        """Express a raw-label Gaussian forecast in standardized label units."""
        return GaussianForecast((raw.mu - self.y_mean) / self.y_std, raw.sigma / self.y_std)

    def to_dict(self) -> dict:
        return {"x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(),
                "y_mean": self.y_mean, "y_std": self.y_std}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.asarray(d["x_mean"], float), np.asarray(d["x_std"], float),
                   float(d["y_mean"]), float(d["y_std"]))


# --- synthetic generators ------------------------------------------------------

def heteroscedastic_truth(x) -> GaussianForecast:
    x = np.asarray(x, dtype=np.float64)
    return GaussianForecast(np.sin(2.0 * x[:, 0]) + 0.5 * x[:, 1], 0.1 + 0.4 * np.abs(x[:, 0]))


def synth_heteroscedastic(n: int, seed: int, d: int = 4) -> Dataset:
    """``y = sin(2 x1) + 0.5 x2 + eps`` with ``eps ~ N(0, (0.1 + 0.4|x1|)^2)``, ``x ~ U[-2, 2]^d``.

    The group column is ``x1 > 0``.
    """
    if n < 100:
        raise ValueError("synth_heteroscedastic needs n >= 100")
    rng = make_rng(seed, "synthetic")
    x = rng.uniform(-2.0, 2.0, size=(n, d))
    truth = heteroscedastic_truth(x)
    y = truth.mu + truth.sigma * rng.standard_normal(n)
    groups = (x[:, 0] > 0).astype(np.int64)
    return Dataset(x, y, [f"x{j + 1}" for j in range(d)], "regression", groups=groups,
                   truth=heteroscedastic_truth)


def _class_means(m: int, separation: float, d: int) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(m) / m
    means = np.zeros((m, d))
    means[:, 0] = separation * np.cos(angles)
    means[:, 1] = separation * np.sin(angles)
    return means


def class_priors(m: int) -> np.ndarray:
    w = 1.0 + np.arange(m) / m
    return w / w.sum()


def synth_classification(n: int, m: int, seed: int, separation: float = 2.0, d: int = 4) -> Dataset:
    """Unit-variance Gaussian clusters with means on a circle of radius
    ``separation``; smaller separation means more overlap."""
    if not 2 <= m <= 10:
        raise ValueError("synth_classification supports 2..10 classes")
    rng = make_rng(seed, "synthetic")
    priors = class_priors(m)
    means = _class_means(m, separation, d)
    labels = rng.choice(m, size=n, p=priors)
    x = means[labels] + rng.standard_normal((n, d))

    def truth(feats):
        feats = np.asarray(feats, dtype=np.float64)
        logits = np.log(priors) + feats @ means.T - 0.5 * np.sum(means ** 2, axis=1)
        return special.softmax(logits, axis=1)

    return Dataset(x, labels, [f"x{j + 1}" for j in range(d)], "classification",
                   classes=list(range(m)), truth=truth)


GEO_LAT = (30.0, 48.0)
GEO_LON = (-120.0, -80.0)


def geo_truth(x) -> GaussianForecast:
    """Conditional law of the synthetic geospatial target given (lat, lon, temp, precip)."""
    x = np.asarray(x, dtype=np.float64)
    lat, lon, temp, precip = x[:, 0], x[:, 1], x[:, 2], x[:, 3]
    u = (lat - GEO_LAT[0]) / (GEO_LAT[1] - GEO_LAT[0])
    v = (lon - GEO_LON[0]) / (GEO_LON[1] - GEO_LON[0])
    mu = 2.0 * np.sin(np.pi * u) * np.cos(np.pi * v) + 0.4 * temp - 0.3 * precip
    sigma = 0.25 + 0.5 * np.exp(-((u - 0.7) ** 2 + (v - 0.3) ** 2) / 0.08)
    return GaussianForecast(mu, sigma)


def synth_geo(n: int, seed: int) -> Dataset:
    """Location-dependent regression target with columns lat, lon, temp, precip."""
    rng = make_rng(seed, "synthetic")
    lat = rng.uniform(*GEO_LAT, size=n)
    lon = rng.uniform(*GEO_LON, size=n)
    temp = rng.standard_normal(n) - 0.1 * (lat - 39.0)
    precip = rng.standard_normal(n)
    x = np.column_stack([lat, lon, temp, precip])
    truth = geo_truth(x)
    y = truth.mu + truth.sigma * rng.standard_normal(n)
    return Dataset(x, y, ["lat", "lon", "temp", "precip"], "regression", truth=geo_truth)


SYNTHETIC = {"heteroscedastic": synth_heteroscedastic, "classification": synth_classification,
             "geo": synth_geo}
