"""Held-out evaluation metrics for regression and classification forecasts.

Regression metrics take a forecast object exposing ``cdf`` (and ``logpdf``
for NLL); classification metrics take pmf matrices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .forecast import entropy as _row_entropy
from .mmd import mmd_usq_classification, mmd_usq_regression


def coverage(pit, levels) -> np.ndarray:
    pit = np.asarray(pit, dtype=np.float64)
    return (pit[None, :] <= np.asarray(levels)[:, None]).mean(axis=1)


def qce_from_pit(pit, n_levels: int = 20) -> float:
    """Mean absolute coverage gap at levels ``j / (n_levels + 1)``."""
    pit = np.asarray(pit, dtype=np.float64)
    if pit.size == 0:
        raise ValueError("qce of an empty dataset")
    if n_levels < 2:
        raise ValueError("qce needs at least two levels")
    levels = np.arange(1, n_levels + 1) / (n_levels + 1)
    return float(np.mean(np.abs(coverage(pit, levels) - levels)))


def qce(forecast, y, n_levels: int = 20) -> float:
    return qce_from_pit(forecast.cdf(y), n_levels)


def top_label(pmf) -> tuple[np.ndarray, np.ndarray]:
    """Predicted class (ties to the lowest index) and its probability."""
    pmf = np.asarray(pmf, dtype=np.float64)
    pred = np.argmax(pmf, axis=1)
    return pred, pmf[np.arange(len(pmf)), pred]


def ece(pmf, y, bins: int = 10) -> float:
    """Frequency-weighted |accuracy - confidence| over equal-width confidence bins."""
    y = np.asarray(y)
    if y.size == 0:
        raise ValueError("ece of an empty dataset")
    pred, conf = top_label(pmf)
    correct = (pred == y).astype(np.float64)
    idx = np.minimum((conf * bins).astype(int), bins - 1)
    total = 0.0
    for b in range(bins):
        sel = idx == b
        if sel.any():
            total += sel.mean() * abs(correct[sel].mean() - conf[sel].mean())
    return float(total)


def dce_squared(forecast, y, c: float) -> float:
    """Squared decision calibration error for the threshold loss at ``c``.

    Action +1 is wrong when ``y <= c``, action -1 when ``y > c``; forecast
    expectations are exact via the forecast cdf.
    """
    y = np.asarray(y, dtype=np.float64)
    q_below = np.asarray(forecast.cdf(np.full_like(y, c)))
    gap_plus = np.mean(y <= c) - np.mean(q_below)
    gap_minus = np.mean(y > c) - np.mean(1.0 - q_below)
    return float(gap_plus ** 2 + gap_minus ** 2)


def dce(forecast, y, c: float) -> float:
    return float(np.sqrt(dce_squared(forecast, y, c)))


def lce(forecast, y, phi_x, queries, kernel: K.KernelSpec, n_levels: int = 20):
    """Local calibration error at each query point.

    Returns ``(gaps, totals)``: ``gaps[q, b]`` is the kernel-weighted coverage
    at level ``(b+1)/n_levels`` minus that level; ``totals[q]`` is the mean of
    squared gaps. ``y <= Q^{-1}(c)`` is evaluated as ``Q(y) <= c``, which is
    equivalent for continuous forecasts and well defined at ``c = 1``.
    """
    pit = np.asarray(forecast.cdf(y))
    W = np.asarray(K.gram(kernel, np.asarray(queries, float), np.asarray(phi_x, float)))
    wsum = W.sum(axis=1)
    bad = np.flatnonzero(wsum <= 0)
    if bad.size:
        q = np.asarray(queries)[bad[0]]
        raise ZeroDivisionError(f"zero total kernel weight at query point {q.tolist()}")
    levels = np.arange(1, n_levels + 1) / n_levels
    hits = (pit[None, :] <= levels[:, None]).astype(np.float64)  # (B, n)
    gaps = (W @ hits.T) / wsum[:, None] - levels[None, :]
    return gaps, np.mean(gaps ** 2, axis=1)


def kce(x, y, forecast, bandwidths=None, S: int = 10, rng=None) -> float:
    """MMD^2 calibration error with an RBF kernel over features x labels.

    ``forecast`` is a Gaussian forecast (sampled ``S`` times) or a pmf
    (marginalized analytically). ``bandwidths`` is ``(label_bw, feature_bw)``;
    defaults come from the median heuristic.
    """
    x = np.asarray(x, dtype=np.float64)
    if isinstance(forecast, np.ndarray):
        bw_x = K.median_heuristic(x[:500]) if bandwidths is None else bandwidths[1]
        kern = K.Product(K.Delta(), K.RBF(bw_x))
        return float(mmd_usq_classification(kern, y, forecast, x))
    y = np.asarray(y, dtype=np.float64)
    if bandwidths is None:
        bandwidths = (K.median_heuristic(y[:500]), K.median_heuristic(x[:500]))
    kern = K.Product(K.RBF(bandwidths[0]), K.RBF(bandwidths[1]))
    rng = rng if rng is not None else np.random.default_rng(0)
    samples = forecast.sample(rng, S)
    return float(mmd_usq_regression(kern, y, samples, x))


def accuracy(pmf, y) -> float:
    pred, _ = top_label(pmf)
    return float(np.mean(pred == np.asarray(y)))


def mean_entropy(pmf) -> float:
    return float(np.mean(_row_entropy(pmf)))


def nll_eval(forecast, y) -> float:
    """Mean negative log-likelihood: Gaussian-like forecast objects or pmf matrices."""
    if isinstance(forecast, np.ndarray):
        p = forecast[np.arange(len(forecast)), np.asarray(y, dtype=np.intp)]
        return float(np.mean(-np.log(np.maximum(p, 1e-12))))
    return float(np.mean(-forecast.logpdf(y)))


@dataclass
class MetricReport:
    values: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def to_dict(self) -> dict:
        out = {k: float(v) for k, v in self.values.items() if v is not None}
        out["meta"] = self.meta
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def summary(self) -> str:
        return " ".join(f"{k}={v:.4f}" for k, v in sorted(self.values.items()) if v is not None)
