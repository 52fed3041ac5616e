"""Post-hoc recalibration fitted on a validation split."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

from .forecast import GaussianForecast

log = logging.getLogger(__name__)

SLOPE_FLOOR = 1e-6
_EDGE = 1e-16


@dataclass(frozen=True)
class QuantileRecalibrator:
    """Monotone piecewise-linear map R: [0, 1] -> [0, 1] through breakpoints."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x, y = np.asarray(self.x, float), np.asarray(self.y, float)
        if x[0] != 0 or x[-1] != 1 or y[0] != 0 or y[-1] != 1:
            raise ValueError("recalibration map must pass through (0, 0) and (1, 1)")
        if np.any(np.diff(x) <= 0) or np.any(np.diff(y) < 0):
            raise ValueError("breakpoints must have increasing x and nondecreasing y")

    @classmethod
    def identity(cls) -> "QuantileRecalibrator":
        return cls(np.array([0.0, 1.0]), np.array([0.0, 1.0]))

    def __call__(self, p) -> np.ndarray:
        return np.interp(p, self.x, self.y)

    def inverse(self, c) -> np.ndarray:
        """Generalized inverse ``inf{p : R(p) >= c}`` (flat runs map to their left end)."""
        c = np.asarray(c, dtype=np.float64)
        k = np.clip(np.searchsorted(self.y, c, side="left"), 1, len(self.y) - 1)
        y0, y1 = self.y[k - 1], self.y[k]
        x0, x1 = self.x[k - 1], self.x[k]
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = np.where(y1 > y0, (c - y0) / (y1 - y0), 0.0)
        return np.where(c <= self.y[0], self.x[0], x0 + np.clip(frac, 0, 1) * (x1 - x0))

    def slope(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        k = np.clip(np.searchsorted(self.x, p, side="right"), 1, len(self.x) - 1)
        s = (self.y[k] - self.y[k - 1]) / (self.x[k] - self.x[k - 1])
        return np.maximum(s, SLOPE_FLOOR)

    def to_dict(self) -> dict:
        return {"method": "isotonic", "x": self.x.tolist(), "y": self.y.tolist()}


def fit_isotonic(pit) -> QuantileRecalibrator:
    """Pool-adjacent-violators fit of sorted PITs against plotting positions
    ``i / (n + 1)``, with endpoints pinned at (0, 0) and (1, 1)."""
    pit = np.sort(np.asarray(pit, dtype=np.float64))
    n = len(pit)
    if n < 10:
        raise ValueError(f"isotonic recalibration needs >= 10 validation points, got {n}; "
                         "use a larger validation split")
    targets = np.arange(1, n + 1) / (n + 1)
    xs, inverse, counts = np.unique(pit, return_inverse=True, return_counts=True)
    pooled = np.bincount(inverse, weights=targets) / counts
    fitted = optimize.isotonic_regression(pooled, weights=counts.astype(float)).x
    inside = (xs > 0) & (xs < 1)
    x = np.concatenate([[0.0], xs[inside], [1.0]])
    y = np.concatenate([[0.0], np.clip(fitted[inside], 0, 1), [1.0]])
    return QuantileRecalibrator(x, np.maximum.accumulate(y))


@dataclass
class RecalibratedForecast:
    """Composition of a Gaussian forecast with a quantile recalibration map."""

    base: GaussianForecast
    R: QuantileRecalibrator

    def __len__(self) -> int:
        return len(self.base)

    def cdf(self, y) -> np.ndarray:
        return self.R(self.base.cdf(y))

    def icdf(self, c) -> np.ndarray:
        c = np.asarray(c, dtype=np.float64)
        if np.any((c <= 0) | (c >= 1)):
            raise ValueError("quantile level must lie strictly inside (0, 1)")
        p = np.clip(self.R.inverse(c), _EDGE, 1 - _EDGE)
        return self.base.icdf(p)

    def logpdf(self, y) -> np.ndarray:
        return self.base.logpdf(y) + np.log(self.R.slope(self.base.cdf(y)))

    def sample(self, rng: np.random.Generator, S: int = 1) -> np.ndarray:
        u = rng.uniform(size=(len(self.base), S))
        p = np.clip(self.R.inverse(u), _EDGE, 1 - _EDGE)
        return self.base.mu[:, None] + self.base.sigma[:, None] * special.ndtri(p)


def recalibrate_cdf(R: QuantileRecalibrator, forecast, y) -> np.ndarray:
    return R(forecast.cdf(y))


def recalibrate_icdf(R: QuantileRecalibrator, forecast, c) -> np.ndarray:
    return RecalibratedForecast(forecast, R).icdf(c)


# --- temperature scaling -----------------------------------------------------

@dataclass(frozen=True)
class TemperatureScaler:
    T: float = 1.0

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("temperature must be positive")

    def __call__(self, logits) -> np.ndarray:
        return special.softmax(np.asarray(logits, dtype=np.float64) / self.T, axis=1)

    def to_dict(self) -> dict:
        return {"method": "temperature", "T": self.T}


def mean_xent(logits, y, T: float) -> float:
    logp = special.log_softmax(np.asarray(logits, dtype=np.float64) / T, axis=1)
    return float(-np.mean(logp[np.arange(len(logp)), np.asarray(y, dtype=np.intp)]))


def fit_temperature(logits, y, lo: float = 0.05, hi: float = 20.0, tol: float = 1e-4) -> TemperatureScaler:
    """Golden-section search over log T for the validation cross entropy."""
    logits = np.asarray(logits, dtype=np.float64)
    if len(logits) < 10:
        raise ValueError(f"temperature scaling needs >= 10 validation points, got {len(logits)}")
    if np.all(np.ptp(logits, axis=1) == 0):
        log.warning("all logits are constant per row; temperature left at 1")
        return TemperatureScaler(1.0)

    f = lambda u: mean_xent(logits, y, float(np.exp(u)))
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = np.log(lo), np.log(hi)
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while np.exp(b) - np.exp(a) >= tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    T = float(np.exp(0.5 * (a + b)))
    if f(np.log(T)) > mean_xent(logits, y, 1.0):
        T = 1.0
    return TemperatureScaler(T)


def from_dict(d: dict | None):
    if d is None:
        return None
    if d["method"] == "isotonic":
        return QuantileRecalibrator(np.asarray(d["x"], float), np.asarray(d["y"], float))
    if d["method"] == "temperature":
        return TemperatureScaler(float(d["T"]))
    raise ValueError(f"unknown recalibration method {d['method']!r}")
