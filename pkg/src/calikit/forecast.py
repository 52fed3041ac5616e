"""Neural probabilistic forecasters and their distribution utilities.

Two heads share one fully connected relu trunk: a Gaussian head emitting
``(mu, s)`` with ``sigma = softplus(s) + sigma_min``, and a categorical head
emitting logits. Everything here runs on plain arrays or on tape nodes.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special

from . import diffcore as ad

MAGIC = "CALIKIT-MODEL-v1"
LOG_2PI = float(np.log(2.0 * np.pi))
XENT_FLOOR = 1e-12

# Number of probabilities clamped at XENT_FLOOR by xent(); inspected by tests and logs.
xent_clamp_count = 0


# --- MLP ---------------------------------------------------------------------

def init_params(n_in: int, hidden_sizes, n_out: int, rng: np.random.Generator) -> dict:
    """He-scaled normal weights and zero biases, named ``W0, b0, ..., Wk, bk``."""
    sizes = [n_in, *hidden_sizes, n_out]
    params = {}
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"W{k}"] = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        params[f"b{k}"] = np.zeros(fan_out)
    return params


def mlp(params, x):
    n_layers = len(params) // 2
    h = x
    for k in range(n_layers):
        h = ad.affine(h, params[f"W{k}"], params[f"b{k}"])
        if k < n_layers - 1:
            h = ad.relu(h)
    return h


def _check_finite(arr, what: str) -> None:
    if not np.all(np.isfinite(ad.value_of(arr))):
        raise FloatingPointError(f"non-finite {what}")


def predict_gaussian(params, x, sigma_min: float = 1e-3):
    """Return ``(mu, sigma)`` with shape ``(n,)`` each."""
    out = mlp(params, x)
    _check_finite(out, "network activations")
    mu = ad.reshape(ad.cols(out, 0, 1), (-1,))
    sigma = ad.add(ad.softplus(ad.reshape(ad.cols(out, 1, 2), (-1,))), sigma_min)
    return mu, sigma


def predict_logits(params, x):
    out = mlp(params, x)
    _check_finite(out, "network activations")
    return out


def predict_categorical(params, x):
    return ad.softmax(predict_logits(params, x))


@dataclass
class Forecaster:
    """A trained or freshly initialised MLP forecaster."""

    kind: str  # "gaussian" or "categorical"
    n_features: int
    hidden_sizes: tuple
    n_outputs: int
    params: dict
    sigma_min: float = 1e-3

    @classmethod
    def create(cls, kind: str, n_features: int, hidden_sizes=(128, 128, 128),
               n_classes: int | None = None, sigma_min: float = 1e-3,
               rng: np.random.Generator | None = None) -> "Forecaster":
        if kind not in ("gaussian", "categorical"):
            raise ValueError(f"unknown forecaster kind {kind!r}")
        n_out = 2 if kind == "gaussian" else int(n_classes)
        rng = rng if rng is not None else np.random.default_rng(0)
        params = init_params(n_features, hidden_sizes, n_out, rng)
        return cls(kind, n_features, tuple(hidden_sizes), n_out, params, sigma_min)

    def outputs(self, x, params=None):
        """Graph-friendly forward: ``(mu, sigma)`` or pmf."""
        p = self.params if params is None else params
        if self.kind == "gaussian":
            return predict_gaussian(p, x, self.sigma_min)
        return predict_categorical(p, x)

    def predict(self, x):
        """Numpy forward returning a :class:`GaussianForecast` or a pmf matrix."""
        if self.kind == "gaussian":
            mu, sigma = predict_gaussian(self.params, x, self.sigma_min)
            return GaussianForecast(np.asarray(mu), np.asarray(sigma))
        return np.asarray(predict_categorical(self.params, x))

    def logits(self, x) -> np.ndarray:
        return np.asarray(predict_logits(self.params, x))


# --- Gaussian distribution helpers -------------------------------------------

def gaussian_nll(mu, sigma, y, reduce: str = "sum"):
    """Negative log density of ``y`` under ``N(mu, sigma^2)``."""
    if np.any(ad.value_of(sigma) <= 0):
        raise ValueError("sigma must be positive")
    z = ad.div(ad.sub(y, mu), sigma)
    per = ad.add(ad.add(ad.log(sigma), ad.scale(ad.square(z), 0.5)), 0.5 * LOG_2PI)
    if reduce == "none":
        return per
    return ad.sum_(per) if reduce == "sum" else ad.mean(per)


def gaussian_cdf(mu, sigma, y):
    if np.any(ad.value_of(sigma) <= 0):
        raise ValueError("sigma must be positive")
    return ad.normal_cdf(ad.div(ad.sub(y, mu), sigma))


def gaussian_icdf(mu, sigma, p):
    p = np.asarray(p, dtype=np.float64)
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("quantile level must lie strictly inside (0, 1)")
    return np.asarray(mu) + np.asarray(sigma) * special.ndtri(p)


def reparam_sample(mu, sigma, eps):
    """``mu + sigma * eps`` for ``eps`` of shape ``(n, S)``; returns ``(n, S)``."""
    eps = np.asarray(eps, dtype=np.float64)
    n, S = eps.shape
    mu_rows = ad.reshape(mu, (n, 1))
    sig_rows = ad.reshape(sigma, (n, 1))
    ones = np.ones((1, S))
    return ad.add(ad.matmul(mu_rows, ones), ad.mul(ad.matmul(sig_rows, ones), eps))


@dataclass
class GaussianForecast:
    """Per-example Gaussian predictive distributions (plain arrays)."""

    mu: np.ndarray
    sigma: np.ndarray

    def __len__(self) -> int:
        return len(self.mu)

    def cdf(self, y) -> np.ndarray:
        return special.ndtr((np.asarray(y) - self.mu) / self.sigma)

    def icdf(self, p) -> np.ndarray:
        return gaussian_icdf(self.mu, self.sigma, p)

    def logpdf(self, y) -> np.ndarray:
        return -np.asarray(gaussian_nll(self.mu, self.sigma, np.asarray(y, float), reduce="none"))

    def sample(self, rng: np.random.Generator, S: int = 1) -> np.ndarray:
        return self.mu[:, None] + self.sigma[:, None] * rng.standard_normal((len(self.mu), S))

    def subset(self, idx) -> "GaussianForecast":
        return GaussianForecast(self.mu[idx], self.sigma[idx])


# --- categorical helpers -----------------------------------------------------

def xent(pmf, y, reduce: str = "sum"):
    """Cross entropy ``-log pmf[y]``; probabilities below 1e-12 are clamped."""
    global xent_clamp_count
    y = np.asarray(y, dtype=np.intp)
    onehot = np.zeros(ad.value_of(pmf).shape)
    onehot[np.arange(len(y)), y] = 1.0
    picked = ad.sum_(ad.mul(pmf, onehot), axis=1)
    pv = ad.value_of(picked)
    low = pv < XENT_FLOOR
    if np.any(low):
        xent_clamp_count += int(low.sum())
        warnings.warn(f"{int(low.sum())} probabilities clamped at {XENT_FLOOR} in xent")
        picked = ad.add(picked, np.where(low, XENT_FLOOR - pv, 0.0))
    per = ad.neg(ad.log(picked))
    if reduce == "none":
        return per
    return ad.sum_(per) if reduce == "sum" else ad.mean(per)


def xent_from_logits(logits, y, reduce: str = "sum"):
    y = np.asarray(y, dtype=np.intp)
    onehot = np.zeros(ad.value_of(logits).shape)
    onehot[np.arange(len(y)), y] = 1.0
    per = ad.neg(ad.sum_(ad.mul(ad.log_softmax(logits), onehot), axis=1))
    if reduce == "none":
        return per
    return ad.sum_(per) if reduce == "sum" else ad.mean(per)


def entropy(pmf) -> np.ndarray:
    """Per-row Shannon entropy in nats (``0 log 0 = 0``)."""
    p = np.asarray(pmf, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=-1)


# --- checkpoints -------------------------------------------------------------

def save_params(path, params: dict) -> None:
    """Write named float64 arrays to a flat little-endian binary file.

    Layout: magic line, uint64 header length, JSON header (names, shapes,
    offsets), raw data. Output is byte-for-byte reproducible.
    """
    names = sorted(params)
    entries, offset = [], 0
    for name in names:
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = json.dumps({"format": MAGIC, "arrays": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write((MAGIC + "\n").encode())
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for name in names:
            fh.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())


def load_params(path) -> dict:
    raw = Path(path).read_bytes()
    magic = (MAGIC + "\n").encode()
    if not raw.startswith(magic):
        raise ValueError(f"{path}: not a {MAGIC} checkpoint")
    pos = len(magic)
    (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    header = json.loads(raw[pos:pos + hlen])
    base = pos + hlen
    params = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        params[e["name"]] = np.frombuffer(raw[start:start + 8 * count], dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return params
