"""Calibration notions as (forecast variable, target variable, conditioning
variable) triples, each bound to a kernel over label x conditioning space.

Regression notions: quantile, threshold, marginal, decision, group,
distribution, individual, local. Classification notions: canonical,
toplabel, marginal_cls.

Conditioning variables that depend on the forecast (distribution,
canonical, toplabel, marginal_cls) stay on the tape, so the loss gradient
includes their dependence on the parameters. The same z is used on the
target and the forecast side.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as ad
from . import kernels as K
from .forecast import gaussian_cdf, reparam_sample

REGRESSION_TASKS = ("quantile", "threshold", "marginal", "decision", "group",
                    "distribution", "individual", "local")
CLASSIFICATION_TASKS = ("canonical", "toplabel", "marginal_cls")
PIT_TASKS = ("quantile", "threshold")


@dataclass(frozen=True)
class CalibrationTask:
    """A named calibration notion.

    Parameters used by particular notions: ``y0``/``alpha`` (threshold),
    ``c`` (decision), ``features`` (local: column indices of the feature
    map). Label-valued parameters are in standardized label units.
    """

    name: str
    y0: float | None = None
    alpha: float = 0.5
    c: float | None = None
    features: tuple = ()
    kernel: K.KernelSpec | None = None

    def __post_init__(self):
        if self.name not in REGRESSION_TASKS + CLASSIFICATION_TASKS:
            raise ValueError(f"unknown calibration task {self.name!r}")
        if self.name == "threshold" and not 0 < self.alpha < 1:
            raise ValueError("threshold alpha must lie in (0, 1)")

    @property
    def family(self) -> str:
        return "regression" if self.name in REGRESSION_TASKS else "classification"

    @property
    def label_transform(self) -> str:
        return "pit" if self.name in PIT_TASKS else "identity"

    def with_kernel(self, kernel: K.KernelSpec) -> "CalibrationTask":
        return replace(self, kernel=kernel)


@dataclass
class Batch:
    x: np.ndarray              # standardized features (n, d)
    y: np.ndarray              # standardized real labels or class indices
    groups: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class RegressionPairs:
    t: object                  # (n,) target-side variable (array or node)
    t_hat: object              # (n, S) forecast-side samples (array or node)
    z: object = None           # (n, d) array or node


@dataclass
class ClassificationPairs:
    labels: np.ndarray         # (n,) integer target labels
    pmf: object                # (n, k) forecast pmf over labels (array or node)
    z: object = None           # (n, d) array or node
    n_labels: int = field(init=False)

    def __post_init__(self):
        self.n_labels = ad.value_of(self.pmf).shape[1]


def bayes_action(mu, sigma, c: float) -> np.ndarray:
    """+1 when the forecast puts at least half its mass above ``c``, else -1."""
    above = 1.0 - np.asarray(gaussian_cdf(np.asarray(mu), np.asarray(sigma), c))
    return np.where(above >= 0.5, 1.0, -1.0)


def build_pairs(task: CalibrationTask, batch: Batch, outputs, S: int = 10,
                rng: np.random.Generator | None = None, eps: np.ndarray | None = None) -> list:
    """Target/forecast pairs for one batch; a list of channels (several only
    for ``marginal_cls``).

    ``outputs`` is ``(mu, sigma)`` for regression or a pmf for
    classification, as arrays or tape nodes. ``eps`` is the standard normal
    noise for reparameterized samples, drawn from ``rng`` when omitted.
    """
    n = len(batch)
    if task.family == "regression":
        if not (isinstance(outputs, tuple) and len(outputs) == 2):
            raise TypeError(f"task {task.name!r} needs a Gaussian forecaster")
        mu, sigma = outputs
        if eps is None:
            if rng is None:
                raise ValueError("either rng or eps is required for regression tasks")
            eps = rng.standard_normal((n, S))
        y_hat = reparam_sample(mu, sigma, eps)
        mu_v, sigma_v = ad.value_of(mu), ad.value_of(sigma)

        if task.name in PIT_TASKS:
            t = gaussian_cdf(mu, sigma, batch.y)
            mu_rows = ad.reshape(mu, (n, 1))
            sig_rows = ad.reshape(sigma, (n, 1))
            ones = np.ones((1, eps.shape[1]))
            t_hat = gaussian_cdf(ad.matmul(mu_rows, ones), ad.matmul(sig_rows, ones), y_hat)
        else:
            t, t_hat = np.asarray(batch.y, dtype=np.float64), y_hat

        name = task.name
        if name in ("quantile", "marginal"):
            z = None
        elif name == "threshold":
            if task.y0 is None:
                raise ValueError("threshold task needs y0")
            z = (np.asarray(gaussian_cdf(mu_v, sigma_v, task.y0)) <= task.alpha).astype(np.float64)[:, None]
        elif name == "decision":
            if task.c is None:
                raise ValueError("decision task needs threshold c")
            z = bayes_action(mu_v, sigma_v, task.c)[:, None]
        elif name == "group":
            if batch.groups is None:
                raise ValueError("group task needs a group column in the dataset")
            z = np.asarray(batch.groups, dtype=np.float64)[:, None]
        elif name == "distribution":
            z = ad.concat([ad.reshape(mu, (n, 1)), ad.reshape(ad.log(sigma), (n, 1))], axis=1)
        elif name == "individual":
            z = np.asarray(batch.x, dtype=np.float64)
        elif name == "local":
            if not task.features:
                raise ValueError("local task needs a feature subset")
            z = np.asarray(batch.x, dtype=np.float64)[:, list(task.features)]
        return [RegressionPairs(t, t_hat, z)]

    if isinstance(outputs, tuple):
        raise TypeError(f"task {task.name!r} needs a categorical forecaster")
    pmf = outputs
    q = ad.value_of(pmf)
    m = q.shape[1]
    y = np.asarray(batch.y, dtype=np.int64)
    if task.name == "canonical":
        return [ClassificationPairs(y, pmf, pmf)]
    if task.name == "toplabel":
        ystar = np.argmax(q, axis=1)
        onehot = np.zeros_like(q)
        onehot[np.arange(n), ystar] = 1.0
        qstar = ad.reshape(ad.sum_(ad.mul(pmf, onehot), axis=1), (n, 1))
        binary = ad.concat([ad.sub(np.ones((n, 1)), qstar), qstar], axis=1)
        return [ClassificationPairs((y == ystar).astype(np.int64), binary, qstar)]
    channels = []
    for k in range(m):
        qk = ad.cols(pmf, k, k + 1)
        binary = ad.concat([ad.sub(np.ones((n, 1)), qk), qk], axis=1)
        channels.append(ClassificationPairs((y == k).astype(np.int64), binary, qk))
    return channels


def default_kernel(task: CalibrationTask) -> K.KernelSpec:
    """Kernel for ``task`` with RBF bandwidths left for the median heuristic."""
    name = task.name
    if name in ("quantile", "marginal"):
        return K.RBF()
    if name == "threshold" or name == "group":
        return K.Product(K.RBF(), K.Delta())
    if name == "decision":
        return K.Product(K.TanhThreshold(task.c if task.c is not None else 0.0), K.Delta())
    if name in ("distribution", "individual", "local"):
        return K.Product(K.RBF(), K.RBF())
    return K.Product(K.Delta(), K.RBF())


def kernel_for(task: CalibrationTask) -> K.KernelSpec:
    return task.kernel if task.kernel is not None else default_kernel(task)


def target_rows(pairs) -> np.ndarray:
    """Plain-array target-side kernel inputs ``[t | z]`` (used for bandwidth selection)."""
    if isinstance(pairs, RegressionPairs):
        t = ad.value_of(pairs.t).reshape(-1, 1)
    else:
        t = np.asarray(pairs.labels, dtype=np.float64).reshape(-1, 1)
    return t if pairs.z is None else np.hstack([t, ad.value_of(pairs.z)])
