"""Unbiased MMD^2 estimators, the regularized training objective, and an
exact population oracle over finite supports."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import diffcore as ad
from . import kernels as K
from .caltasks import (Batch, CalibrationTask, ClassificationPairs, RegressionPairs,
                       build_pairs, kernel_for)
from .forecast import gaussian_nll, xent

# Above this many forecast-sample rows the forecast/forecast Gram is built
# one sample index at a time instead of as a single (nS x nS) block.
_FULL_GRAM_ROWS = 2048


@dataclass
class MmdEstimate:
    value: object              # float, or a scalar tape node
    n: int
    S: int
    kernel: K.KernelSpec

    def __float__(self) -> float:
        return float(ad.value_of(self.value))


def _rows(t, z):
    t = ad.reshape(t, (-1, 1)) if isinstance(t, ad.Node) else np.asarray(t, dtype=np.float64).reshape(-1, 1)
    if z is None:
        return t
    return ad.concat([t, z if isinstance(z, ad.Node) else np.asarray(z, dtype=np.float64)], axis=1)


def _offdiag_mean(h, n: int):
    mask = 1.0 - np.eye(n)
    return ad.scale(ad.sum_(ad.mul(h, mask)), 1.0 / (n * (n - 1)))


def regression_h(kernel: K.KernelSpec, t, t_hat, z=None):
    """Matrix of multi-sample U-statistic terms h_ij (diagonal is meaningless)."""
    n = ad.value_of(t).shape[0]
    t_hat = t_hat if isinstance(t_hat, ad.Node) else np.asarray(t_hat, dtype=np.float64)
    if ad.value_of(t_hat).ndim == 1:
        t_hat = ad.reshape(t_hat, (n, 1))
    S = ad.value_of(t_hat).shape[1]
    Ut = _rows(t, z)
    k_tt = K.gram(kernel, Ut, Ut)

    # Forecast rows ordered sample-major: row s*n + i holds sample s of example i.
    flat = ad.reshape(ad.transpose(t_hat), (-1,))
    z_rep = None if z is None else ad.concat([z] * S, axis=0)
    Uf = _rows(flat, z_rep)

    k_tf = ad.scale(ad.sum_(ad.reshape(K.gram(kernel, Ut, Uf), (n, S, n)), axis=1), 1.0 / S)
    if n * S <= _FULL_GRAM_ROWS:
        k_ff = ad.reshape(K.gram(kernel, Uf, Uf), (S, n, S, n))
        k_ff = ad.scale(ad.sum_(k_ff, axis=(0, 2)), 1.0 / (S * S))
    else:
        k_ff = None
        for s in range(S):
            Us = _rows(ad.reshape(ad.cols(t_hat, s, s + 1), (-1,)), z)
            block = ad.sum_(ad.reshape(K.gram(kernel, Us, Uf), (n, S, n)), axis=1)
            k_ff = block if k_ff is None else ad.add(k_ff, block)
        k_ff = ad.scale(k_ff, 1.0 / (S * S))
    return ad.sub(ad.sub(ad.add(k_tt, k_ff), k_tf), ad.transpose(k_tf))


def _blocked_regression_value(kernel, t, t_hat, z, rows: int = 512) -> float:
    """Same value as the dense path, accumulated over row blocks so memory
    stays O(rows * n). Used for plain arrays (evaluation, not training)."""
    n, S = t_hat.shape
    Ut = _rows(t, z)
    Us = [_rows(t_hat[:, s], z) for s in range(S)]
    total = 0.0
    for lo in range(0, n, rows):
        hi = min(lo + rows, n)
        h = np.asarray(K.gram(kernel, Ut[lo:hi], Ut))
        for s in range(S):
            h -= np.asarray(K.gram(kernel, Ut[lo:hi], Us[s])) / S
            h -= np.asarray(K.gram(kernel, Us[s][lo:hi], Ut)) / S
            for r in range(S):
                h += np.asarray(K.gram(kernel, Us[s][lo:hi], Us[r])) / (S * S)
        h[np.arange(hi - lo), np.arange(lo, hi)] = 0.0
        total += float(h.sum())
    return total / (n * (n - 1))


def mmd_usq_regression(kernel: K.KernelSpec, t, t_hat, z=None) -> MmdEstimate:
    """Unbiased MMD^2 between target rows ``(t_i, z_i)`` and forecast rows
    ``(t_hat_i^(s), z_i)``, averaging over all sample pairs and excluding i == j.

    ``t`` has shape (n,), ``t_hat`` shape (n, S) (or (n,) for S = 1).
    """
    n = ad.value_of(t).shape[0]
    if n < 2:
        raise ValueError("at least two examples per batch are required")
    S = ad.value_of(t_hat).shape[1] if ad.value_of(t_hat).ndim == 2 else 1
    on_tape = any(isinstance(v, ad.Node) for v in (t, t_hat, z))
    if not on_tape and n * S > _FULL_GRAM_ROWS:
        th = np.asarray(t_hat, dtype=np.float64).reshape(n, S)
        zz = None if z is None else np.asarray(z, dtype=np.float64)
        return MmdEstimate(_blocked_regression_value(kernel, np.asarray(t, dtype=np.float64), th, zz), n, S, kernel)
    h = regression_h(kernel, t, t_hat, z)
    return MmdEstimate(_offdiag_mean(h, n), n, S, kernel)


def classification_h(kernel: K.KernelSpec, labels, pmf, z=None):
    """U-statistic terms with the forecast label distribution summed out:

    h_ij = k(t_i, t_j) + sum_{a,b} q_i(a) q_j(b) k(a_i, b_j)
           - sum_a q_i(a) k(a_i, t_j) - sum_a q_j(a) k(t_i, a_j)

    where ``a_i`` abbreviates ``(a, z_i)``. Summed over ordered pairs this
    matches the ``-2 sum_a q_i(a) k(a_i, t_j)`` form.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, m = ad.value_of(pmf).shape
    if z is not None and ad.value_of(z).shape[0] != n:
        raise ad.ShapeError("conditioning variables and pmf disagree on batch size")
    Ut = _rows(labels.astype(np.float64), z)
    k_tt = K.gram(kernel, Ut, Ut)
    ones = np.ones(n)
    Ua = [_rows(a * ones, z) for a in range(m)]
    q = [ad.reshape(ad.cols(pmf, a, a + 1), (n,)) for a in range(m)]
    k_ft = k_ff = None
    for a in range(m):
        ft = ad.einsum("i,ij->ij", q[a], K.gram(kernel, Ua[a], Ut))
        k_ft = ft if k_ft is None else ad.add(k_ft, ft)
        for b in range(a, m):
            G = K.gram(kernel, Ua[a], Ua[b])
            term = ad.einsum("i,j,ij->ij", q[a], q[b], G)
            if b != a:
                # k(b_i, a_j) = G[j, i] by symmetry
                term = ad.add(term, ad.einsum("i,j,ji->ij", q[b], q[a], G))
            k_ff = term if k_ff is None else ad.add(k_ff, term)
    return ad.sub(ad.sub(ad.add(k_ff, k_tt), k_ft), ad.transpose(k_ft))


def mmd_usq_classification(kernel: K.KernelSpec, labels, pmf, z=None) -> MmdEstimate:
    """Unbiased MMD^2 with analytic marginalization of forecast labels; O(n^2 m^2)."""
    q = ad.value_of(pmf)
    n = q.shape[0]
    if n < 2:
        raise ValueError("at least two examples per batch are required")
    if np.any(q < -1e-12) or np.any(np.abs(q.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("pmf rows must be nonnegative and sum to one")
    h = classification_h(kernel, labels, pmf, z)
    return MmdEstimate(_offdiag_mean(h, n), n, 1, kernel)


def mmd_for_pairs(kernel: K.KernelSpec, channels: list):
    """Sum of per-channel MMD^2 estimates (array or node)."""
    total = None
    for ch in channels:
        if isinstance(ch, RegressionPairs):
            est = mmd_usq_regression(kernel, ch.t, ch.t_hat, ch.z)
        elif isinstance(ch, ClassificationPairs):
            est = mmd_usq_classification(kernel, ch.labels, ch.pmf, ch.z)
        else:
            raise TypeError(f"unexpected pairs object {type(ch).__name__}")
        total = est.value if total is None else ad.add(total, est.value)
    return total


class LossParts(NamedTuple):
    total: object
    nll: object
    mmd: object


def training_loss(batch: Batch, forecaster, task: CalibrationTask | None, lam: float,
                  S: int = 10, rng: np.random.Generator | None = None, params=None,
                  eps: np.ndarray | None = None) -> LossParts:
    """``sum_i NLL_i + lam * MMD^2`` on one batch.

    ``params`` defaults to the forecaster's own arrays; pass tape nodes to
    differentiate. With ``lam == 0`` or no task the MMD term is skipped.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    outputs = forecaster.outputs(batch.x, params)
    if forecaster.kind == "gaussian":
        nll = gaussian_nll(outputs[0], outputs[1], batch.y, reduce="sum")
    else:
        nll = xent(outputs, batch.y, reduce="sum")
    if lam == 0 or task is None:
        return LossParts(nll, nll, 0.0)
    channels = build_pairs(task, batch, outputs, S=S, rng=rng, eps=eps)
    mmd = mmd_for_pairs(kernel_for(task), channels)
    return LossParts(ad.add(nll, ad.scale(mmd, lam)), nll, mmd)


def population_mmd_oracle(P, Q, kernel: K.KernelSpec) -> float:
    """Exact MMD^2 between two finite distributions given as ``(points, probs)``.

    ``points`` has one row per support atom (rows are ``[t | z]``).
    """
    (xp, wp), (xq, wq) = P, Q
    xp = np.asarray(xp, dtype=np.float64).reshape(len(wp), -1)
    xq = np.asarray(xq, dtype=np.float64).reshape(len(wq), -1)
    wp, wq = np.asarray(wp, dtype=np.float64), np.asarray(wq, dtype=np.float64)
    kpp = wp @ np.asarray(K.gram(kernel, xp, xp)) @ wp
    kqq = wq @ np.asarray(K.gram(kernel, xq, xq)) @ wq
    kpq = wp @ np.asarray(K.gram(kernel, xp, xq)) @ wq
    return float(kpp + kqq - 2.0 * kpq)
