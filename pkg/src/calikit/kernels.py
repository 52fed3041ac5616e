"""Declarative kernels over (label, conditioning-variable) rows.

Inputs are row matrices of shape ``(n, d)``. :func:`gram` works on plain
arrays and on :class:`~calikit.diffcore.Node` inputs alike, so the same
kernel definitions serve the training objective and the evaluation metrics.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from . import diffcore as ad

__all__ = [
    "RBF", "Linear", "Moment", "Min", "TanhThreshold", "Delta", "Scaled", "Product",
    "KernelSpec", "gram", "eval_kernel", "psd_check", "to_dict", "from_dict",
    "median_heuristic", "resolve_bandwidths", "input_dim",
]


@dataclass(frozen=True)
class RBF:
    """``exp(-||u - v||^2 / (2 bandwidth^2))``; ``bandwidth=None`` means median heuristic."""

    bandwidth: float | None = None

    def __post_init__(self):
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError(f"rbf bandwidth must be positive, got {self.bandwidth}")


@dataclass(frozen=True)
class Linear:
    pass


@dataclass(frozen=True)
class Moment:
    """Inner product of the features ``(y, y^2)`` of scalar labels."""


@dataclass(frozen=True)
class Min:
    """``min(y, y')`` for scalar labels in ``[0, upper]``."""

    upper: float

    def __post_init__(self):
        if not self.upper > 0:
            raise ValueError(f"min kernel domain bound must be positive, got {self.upper}")


@dataclass(frozen=True)
class TanhThreshold:
    """``tanh(y - c) * tanh(y' - c)``: a rank-one, decision-aligned kernel."""

    c: float


@dataclass(frozen=True)
class Delta:
    """``1{u == v}`` (row-wise exact equality) for discrete inputs."""


@dataclass(frozen=True)
class Scaled:
    alpha: float
    inner: "KernelSpec"

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"scaled kernel factor must be positive, got {self.alpha}")


@dataclass(frozen=True)
class Product:
    """Pointwise product of two kernels acting on column slices of the input.

    ``right_slice`` stop ``None`` means "through the last column".
    """

    left: "KernelSpec"
    right: "KernelSpec"
    left_slice: tuple = (0, 1)
    right_slice: tuple = (1, None)


KernelSpec = Union[RBF, Linear, Moment, Min, TanhThreshold, Delta, Scaled, Product]


def _as_rows(x):
    if isinstance(x, ad.Node):
        if x.value.ndim == 1:
            return ad.reshape(x, (-1, 1))
        return x
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(-1, 1) if x.ndim == 1 else x


def _slice(x, sl: tuple, d: int):
    start, stop = sl[0], d if sl[1] is None else sl[1]
    if start == 0 and stop == d:
        return x
    return ad.cols(x, start, stop)


def _require_scalar(name: str, *mats) -> None:
    for m in mats:
        if ad.value_of(m).shape[1] != 1:
            raise ad.ShapeError(f"{name} kernel expects one column, got {ad.value_of(m).shape[1]}")


def gram(spec: KernelSpec, U, V):
    """Kernel matrix ``K[i, j] = k(U_i, V_j)``."""
    U, V = _as_rows(U), _as_rows(V)
    du, dv = ad.value_of(U).shape[1], ad.value_of(V).shape[1]
    if du != dv:
        raise ad.ShapeError(f"kernel inputs have {du} and {dv} columns")

    if isinstance(spec, RBF):
        if spec.bandwidth is None:
            raise ValueError("rbf bandwidth unresolved; call resolve_bandwidths first")
        d2 = ad.pairwise_sqdist(U, V)
        return ad.exp(ad.scale(d2, -0.5 / spec.bandwidth ** 2))
    if isinstance(spec, Linear):
        return ad.matmul(U, ad.transpose(V))
    if isinstance(spec, Moment):
        _require_scalar("moment", U, V)
        fu = ad.concat([U, ad.square(U)], axis=1)
        fv = ad.concat([V, ad.square(V)], axis=1)
        return ad.matmul(fu, ad.transpose(fv))
    if isinstance(spec, Min):
        _require_scalar("min", U, V)
        for m in (U, V):
            vals = ad.value_of(m)
            if vals.min() < 0 or vals.max() > spec.upper:
                raise ValueError(f"min kernel inputs must lie in [0, {spec.upper}]")
        return ad.pairwise_min(U, V)
    if isinstance(spec, TanhThreshold):
        _require_scalar("tanh_threshold", U, V)
        tu = ad.tanh(ad.add(U, -spec.c))
        tv = ad.tanh(ad.add(V, -spec.c))
        return ad.matmul(tu, ad.transpose(tv))
    if isinstance(spec, Delta):
        Uv, Vv = ad.value_of(U), ad.value_of(V)
        return np.all(Uv[:, None, :] == Vv[None, :, :], axis=2).astype(np.float64)
    if isinstance(spec, Scaled):
        return ad.scale(gram(spec.inner, U, V), spec.alpha)
    if isinstance(spec, Product):
        left = gram(spec.left, _slice(U, spec.left_slice, du), _slice(V, spec.left_slice, du))
        right = gram(spec.right, _slice(U, spec.right_slice, du), _slice(V, spec.right_slice, du))
        return ad.mul(left, right)
    raise TypeError(f"unknown kernel spec {spec!r}")


def eval_kernel(spec: KernelSpec, u, v) -> float:
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    return float(gram(spec, u[None, :], v[None, :])[0, 0])


def psd_check(spec: KernelSpec, samples, tol: float = 1e-8, *, gram_matrix=None) -> bool:
    """True iff the smallest Gram eigenvalue is at least ``-tol * trace``."""
    K = np.asarray(gram(spec, samples, samples) if gram_matrix is None else gram_matrix)
    K = 0.5 * (K + K.T)
    lam_min = np.linalg.eigvalsh(K)[0]
    return bool(lam_min >= -tol * max(np.trace(K), 1e-300))


def median_heuristic(X) -> float:
    """Median pairwise Euclidean distance between rows; 1.0 if degenerate."""
    X = _as_rows(np.asarray(X, dtype=np.float64))
    d2 = np.asarray(ad.pairwise_sqdist(X, X))
    iu = np.triu_indices(len(X), k=1)
    med = float(np.median(np.sqrt(np.maximum(d2[iu], 0.0)))) if len(iu[0]) else 0.0
    return med if med > 1e-12 else 1.0


def resolve_bandwidths(spec: KernelSpec, X) -> KernelSpec:
    """Replace every unset RBF bandwidth by the median heuristic on the
    columns of ``X`` that kernel sees."""
    X = _as_rows(np.asarray(X, dtype=np.float64))
    if isinstance(spec, RBF):
        return spec if spec.bandwidth is not None else RBF(median_heuristic(X))
    if isinstance(spec, Scaled):
        return Scaled(spec.alpha, resolve_bandwidths(spec.inner, X))
    if isinstance(spec, Product):
        d = X.shape[1]
        lo, hi = spec.left_slice[0], d if spec.left_slice[1] is None else spec.left_slice[1]
        ro, rh = spec.right_slice[0], d if spec.right_slice[1] is None else spec.right_slice[1]
        return Product(resolve_bandwidths(spec.left, X[:, lo:hi]),
                       resolve_bandwidths(spec.right, X[:, ro:rh]),
                       spec.left_slice, spec.right_slice)
    return spec


def input_dim(spec: KernelSpec) -> int | None:
    if isinstance(spec, (Moment, Min, TanhThreshold)):
        return 1
    return None


_NAMES = {RBF: "rbf", Linear: "linear", Moment: "moment", Min: "min",
          TanhThreshold: "tanh_threshold", Delta: "delta", Scaled: "scaled", Product: "product"}


def to_dict(spec: KernelSpec) -> dict:
    out = {"variant": _NAMES[type(spec)]}
    if isinstance(spec, RBF):
        out["bandwidth"] = spec.bandwidth
    elif isinstance(spec, Min):
        out["upper"] = spec.upper
    elif isinstance(spec, TanhThreshold):
        out["c"] = spec.c
    elif isinstance(spec, Scaled):
        out.update(alpha=spec.alpha, inner=to_dict(spec.inner))
    elif isinstance(spec, Product):
        out.update(left=to_dict(spec.left), right=to_dict(spec.right),
                   left_slice=list(spec.left_slice), right_slice=list(spec.right_slice))
    return out


def from_dict(d: dict) -> KernelSpec:
    variant = d.get("variant")
    if variant == "rbf":
        bw = d.get("bandwidth")
        return RBF(None if bw is None else float(bw))
    if variant == "linear":
        return Linear()
    if variant == "moment":
        return Moment()
    if variant == "min":
        return Min(float(d["upper"]))
    if variant == "tanh_threshold":
        return TanhThreshold(float(d["c"]))
    if variant == "delta":
        return Delta()
    if variant == "scaled":
        return Scaled(float(d["alpha"]), from_dict(d["inner"]))
    if variant == "product":
        return Product(from_dict(d["left"]), from_dict(d["right"]),
                       tuple(d.get("left_slice", (0, 1))), tuple(d.get("right_slice", (1, None))))
    raise ValueError(f"unknown kernel variant {variant!r}")
