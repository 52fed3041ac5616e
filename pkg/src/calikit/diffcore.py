"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every operation accepts either plain arrays or :class:`Node` objects. When no
argument is a node the operation simply returns a numpy array, so the same
model code runs with or without a tape.

Example::

    tape = forward(lambda x: square(x), {"x": np.array(3.0)})
    grads = backward(tape, tape.output)
    grads[tape.inputs["x"].id]   # -> array(6.)
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy import special

__all__ = [
    "Node", "Tape", "ShapeError", "GradientError", "forward", "backward", "gradcheck",
    "AdamState", "adam_step", "value_of",
    "add", "sub", "mul", "div", "neg", "scale", "affine", "matmul", "relu", "tanh", "softplus",
    "exp", "log", "square", "sqrt", "abs_", "sum_", "mean", "softmax", "log_softmax",
    "concat", "reshape", "transpose", "cols", "take", "einsum", "pairwise_sqdist",
    "pairwise_min", "normal_cdf",
]


class ShapeError(ValueError):
    """Raised when operands of a graph node have inconsistent shapes."""


class GradientError(ArithmeticError):
    """Raised for non-scalar losses and non-finite gradients."""


class Node:
    __slots__ = ("id", "value", "op", "parents", "_vjp", "tape")
    __array_ufunc__ = None  # make ndarray <op> Node defer to Node's reflected operators

    def __init__(self, tape: Tape, value: np.ndarray, op: str, parents: tuple = (), vjp=None):
        self.tape = tape
        self.value = value
        self.op = op
        self.parents = parents
        self._vjp = vjp
        self.id = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    @property
    def T(self):
        return transpose(self)


@dataclass
class Tape:
    """Record of nodes in creation (hence topological) order."""

    nodes: list = field(default_factory=list)
    grads: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    output: Node | None = None

    def var(self, value, name: str | None = None) -> Node:
        node = Node(self, np.array(value, dtype=np.float64), "input")
        if name is not None:
            self.inputs[name] = node
        return node


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _tape_of(*args) -> Tape | None:
    for a in args:
        if isinstance(a, Node):
            return a.tape
    return None


def _make(op: str, value: np.ndarray, parents: tuple, vjp) -> Node | np.ndarray:
    """Wrap ``value`` in a node when any parent is a node; ``vjp`` maps the
    output cotangent to a tuple of parent cotangents."""
    tape = _tape_of(*parents)
    if tape is None:
        return value
    return Node(tape, value, op, parents, vjp)


def _check_same(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"node '{op}': operand shapes {a.shape} and {b.shape} differ")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    # Only scalar-vs-array broadcasting is supported.
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# --- elementwise -------------------------------------------------------------

def add(a, b):
    av, bv = value_of(a), value_of(b)
    _check_same("add", av, bv)
    return _make("add", av + bv, (a, b),
                 lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    _check_same("sub", av, bv)
    return _make("sub", av - bv, (a, b),
                 lambda g: (_unbroadcast(g, av.shape), -_unbroadcast(g, bv.shape)))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    _check_same("mul", av, bv)
    return _make("mul", av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b):
    av, bv = value_of(a), value_of(b)
    _check_same("div", av, bv)
    out = av / bv
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def neg(a):
    return _make("neg", -value_of(a), (a,), lambda g: (-g,))


def scale(a, c: float):
    """Multiply by a constant scalar."""
    c = float(c)
    return _make("scale", value_of(a) * c, (a,), lambda g: (g * c,))


def relu(a):
    av = value_of(a)
    mask = av > 0
    return _make("relu", np.where(mask, av, 0.0), (a,), lambda g: (g * mask,))


def tanh(a):
    out = np.tanh(value_of(a))
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a):
    av = value_of(a)
    out = np.logaddexp(0.0, av)
    return _make("softplus", out, (a,), lambda g: (g * special.expit(av),))


def exp(a):
    out = np.exp(value_of(a))
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a):
    av = value_of(a)
    return _make("log", np.log(av), (a,), lambda g: (g / av,))


def square(a):
    av = value_of(a)
    return _make("square", av * av, (a,), lambda g: (2.0 * g * av,))


def sqrt(a):
    out = np.sqrt(value_of(a))
    return _make("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def abs_(a):
    av = value_of(a)
    # Subgradient +1 at zero.
    return _make("abs", np.abs(av), (a,), lambda g: (g * np.where(av >= 0, 1.0, -1.0),))


def normal_cdf(a):
    """Standard normal cdf, differentiable (derivative is the density)."""
    av = value_of(a)
    pdf = np.exp(-0.5 * av * av) / np.sqrt(2.0 * np.pi)
    return _make("normal_cdf", special.ndtr(av), (a,), lambda g: (g * pdf,))


# --- linear algebra ----------------------------------------------------------

def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"node 'matmul': cannot multiply {av.shape} by {bv.shape}")
    return _make("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def affine(x, W, b):
    """Row-batched affine map ``x @ W + b``."""
    xv, Wv, bv = value_of(x), value_of(W), value_of(b)
    if xv.ndim != 2 or Wv.ndim != 2 or xv.shape[1] != Wv.shape[0] or bv.shape != (Wv.shape[1],):
        raise ShapeError(
            f"node 'affine': x {xv.shape}, W {Wv.shape}, b {bv.shape} are inconsistent")
    return _make("affine", xv @ Wv + bv, (x, W, b),
                 lambda g: (g @ Wv.T, xv.T @ g, g.sum(axis=0)))


def transpose(a):
    av = value_of(a)
    if av.ndim != 2:
        raise ShapeError(f"node 'transpose': expected a matrix, got shape {av.shape}")
    return _make("transpose", av.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape):
    av = value_of(a)
    try:
        out = av.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"node 'reshape': {av.shape} -> {shape}: {exc}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(av.shape),))


def cols(a, start: int, stop: int):
    """Column slice ``a[:, start:stop]``."""
    av = value_of(a)
    if av.ndim != 2 or not 0 <= start < stop <= av.shape[1]:
        raise ShapeError(f"node 'cols': slice [{start}:{stop}] invalid for shape {av.shape}")

    def vjp(g):
        full = np.zeros_like(av)
        full[:, start:stop] = g
        return (full,)

    return _make("cols", av[:, start:stop].copy(), (a,), vjp)


def take(a, index: np.ndarray, axis: int = 0):
    """Gather ``a`` along ``axis`` with an integer index array."""
    av = value_of(a)
    index = np.asarray(index, dtype=np.intp)

    def vjp(g):
        full = np.zeros_like(av)
        np.add.at(full, (slice(None),) * axis + (index,), g)
        return (full,)

    return _make("take", np.take(av, index, axis=axis), (a,), vjp)


def concat(parts, axis: int = 1):
    vals = [value_of(p) for p in parts]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"node 'concat': {exc}") from None
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=axis)
                     for k in range(len(vals)))

    return _make("concat", out, tuple(parts), vjp)


def einsum(subscripts: str, *operands):
    """Differentiable ``np.einsum`` for explicit-output subscripts without
    repeated indices inside a single operand."""
    ins, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = ins.split(",")
    if len(in_subs) != len(operands):
        raise ShapeError(f"node 'einsum': {len(in_subs)} subscripts for {len(operands)} operands")
    vals = [value_of(o) for o in operands]
    try:
        out = np.einsum(subscripts, *vals, optimize=False)
    except ValueError as exc:
        raise ShapeError(f"node 'einsum' {subscripts!r}: {exc}") from None

    def vjp(g):
        grads = []
        for k, sub_k in enumerate(in_subs):
            if not isinstance(operands[k], Node):
                grads.append(None)
                continue
            others = [s for j, s in enumerate(in_subs) if j != k]
            other_vals = [v for j, v in enumerate(vals) if j != k]
            spec = ",".join([out_sub] + others) + "->" + sub_k
            grads.append(np.einsum(spec, g, *other_vals, optimize=False))
        return tuple(grads)

    return _make("einsum", out, tuple(operands), vjp)


# --- reductions --------------------------------------------------------------

def sum_(a, axis=None):
    av = value_of(a)
    out = np.asarray(av.sum(axis=axis))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, av.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), av.shape).copy(),)

    return _make("sum", out, (a,), vjp)


def mean(a, axis=None):
    av = value_of(a)
    count = av.size if axis is None else np.prod([av.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis), 1.0 / count)


def log_softmax(a):
    """Row-wise log-softmax with max subtraction."""
    av = value_of(a)
    shifted = av - av.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    p = np.exp(out)
    return _make("log_softmax", out, (a,),
                 lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def softmax(a):
    av = value_of(a)
    shifted = av - av.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    return _make("softmax", p, (a,),
                 lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))


# --- kernel building blocks --------------------------------------------------

def pairwise_sqdist(U, V):
    """``D[i, j] = ||U_i - V_j||^2`` for row-matrices U (n, d) and V (m, d)."""
    Uv, Vv = value_of(U), value_of(V)
    if Uv.ndim != 2 or Vv.ndim != 2 or Uv.shape[1] != Vv.shape[1]:
        raise ShapeError(f"node 'pairwise_sqdist': shapes {Uv.shape} and {Vv.shape}")
    out = np.zeros((Uv.shape[0], Vv.shape[0]))
    for k in range(Uv.shape[1]):
        diff = Uv[:, k, None] - Vv[None, :, k]
        out += diff * diff

    def vjp(g):
        gu = 2.0 * (g.sum(axis=1)[:, None] * Uv - g @ Vv)
        gv = 2.0 * (g.sum(axis=0)[:, None] * Vv - g.T @ Uv)
        return gu, gv

    return _make("pairwise_sqdist", out, (U, V), vjp)


def pairwise_min(U, V):
    """``M[i, j] = min(U_i, V_j)`` for single-column inputs (ties route to U)."""
    Uv, Vv = value_of(U), value_of(V)
    if Uv.ndim != 2 or Vv.ndim != 2 or Uv.shape[1] != 1 or Vv.shape[1] != 1:
        raise ShapeError(f"node 'pairwise_min': expects (n,1) and (m,1), got {Uv.shape}, {Vv.shape}")
    u, v = Uv[:, 0][:, None], Vv[:, 0][None, :]
    left = u <= v
    out = np.where(left, u, v)
    return _make("pairwise_min", out, (U, V),
                 lambda g: ((g * left).sum(axis=1)[:, None], (g * ~left).sum(axis=0)[:, None]))


# --- driver ------------------------------------------------------------------

def forward(fn: Callable[..., Node], inputs: Mapping[str, np.ndarray]) -> Tape:
    """Run ``fn(**nodes)`` on a fresh tape with one input node per named array."""
    tape = Tape()
    nodes = {name: tape.var(val, name) for name, val in inputs.items()}
    out = fn(**nodes)
    if not isinstance(out, Node):
        out = tape.var(out)
    tape.output = out
    return tape


def backward(tape: Tape, loss: Node, seed: float = 1.0) -> dict[int, np.ndarray]:
    """Accumulate gradients of scalar ``loss`` into ``tape.grads`` (keyed by node id)."""
    if loss.value.size != 1:
        raise GradientError(f"backward needs a scalar loss, node {loss.id} ({loss.op}) has shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.full(loss.shape, float(seed))}
    for node in reversed(tape.nodes[: loss.id + 1]):
        g = grads.get(node.id)
        if g is None or node._vjp is None:
            continue
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient at node {node.id} ({node.op})")
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            parent_grads = node._vjp(g)
        for parent, pg in zip(node.parents, parent_grads):
            if not isinstance(parent, Node) or pg is None:
                continue
            if not np.all(np.isfinite(pg)):
                raise GradientError(f"non-finite gradient produced by node {node.id} ({node.op})")
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
    for node in tape.nodes:
        g = grads.get(node.id)
        if g is None:
            grads[node.id] = np.zeros(node.shape)
        elif not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient at node {node.id} ({node.op})")
    tape.grads = grads
    return grads


def gradcheck(fn: Callable[..., Node], point, eps: float = 1e-6) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``point`` is either an array (passed as the single argument ``x``) or a
    mapping of named arrays passed as keyword arguments.

    Each component's discrepancy is first reduced by the rounding-error bound
    of the difference quotient, ``10 * machine_eps * |f| / eps``, so a large
    loss value does not masquerade as a gradient error.
    """
    named = dict(point) if isinstance(point, Mapping) else {"x": point}
    named = {k: np.array(v, dtype=np.float64) for k, v in named.items()}
    call = fn if isinstance(point, Mapping) else (lambda x: fn(x))

    tape = forward(call, named)
    backward(tape, tape.output)
    worst = 0.0
    for name, arr in named.items():
        analytic = tape.grads[tape.inputs[name].id]
        for idx in itertools.product(*(range(s) for s in arr.shape)):
            orig = arr[idx]
            arr[idx] = orig + eps
            fp = float(value_of(call(**named)))
            arr[idx] = orig - eps
            fm = float(value_of(call(**named)))
            arr[idx] = orig
            central = (fp - fm) / (2.0 * eps)
            noise = 10.0 * np.finfo(np.float64).eps * max(abs(fp), abs(fm), 1.0) / eps
            a = float(analytic[idx])
            excess = max(abs(a - central) - noise, 0.0)
            worst = max(worst, excess / (abs(a) + abs(central) + 1e-12))
    return worst


# --- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    t = state.step + 1
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for '{name}' has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient for parameter '{name}'")
        m = beta1 * state.m.get(name, np.zeros_like(p)) + (1 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(p)) + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(t, m_new, v_new)
