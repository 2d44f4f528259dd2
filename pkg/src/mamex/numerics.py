"""Dense float64 numerics and a small tape-based reverse-mode autodiff.

Only the primitives the recommender graph needs are provided: affine maps,
batched expert banks, concatenation/stacking, (masked) softmax, weighted
mixing, row dot products, squared norms, KL-to-uniform, softplus and
batch reductions. Values are numpy arrays; every op returns a :class:`Var`.

Usage::

    with Tape() as tape:
        loss = sum_all(mul(p, q))
    grads = backward(tape, loss, [p, q])
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, DomainError, ParameterError, UsageError

LOG_CLAMP = 1e-10

_active = threading.local()


def _tape_stack() -> list:
    if not hasattr(_active, "stack"):
        _active.stack = []
    return _active.stack


class Var:
    """A node in the computation graph.

    ``backward_fn`` maps the upstream gradient to one gradient per parent
    (``None`` for parents that need none).
    """

    __slots__ = ("value", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise UsageError(f"item() on non-scalar of shape {self.shape}")
        return float(self.value.reshape(()))

    def __float__(self):
        return self.item()

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__


class Parameter(Var):
    """Trainable leaf. ``value`` is updated in place by the optimizer."""

    __slots__ = ()

    def __init__(self, value, name):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True, name=name)


class Tape:
    """Records ops in execution order while active (``with Tape() as t``)."""

    def __init__(self):
        self.nodes: list[Var] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def record(self, node: Var) -> None:
        self.nodes.append(node)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _make(value, parents: Sequence[Var], backward_fn: Callable) -> Var:
    needs = any(p.requires_grad for p in parents)
    out = Var(value, parents if needs else (), backward_fn if needs else None, needs)
    if needs:
        stack = _tape_stack()
        if stack:
            stack[-1].record(out)
    return out


def backward(tape: Tape, loss: Var, params: Iterable[Parameter] | None = None) -> dict[str, np.ndarray]:
    """Reverse sweep over ``tape``; returns gradients keyed by parameter name.

    Parameters listed in ``params`` but not reached get exact zeros.
    """
    if loss.value.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    leaves: dict[int, Var] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if isinstance(parent, Parameter):
                leaves[key] = parent
    out = {leaves[k].name: grads[k] for k in leaves if k in grads}
    if isinstance(loss, Parameter):
        out[loss.name] = np.ones_like(loss.value)
    if params is not None:
        for p in params:
            out.setdefault(p.name, np.zeros_like(p.value))
    return out


# ---------------------------------------------------------------------------
# plain-array functions


def softmax(logits) -> np.ndarray:
    """Max-shifted softmax along the last axis."""
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0 or x.shape[-1] == 0:
        raise DimensionError("softmax of an empty vector")
    shifted = x - x.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


def top_k_mask(logits, k: int) -> np.ndarray:
    """Boolean mask of the k largest logits per row; ties go to the lower index."""
    x = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    n = x.shape[-1]
    if not 1 <= k <= n:
        raise ParameterError(f"top-k needs 1 <= k <= {n}, got k={k}")
    order = np.argsort(-x, axis=-1, kind="stable")[:, :k]
    mask = np.zeros(x.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def top_k_renormalized(logits, k: int):
    """Return ``(indices, weights, dense_probs)`` for a single logit vector.

    ``weights`` is the softmax restricted to the selected logits, zero
    elsewhere; ``dense_probs`` is the full softmax.
    """
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError("top_k_renormalized expects a 1-d vector")
    mask = top_k_mask(x, k)[0]
    dense = softmax(x)
    weights = _masked_softmax_values(x[None, :], mask[None, :])[0]
    return np.flatnonzero(mask), weights, dense


def kl_to_uniform(p) -> float:
    """KL(p || uniform) with 0 ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise DimensionError("kl_to_uniform expects a non-empty vector")
    if np.any(p < 0):
        raise DomainError("kl_to_uniform: negative probability")
    if abs(p.sum() - 1.0) > 1e-6:
        raise DomainError(f"kl_to_uniform: entries sum to {p.sum()!r}, not 1")
    n = p.size
    return float(np.sum(p * np.log(np.maximum(p, LOG_CLAMP) * n)))


def _masked_softmax_values(x, mask):
    masked = np.where(mask, x, -np.inf)
    shifted = masked - masked.max(axis=-1, keepdims=True)
    ex = np.where(mask, np.exp(shifted), 0.0)
    return ex / ex.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# differentiable ops


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a, c: float) -> Var:
    a = as_var(a)
    return _make(a.value * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def affine(x, weight, bias=None) -> Var:
    """``x @ W + b`` for a batch of row vectors."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def expert_bank(x, weights, biases=None) -> Var:
    """Apply K affine maps to every row: (B, n) x (K, n, d) -> (B, K, d)."""
    x, w = as_var(x), as_var(weights)
    xv, wv = x.value, w.value
    out = np.einsum("bn,knd->bkd", xv, wv)

    def grad(g):
        return np.einsum("bkd,knd->bn", g, wv), np.einsum("bn,bkd->knd", xv, g)

    y = _make(out, (x, w), grad)
    return y if biases is None else add(y, biases)


def mix(weights, values) -> Var:
    """Weighted sum over the middle axis: (B, K) x (B, K, d) -> (B, d)."""
    w, v = as_var(weights), as_var(values)
    wv, vv = w.value, v.value

    def grad(g):
        return np.einsum("bkd,bd->bk", vv, g), wv[:, :, None] * g[:, None, :]

    return _make(np.einsum("bk,bkd->bd", wv, vv), (w, v), grad)


def concat(parts: Sequence, axis: int = -1) -> Var:
    parts = [as_var(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def grad(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([p.value for p in parts], axis=axis), parts, grad)


def stack(parts: Sequence, axis: int = 1) -> Var:
    parts = [as_var(p) for p in parts]

    def grad(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return _make(np.stack([p.value for p in parts], axis=axis), parts, grad)


def reshape(a, shape) -> Var:
    a = as_var(a)
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def gather_rows(table, index) -> Var:
    table = as_var(table)
    idx = np.asarray(index, dtype=np.int64)
    tshape = table.shape

    def grad(g):
        out = np.zeros(tshape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(table.value[idx], (table,), grad)


def masked_softmax(logits, mask=None) -> Var:
    """Row softmax restricted to ``mask`` (constant); masked-out entries are exactly 0.

    The mask is treated as a constant, so top-k selection is a frozen
    discontinuity in the backward pass.
    """
    x = as_var(logits)
    if mask is None:
        y = softmax(x.value)
    else:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise DomainError("masked_softmax: a row has no selected entries")
        y = _masked_softmax_values(x.value, mask)

    def grad(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _make(y, (x,), grad)


def rowdot(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return _make(np.sum(av * bv, axis=-1), (a, b),
                 lambda g: (g[..., None] * bv, g[..., None] * av))


def sum_all(a) -> Var:
    a = as_var(a)
    shape = a.shape
    return _make(a.value.sum(), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_axis(a, axis: int) -> Var:
    a = as_var(a)
    shape = a.shape
    return _make(a.value.sum(axis=axis), (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean_rows(a) -> Var:
    """Mean over the leading (batch) axis."""
    a = as_var(a)
    return scale(sum_axis(a, 0), 1.0 / a.shape[0])


def sum_squares(a) -> Var:
    a = as_var(a)
    av = a.value
    return _make(np.sum(av * av), (a,), lambda g: (2.0 * g * av,))


def softplus(a) -> Var:
    """ln(1 + e^x), overflow-free; -ln sigmoid(d) == softplus(-d)."""
    a = as_var(a)
    av = a.value
    sig = np.exp(-np.logaddexp(0.0, -av))
    return _make(np.logaddexp(0.0, av), (a,), lambda g: (g * sig,))


def kl_uniform(p) -> Var:
    """Differentiable KL(p || uniform) for a probability vector, log argument clamped at 1e-10."""
    p = as_var(p)
    pv = p.value
    n = pv.shape[-1]
    clamped = np.maximum(pv, LOG_CLAMP)
    logs = np.log(clamped * n)
    dlog = np.where(pv > LOG_CLAMP, 1.0, 0.0)
    return _make(np.sum(pv * logs), (p,), lambda g: (g * (logs + dlog),))


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_check(loss_fn: Callable[[], Var], params: Sequence[Parameter],
                            h: float = 1e-5, analytic: dict | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` rebuilds the graph from the current parameter values each
    call. ``analytic`` overrides the tape gradients (useful for testing the
    check itself).
    """
    if analytic is None:
        with Tape() as tape:
            loss = loss_fn()
        analytic = backward(tape, loss, params)
    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        a_flat = np.asarray(analytic[p.name]).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().value)
            flat[i] = orig - h
            down = float(loss_fn().value)
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            err = abs(a_flat[i] - numeric) / max(1e-8, abs(a_flat[i]) + abs(numeric))
            worst = max(worst, err)
    return worst
