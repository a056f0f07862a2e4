"""Dense float32 tensors with tape-based reverse-mode autodiff.

Every op returns a new :class:`Tensor`. When any input requires a gradient
(and grad mode is on) the output keeps a closure mapping its upstream
gradient to gradients of its parents. Node ids come from one global counter,
so sorting the reachable nodes by id is a valid topological order.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float32

_node_ids = itertools.count()
_state = threading.local()


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or +inf."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _check(arr: np.ndarray, op: str) -> None:
    # -inf is the additive-mask sentinel; NaN and +inf are always errors.
    # max() propagates NaN, so one reduction covers both.
    if arr.size and not (arr.max() < np.inf):
        raise NonFiniteError(f"{op}: non-finite value in output")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "parents", "backward_fn", "blocked_rows")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        _check(arr, "Tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id: int | None = next(_node_ids) if requires_grad else None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.blocked_rows = 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division only by python scalars")
        return mul(self, 1.0 / other)
    def __getitem__(self, idx): return index(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward_fn, op: str, check: bool = True) -> Tensor:
    data = np.asarray(data, dtype=DTYPE)
    if check:
        _check(data, op)
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.blocked_rows = 0
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node_id = next(_node_ids)
        out.parents = parents
        out.backward_fn = backward_fn
    else:
        out.requires_grad = False
        out.node_id = None
        out.parents = ()
        out.backward_fn = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = as_tensor(a)
        c = DTYPE(b)
        return _make(a.data * c, (a,), lambda g: (g * c,), "mul")
    if not isinstance(a, Tensor) and np.isscalar(a):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF (erf form, no tanh approximation)."""
    xd = x.data.astype(np.float64)
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def back(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return ((g * (cdf + xd * pdf)).astype(DTYPE),)

    return _make(xd * cdf, (x,), back, "gelu")


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    xd = x.data
    sig = 0.5 * (1.0 + np.tanh(0.5 * xd))

    def back(g):
        return (g * sig * (1.0 + xd * (1.0 - sig)),)

    return _make(xd * sig, (x,), back, "silu")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (k, n) or batched (..., m, k) @ (..., k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = gb = None
        if a.requires_grad:
            if bd.ndim == 2:  # one flat GEMM instead of a batched loop
                ga = (g.reshape(-1, bd.shape[1]) @ bd.T).reshape(ad.shape)
            else:
                ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    if bd.ndim == 2 and ad.ndim > 2:
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(*ad.shape[:-1], bd.shape[1])
    else:
        out = ad @ bd
    return _make(out, (a, b), back, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b for [..., k] inputs and a [k, n] weight, as one flat GEMM."""
    x, w = as_tensor(x), as_tensor(w)
    k, n = w.shape
    if x.shape[-1] != k:
        raise ValueError(f"linear: input {x.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, k)
    out = x2 @ w.data
    if b is not None:
        b = as_tensor(b)
        out = out + b.data

    def back(g):
        g2 = g.reshape(-1, n)
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out.reshape(*lead, n), parents, back, "linear")


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None,
              scale: float = 1.0) -> tuple[Tensor, np.ndarray]:
    """softmax(scale * q k^T, mask) @ v over [..., T, d] heads.

    Returns the output and the attention probabilities. Blocked entries are exactly 0;
    fully blocked rows are counted in ``out.blocked_rows``.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    qd, kd, vd = q.data, k.data, v.data
    scores = (qd @ np.swapaxes(kd, -1, -2)) * DTYPE(scale)
    allowed = scores > -np.inf
    if mask is not None:
        allowed = allowed & mask
    m = np.where(allowed, scores, -np.inf).max(axis=-1, keepdims=True)
    dead = ~np.isfinite(m)
    m = np.where(dead, 0.0, m)
    e = np.where(allowed, np.exp(np.where(allowed, scores - m, 0.0)), 0.0)
    z = e.sum(axis=-1, keepdims=True)
    pr = (e / np.where(z == 0, 1.0, z)).astype(DTYPE)

    def back(g):
        gp = g @ np.swapaxes(vd, -1, -2)
        gs = pr * (gp - (gp * pr).sum(axis=-1, keepdims=True)) * DTYPE(scale)
        gq = gs @ kd if q.requires_grad else None
        gk = np.swapaxes(gs, -1, -2) @ qd if k.requires_grad else None
        gv = np.swapaxes(pr, -1, -2) @ g if v.requires_grad else None
        return gq, gk, gv

    out = _make(pr @ vd, (q, k, v), back, "attention")
    out.blocked_rows = int(dead.sum())
    return out, pr


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose", check=False)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(old),), "reshape", check=False)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in xs], axis=axis), xs, back, "concat", check=False)


def index(x: Tensor, idx) -> Tensor:
    """Basic or integer-array indexing; gradients scatter-add back."""
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), back, "index", check=False)


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range [0, {weight.shape[0]})")
    return index(weight, ids)


# ---------------------------------------------------------------- reductions

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(DTYPE),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---------------------------------------------------------------- normalisation

def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Stable softmax. ``mask`` (True = allowed) and -inf inputs both zero entries exactly.

    A row with nothing allowed comes back all-zero and is counted in
    ``out.blocked_rows`` instead of producing NaN.
    """
    xd = x.data
    allowed = xd > -np.inf
    if mask is not None:
        allowed = allowed & mask
    shifted = np.where(allowed, xd, -np.inf)
    m = shifted.max(axis=axis, keepdims=True)
    dead = ~np.isfinite(m)
    m = np.where(dead, 0.0, m)
    e = np.where(allowed, np.exp(np.where(allowed, xd - m, 0.0)), 0.0)
    z = e.sum(axis=axis, keepdims=True)
    s = e / np.where(z == 0, 1.0, z)

    def back(g):
        return ((s * (g - (g * s).sum(axis=axis, keepdims=True))).astype(DTYPE),)

    out = _make(s, (x,), back, "softmax")
    out.blocked_rows = int(dead.sum())
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    n = xd.shape[-1]

    def back(g):
        gxhat = g * gd
        gx = inv / n * (n * gxhat - gxhat.sum(-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(-1, keepdims=True))
        lead = g.reshape(-1, n)
        ggamma = (lead * xhat.reshape(-1, n)).sum(0)
        gbeta = lead.sum(0)
        return gx.astype(DTYPE), ggamma, gbeta

    return _make(xhat * gd + beta.data, (x, gamma, beta), back, "layer_norm")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-wise softmax."""
    if logits.ndim == 1:
        logits = reshape(logits, (1, -1))
    t = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    n, v = logits.shape
    if t.shape != (n,):
        raise ValueError(f"targets shape {t.shape} does not match {n} rows")
    if t.min() < 0 or t.max() >= v:
        raise IndexError(f"target index out of range [0, {v})")
    ld = logits.data.astype(np.float64)
    m = ld.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(ld - m).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - ld[rows, t]).mean()

    def back(g):
        p = np.exp(ld - lse[:, None])
        p[rows, t] -= 1.0
        return ((g * p / n).astype(DTYPE),)

    return _make(loss, (logits,), back, "cross_entropy")


# ---------------------------------------------------------------- backward

class Tape:
    """Topologically ordered record of every grad-enabled node feeding a loss."""

    def __init__(self, root: Tensor):
        seen: dict[int, Tensor] = {}
        stack = [root]
        while stack:
            t = stack.pop()
            if not t.requires_grad or t.node_id in seen:
                continue
            seen[t.node_id] = t
            stack.extend(t.parents)
        self.nodes = [seen[k] for k in sorted(seen)]

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> dict[int, Tensor]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad``; return {node_id: grad} for all nodes."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any grad-enabled tensor")
    tape = Tape(loss)
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(tape.nodes):
        g = grads.get(node.node_id)
        if g is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=DTYPE)
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg
    for node in tape.nodes:
        if node.backward_fn is None:
            g = grads.get(node.node_id)
            if g is not None:
                node.grad = g if node.grad is None else node.grad + g
    return {k: _wrap(v) for k, v in grads.items()}


def _wrap(arr: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data, t.requires_grad, t.grad, t.node_id = arr, False, None, None
    t.parents, t.backward_fn, t.blocked_rows = (), None, 0
    return t


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE))
