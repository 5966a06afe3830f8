"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Each op records its inputs and a backward closure; ``backward(loss)`` walks
the recorded graph in reverse topological order and accumulates gradients
into every tensor that requires them.  Graphs are recorded per forward pass
and may be differentiated once; a second ``backward`` on the same loss
raises ``StaleGraphError``.

All arithmetic is double precision and single-threaded by contract, so
identical seeds and inputs give bit-identical results.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from .errors import DimensionError, StaleGraphError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward_fn = None
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    """Create an op result, recording the graph only if a parent needs grads."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward_fn = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray, owned: bool = False) -> None:
    """Add ``g`` into ``t.grad``.

    ``owned=True`` promises ``g`` is freshly allocated and aliased nowhere
    else, letting the first accumulation take the array without copying.
    """
    if t.grad is None:
        t.grad = g if owned else np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --------------------------------------------------------------------------
# arithmetic
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: cannot broadcast shapes {a.shape} and {b.shape}") from None

    def bw(g):
        if a.requires_grad:
            ga = _unbroadcast(g, a.shape)
            _accum(a, ga, owned=ga is not g)
        if b.requires_grad:
            gb = _unbroadcast(g, b.shape)
            _accum(b, gb, owned=gb is not g)

    return _record(data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: cannot broadcast shapes {a.shape} and {b.shape}") from None

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape), owned=True)
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape), owned=True)

    return _record(data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)
    data = a.data * s

    def bw(g):
        if a.requires_grad:
            _accum(a, g * s, owned=True)

    return _record(data, (a,), bw)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul: operands must be >=2-D, got {a.shape} x {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} x {b.shape}") from None

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape), owned=True)
        if b.requires_grad:
            if b.data.ndim == 2 and g.ndim > 2:
                # Batched (..., m, k) @ (k, n): collapse to one flat product.
                k = a.data.shape[-1]
                _accum(b, a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]), owned=True)
            else:
                _accum(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape), owned=True)

    return _record(data, (a, b), bw)


# --------------------------------------------------------------------------
# elementwise nonlinearities
# --------------------------------------------------------------------------

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, g * (1.0 - y * y), owned=True)

    return _record(y, (a,), bw)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit: x * Phi(x)."""
    a = _as_tensor(a)
    x = a.data
    phi_cdf = erf(x / _SQRT2)
    phi_cdf += 1.0
    phi_cdf *= 0.5
    y = x * phi_cdf

    def bw(g):
        if a.requires_grad:
            t = x * x
            t *= -0.5
            np.exp(t, out=t)
            t *= _INV_SQRT_2PI * x
            t += phi_cdf
            t *= g
            _accum(a, t, owned=True)

    return _record(y, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    # Stable two-branch logistic to avoid overflow at large |x|.
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bw(g):
        if a.requires_grad:
            _accum(a, g * y * (1.0 - y), owned=True)

    return _record(y, (a,), bw)


# --------------------------------------------------------------------------
# reductions and shape ops
# --------------------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if a.requires_grad:
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            _accum(a, np.broadcast_to(gg, a.shape).copy(), owned=True)

    return _record(data, (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from None

    def bw(g):
        if a.requires_grad:
            _accum(a, g.reshape(a.shape))

    return _record(data, (a,), bw)


def transpose(a: Tensor, axes) -> Tensor:
    a = _as_tensor(a)
    data = a.data.transpose(axes)
    inverse = np.argsort(axes)

    def bw(g):
        if a.requires_grad:
            _accum(a, g.transpose(inverse))

    return _record(data, (a,), bw)


def concat(tensors, axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(t, g[tuple(idx)])

    return _record(data, tuple(tensors), bw)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = a.data[idx]

    def bw(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[idx] = g
            _accum(a, buf, owned=True)

    return _record(data, (a,), bw)


# --------------------------------------------------------------------------
# neural-network ops
# --------------------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1, bias: np.ndarray | None = None) -> Tensor:
    """Softmax along an axis; ``bias`` (a constant, e.g. an attention mask)
    is added to the inputs before normalization without entering the graph."""
    a = _as_tensor(a)
    y = a.data + bias if bias is not None else a.data.copy()
    y -= y.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def bw(g):
        if a.requires_grad:
            gy = g * y
            dot = gy.sum(axis=axis, keepdims=True)
            gy -= y * dot
            _accum(a, gy, owned=True)

    return _record(y, (a,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise DimensionError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match feature dim {x.shape[-1:]}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    sigma = np.sqrt(var + eps)
    xhat = (x.data - mu) / sigma
    y = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=lead))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=lead))
        if x.requires_grad:
            ghat = g * gamma.data
            m1 = ghat.mean(axis=-1, keepdims=True)
            m2 = (ghat * xhat).mean(axis=-1, keepdims=True)
            ghat -= m1
            ghat -= xhat * m2
            ghat /= sigma
            _accum(x, ghat, owned=True)

    return _record(y, (x, gamma, beta), bw)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table; backward scatter-adds into the table."""
    table = _as_tensor(table)
    if table.data.ndim != 2:
        raise DimensionError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    ids = np.asarray(ids)
    data = table.data[ids]

    def bw(g):
        if table.requires_grad:
            buf = np.zeros_like(table.data)
            np.add.at(buf, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
            _accum(table, buf, owned=True)

    return _record(data, (table,), bw)


take_rows = embedding_lookup


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate is 0."""
    if rate <= 0.0:
        return x
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(mask))


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    targets = np.asarray(targets)
    n = logits.data.shape[0]
    if targets.shape != (n,):
        raise DimensionError(
            f"cross_entropy: targets shape {targets.shape} does not match {n} rows"
        )
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    data = np.mean(lse - z[np.arange(n), targets])

    def bw(g):
        if logits.requires_grad:
            p = np.exp(z - zmax)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(n), targets] -= 1.0
            p *= float(g) / n
            _accum(logits, p, owned=True)

    return _record(data, (logits,), bw)


def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy; stable for large |logit|."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != logits.data.shape:
        raise DimensionError(
            f"bce_with_logits: labels shape {labels.shape} does not match logits {logits.shape}"
        )
    z = logits.data
    loss = np.maximum(z, 0.0) - z * labels + np.log1p(np.exp(-np.abs(z)))
    data = loss.mean()
    n = z.size

    def bw(g):
        if logits.requires_grad:
            s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
            s -= labels
            s *= float(g) / n
            _accum(logits, s, owned=True)

    return _record(data, (logits,), bw)


# --------------------------------------------------------------------------
# backward pass
# --------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Fill gradients of every tensor the scalar loss depends on.

    May be called once per recorded graph; call again only after a fresh
    forward pass.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise StaleGraphError("backward called twice on the same graph; re-run the forward pass")
    if not loss.requires_grad:
        loss._consumed = True
        return

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)
    loss._consumed = True
