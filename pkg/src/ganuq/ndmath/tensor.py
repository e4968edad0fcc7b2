"""Reverse-mode automatic differentiation on dense float64 arrays.

The graph is taped implicitly: every operation records its parents and a
vector-Jacobian product (vjp) closure. The vjp closures are themselves written
in terms of traced operations, so calling :func:`grad` with
``create_graph=True`` yields gradients that can be differentiated again
(needed for the critic gradient penalty).

Only the op closure required by the models lives here: affine maps, relu /
leaky-relu, elementwise arithmetic, exp/log/pow, reductions, row norms,
concatenation and slicing. relu's second derivative is taken to be zero
almost everywhere (subgradient convention).
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "as_tensor",
    "no_grad",
    "grad",
    "matmul",
    "transpose",
    "reshape",
    "broadcast_to",
    "tsum",
    "tmean",
    "texp",
    "tlog",
    "relu",
    "leaky_relu",
    "softplus",
    "concat",
    "tslice",
    "row_norm",
]

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A float64 array node in the autodiff graph."""

    __slots__ = ("data", "requires_grad", "_parents")

    def __init__(self, data, requires_grad=False, _parents=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = _parents

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        other = as_tensor(other)
        return mul(self, tpow(other, -1.0))

    def __rtruediv__(self, other):
        return mul(other, tpow(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return tpow(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents):
    """Create an op output, recording only parents that need gradients."""
    if _GRAD_ENABLED:
        live = tuple((p, fn) for p, fn in parents if p.requires_grad)
        if live:
            return Tensor(data, requires_grad=True, _parents=live)
    return Tensor(data)


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to `shape` using traced sums."""
    extra = g.data.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.data.shape[i] != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(g, b.data.shape)),
        ),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (
            (a, lambda g: _unbroadcast(mul(g, b), a.data.shape)),
            (b, lambda g: _unbroadcast(mul(g, a), b.data.shape)),
        ),
    )


def tpow(x, exponent):
    x = as_tensor(x)
    n = float(exponent)
    out = _make(
        x.data ** n,
        ((x, lambda g: mul(g, mul(tpow(x, n - 1.0), n))),),
    )
    return out


def texp(x):
    x = as_tensor(x)
    out_data = np.exp(x.data)
    return _make(out_data, ((x, lambda g: mul(g, Tensor(out_data))),))


def tlog(x):
    x = as_tensor(x)
    return _make(np.log(x.data), ((x, lambda g: mul(g, tpow(x, -1.0))),))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data @ b.data,
        (
            (a, lambda g: matmul(g, transpose(b))),
            (b, lambda g: matmul(transpose(a), g)),
        ),
    )


def transpose(x):
    x = as_tensor(x)
    return _make(x.data.T, ((x, lambda g: transpose(g)),))


def reshape(x, shape):
    x = as_tensor(x)
    shape = tuple(shape)
    orig = x.data.shape
    return _make(x.data.reshape(shape), ((x, lambda g: reshape(g, orig)),))


def broadcast_to(x, shape):
    x = as_tensor(x)
    shape = tuple(shape)
    orig = x.data.shape
    return _make(
        np.broadcast_to(x.data, shape).copy(),
        ((x, lambda g: _unbroadcast(g, orig)),),
    )


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    orig = x.data.shape
    if axis is None:
        axes = tuple(range(x.data.ndim))
    elif isinstance(axis, int):
        axes = (axis,)
    else:
        axes = tuple(axis)

    def vjp(g):
        kept = g
        if not keepdims:
            kshape = tuple(1 if i in axes else s for i, s in enumerate(orig))
            kept = reshape(g, kshape)
        return broadcast_to(kept, orig)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), ((x, vjp),))


def tmean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for i in axes:
            count *= x.data.shape[i]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def relu(x):
    x = as_tensor(x)
    mask = (x.data > 0.0).astype(np.float64)
    return _make(x.data * mask, ((x, lambda g: mul(g, Tensor(mask))),))


def leaky_relu(x, slope):
    x = as_tensor(x)
    scale = np.where(x.data > 0.0, 1.0, float(slope))
    return _make(x.data * scale, ((x, lambda g: mul(g, Tensor(scale))),))


def softplus(x):
    """Numerically stable log(1 + exp(x)), composed from traced primitives."""
    x = as_tensor(x)
    # softplus(x) = relu(x) + log(1 + exp(-|x|)); |x| = relu(x) + relu(-x)
    absx = add(relu(x), relu(mul(x, -1.0)))
    return add(relu(x), tlog(add(texp(mul(absx, -1.0)), 1.0)))


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.data.shape[axis] for t in tensors])
    parents = []
    for i, t in enumerate(tensors):
        lo, hi = int(offsets[i]), int(offsets[i + 1])
        parents.append((t, lambda g, lo=lo, hi=hi: tslice(g, axis, lo, hi)))
    return _make(data, tuple(parents))


def tslice(x, axis, start, stop):
    x = as_tensor(x)
    idx = tuple(
        slice(start, stop) if d == axis else slice(None) for d in range(x.data.ndim)
    )
    orig = x.data.shape

    def vjp(g):
        pieces = []
        if start > 0:
            before = list(orig)
            before[axis] = start
            pieces.append(Tensor(np.zeros(before)))
        pieces.append(g)
        if stop < orig[axis]:
            after = list(orig)
            after[axis] = orig[axis] - stop
            pieces.append(Tensor(np.zeros(after)))
        return concat(pieces, axis) if len(pieces) > 1 else pieces[0]

    return _make(x.data[idx].copy(), ((x, vjp),))


def row_norm(x):
    """L2 norm along the last axis of a 2-D tensor, shape (batch,)."""
    return tpow(tsum(mul(x, x), axis=1), 0.5)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

class AutodiffError(Exception):
    pass


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def grad(output, inputs, create_graph=False):
    """Gradients of a scalar `output` with respect to `inputs`.

    With ``create_graph=True`` the returned tensors stay in the graph and can
    be differentiated again.
    """
    output = as_tensor(output)
    if output.data.size != 1:
        raise AutodiffError(
            f"grad requires a scalar root, got shape {output.data.shape}"
        )
    topo = _toposort(output)
    grads = {id(output): Tensor(np.ones_like(output.data), requires_grad=create_graph)}

    def run():
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for t in inputs:
                if t is node:
                    acc = results.get(id(t))
                    results[id(t)] = g if acc is None else add(acc, g)
            for parent, vjp in node._parents:
                contrib = vjp(g)
                acc = grads.get(id(parent))
                grads[id(parent)] = contrib if acc is None else add(acc, contrib)

    results = {}
    if create_graph:
        run()
    else:
        with no_grad():
            run()
    out = []
    for t in inputs:
        g = results.get(id(t))
        if g is None:
            g = Tensor(np.zeros_like(t.data))
        out.append(g)
    return out
