"""Reverse-mode automatic differentiation over numpy arrays.

A `Tensor` wraps an ndarray and remembers how it was produced; `backward`
replays the recorded graph in reverse topological order and accumulates
gradients into every `Tensor` that participated.  Operands that are plain
ndarrays (or Python scalars) are treated as constants: no gradient is ever
computed for them, which is how "frozen" networks are threaded through a
loss without leaking gradients into their parameters.

The op set is deliberately small: dense layers, the three output heads and
the losses used elsewhere in the package are all compositions of what is
defined here.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """Node in the autodiff graph: an array plus its backward closure."""

    __slots__ = ("data", "grad", "_parents", "_bwd")

    def __init__(self, data, _parents=(), _bwd=None):
        self.data = np.asarray(data)
        self.grad = None
        self._parents = _parents
        self._bwd = _bwd

    @property
    def shape(self):
        return self.data.shape

    def _acc(self, g):
        if self.grad is None:
            self.grad = np.array(g, copy=True)
        else:
            self.grad += g

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Constant copy of this node; gradients stop here."""
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _parents(*xs):
    return tuple(x for x in xs if isinstance(x, Tensor))


def _unbroadcast(g, shape):
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matmul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = Tensor(ad @ bd, _parents(a, b))

    def bwd(g):
        if isinstance(a, Tensor):
            a._acc(g @ bd.T)
        if isinstance(b, Tensor):
            b._acc(ad.T @ g)

    out._bwd = bwd
    return out


def add(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = Tensor(ad + bd, _parents(a, b))

    def bwd(g):
        if isinstance(a, Tensor):
            a._acc(_unbroadcast(g, ad.shape))
        if isinstance(b, Tensor):
            b._acc(_unbroadcast(g, bd.shape))

    out._bwd = bwd
    return out


def sub(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = Tensor(ad - bd, _parents(a, b))

    def bwd(g):
        if isinstance(a, Tensor):
            a._acc(_unbroadcast(g, ad.shape))
        if isinstance(b, Tensor):
            b._acc(_unbroadcast(-g, bd.shape))

    out._bwd = bwd
    return out


def mul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = Tensor(ad * bd, _parents(a, b))

    def bwd(g):
        if isinstance(a, Tensor):
            a._acc(_unbroadcast(g * bd, ad.shape))
        if isinstance(b, Tensor):
            b._acc(_unbroadcast(g * ad, bd.shape))

    out._bwd = bwd
    return out


def neg(a) -> Tensor:
    out = Tensor(-_data(a), _parents(a))

    def bwd(g):
        a._acc(-g)

    out._bwd = bwd
    return out


def square(a) -> Tensor:
    ad = _data(a)
    out = Tensor(ad * ad, _parents(a))

    def bwd(g):
        a._acc(g * (2.0 * ad))

    out._bwd = bwd
    return out


def exp(a) -> Tensor:
    e = np.exp(_data(a))
    out = Tensor(e, _parents(a))

    def bwd(g):
        a._acc(g * e)

    out._bwd = bwd
    return out


def log(a) -> Tensor:
    ad = _data(a)
    out = Tensor(np.log(ad), _parents(a))

    def bwd(g):
        a._acc(g / ad)

    out._bwd = bwd
    return out


def tanh(a) -> Tensor:
    t = np.tanh(_data(a))
    out = Tensor(t, _parents(a))

    def bwd(g):
        a._acc(g * (1.0 - t * t))

    out._bwd = bwd
    return out


def relu(a) -> Tensor:
    ad = _data(a)
    out = Tensor(np.maximum(ad, 0.0), _parents(a))

    def bwd(g):
        a._acc(g * (ad > 0))

    out._bwd = bwd
    return out


def sigmoid(a) -> Tensor:
    ad = _data(a)
    s = np.where(ad >= 0, 1.0 / (1.0 + np.exp(-np.abs(ad))), np.exp(-np.abs(ad)) / (1.0 + np.exp(-np.abs(ad))))
    out = Tensor(s, _parents(a))

    def bwd(g):
        a._acc(g * s * (1.0 - s))

    out._bwd = bwd
    return out


def softplus(a) -> Tensor:
    ad = _data(a)
    # log(1 + e^x), computed as max(x, 0) + log1p(e^-|x|) to stay finite.
    val = np.maximum(ad, 0.0) + np.log1p(np.exp(-np.abs(ad)))
    out = Tensor(val, _parents(a))

    def bwd(g):
        s = np.where(ad >= 0, 1.0 / (1.0 + np.exp(-np.abs(ad))), np.exp(-np.abs(ad)) / (1.0 + np.exp(-np.abs(ad))))
        a._acc(g * s)

    out._bwd = bwd
    return out


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient goes to `a`."""
    ad, bd = _data(a), _data(b)
    take_a = ad <= bd
    out = Tensor(np.where(take_a, ad, bd), _parents(a, b))

    def bwd(g):
        if isinstance(a, Tensor):
            a._acc(g * take_a)
        if isinstance(b, Tensor):
            b._acc(g * ~take_a)

    out._bwd = bwd
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    ad = a.data
    out = Tensor(ad[..., start:stop], _parents(a))

    def bwd(g):
        full = np.zeros_like(ad)
        full[..., start:stop] = g
        a._acc(full)

    out._bwd = bwd
    return out


def concat_cols(parts) -> Tensor:
    datas = [_data(p) for p in parts]
    out = Tensor(np.concatenate(datas, axis=-1), _parents(*parts))
    widths = [d.shape[-1] for d in datas]

    def bwd(g):
        off = 0
        for p, w in zip(parts, widths):
            if isinstance(p, Tensor):
                p._acc(g[..., off:off + w])
            off += w

    out._bwd = bwd
    return out


def sum_rows(a: Tensor) -> Tensor:
    """Sum over the last axis, keeping it as width 1."""
    ad = a.data
    out = Tensor(ad.sum(axis=-1, keepdims=True), _parents(a))

    def bwd(g):
        a._acc(np.broadcast_to(g, ad.shape))

    out._bwd = bwd
    return out


def mean_all(a: Tensor) -> Tensor:
    ad = a.data
    out = Tensor(np.asarray(ad.mean()), _parents(a))

    def bwd(g):
        a._acc(np.broadcast_to(g / ad.size, ad.shape))

    out._bwd = bwd
    return out


def sum_all(a: Tensor) -> Tensor:
    ad = a.data
    out = Tensor(np.asarray(ad.sum()), _parents(a))

    def bwd(g):
        a._acc(np.broadcast_to(g, ad.shape))

    out._bwd = bwd
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into `.grad` of every graph node.

    `loss` must be scalar.  Leaf tensors keep whatever gradient they
    receive; intermediate gradients are also retained (cheap at this
    scale and occasionally useful for diagnostics).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._bwd is not None and node.grad is not None:
            node._bwd(node.grad)
