"""Small reverse-mode autodiff over float64 numpy arrays.

Only the handful of ops needed by the energy models and ratio-matching
losses are provided. Every op checks its output for NaN/Inf and raises
:class:`NonFiniteError` instead of letting it propagate.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class ShapeError(ValueError):
    pass


def _check(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op}")
    return arr


class Tensor:
    """A node in the computation graph.

    ``backward_fn(g, need)`` returns one gradient (or None) per parent, where
    ``need[k]`` says whether parent k actually needs one.
    """

    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "name", "op")

    def __init__(self, data, requires_grad=False, name=None, parents=(), backward_fn=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, op={self.op})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn, op, check=True) -> Tensor:
    if check:
        _check(data, op)
    rg = any(p.requires_grad for p in parents)
    if not rg:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
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

    def bw(g, need):
        return (_unbroadcast(g, sa) if need[0] else None,
                _unbroadcast(g, sb) if need[1] else None)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g, need):
        return (_unbroadcast(g, sa) if need[0] else None,
                _unbroadcast(-g, sb) if need[1] else None)

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g, need):
        return (_unbroadcast(g * bd, ad.shape) if need[0] else None,
                _unbroadcast(g * ad, bd.shape) if need[1] else None)

    return _node(ad * bd, (a, b), bw, "mul")


def square(a: Tensor) -> Tensor:
    ad = a.data

    def bw(g, need):
        return (2.0 * ad * g,)

    return _node(ad * ad, (a,), bw, "square")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def bw(g, need):
        return (g * out,)

    return _node(out, (a,), bw, "exp")


def abs_(a: Tensor) -> Tensor:
    ad = a.data

    def bw(g, need):
        # subgradient at 0 is 0
        return (g * np.sign(ad),)

    return _node(np.abs(ad), (a,), bw, "abs")


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    s = stable_sigmoid(a.data)

    def bw(g, need):
        return (g * s * (1.0 - s),)

    return _node(s, (a,), bw, "sigmoid")


def swish(a) -> Tensor:
    """z * sigmoid(z)."""
    a = as_tensor(a)
    z = np.ascontiguousarray(a.data)
    out, sig = _kernels.swish_forward(z)

    def bw(g, need):
        return (_kernels.swish_backward(z, sig, g),)

    # |sigmoid| <= 1, so a finite input cannot produce a non-finite output
    return _node(out, (a,), bw, "swish", check=False)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient is zero where the bound is active."""
    ad = a.data
    inside = (ad > lo) & (ad < hi)

    def bw(g, need):
        return (g * inside,)

    return _node(np.clip(ad, lo, hi), (a,), bw, "clip")


# ---------------------------------------------------------------- structural

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim > 2 or bd.ndim > 2:
        raise ShapeError("matmul supports at most 2-D operands")
    if ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"matmul shape mismatch {ad.shape} @ {bd.shape}")

    def bw(g, need):
        ga = gb = None
        if ad.ndim == 2 and bd.ndim == 2:
            ga = g @ bd.T if need[0] else None
            gb = ad.T @ g if need[1] else None
        elif ad.ndim == 2:
            ga = np.outer(g, bd) if need[0] else None
            gb = ad.T @ g if need[1] else None
        elif bd.ndim == 2:
            ga = bd @ g if need[0] else None
            gb = np.outer(ad, g) if need[1] else None
        else:
            ga = g * bd if need[0] else None
            gb = g * ad if need[1] else None
        return ga, gb

    return _node(ad @ bd, (a, b), bw, "matmul")


def transpose(a: Tensor) -> Tensor:
    def bw(g, need):
        return (g.T,)

    return _node(a.data.T, (a,), bw, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape

    def bw(g, need):
        return (g.reshape(old),)

    return _node(a.data.reshape(shape), (a,), bw, "reshape")


def sum_(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def bw(g, need):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _node(np.asarray(a.data.sum(axis=axis)), (a,), bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


def take(a: Tensor, index) -> Tensor:
    """Fancy indexing ``a[index]`` with scatter-add backward."""
    shape = a.shape

    def bw(g, need):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _node(a.data[index], (a,), bw, "take")


def concat(parts: Sequence[Tensor], axis=0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g, need):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw, "concat")


def affine(weight: Tensor, bias: Tensor, x) -> Tensor:
    """``W x + b`` for a vector x, or row-wise ``x W^T + b`` for a batch."""
    x = as_tensor(x)
    W, b, xd = weight.data, bias.data, x.data
    if W.ndim != 2:
        raise ShapeError("weight must be 2-D (out, in)")
    if xd.ndim not in (1, 2) or xd.shape[-1] != W.shape[1]:
        raise ShapeError(f"affine: input has {xd.shape[-1]} features, weight expects {W.shape[1]}")
    if b.shape != (W.shape[0],):
        raise ShapeError("affine: bias length must equal weight rows")
    out = xd @ W.T
    out += b

    def bw(g, need):
        g2 = g.reshape(-1, W.shape[0])
        x2 = xd.reshape(-1, W.shape[1])
        gw = g2.T @ x2 if need[0] else None
        gb = g2.sum(axis=0) if need[1] else None
        gx = (g @ W) if need[2] else None
        return gw, gb, gx

    return _node(out, (weight, bias, x), bw, "affine")


def custom(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Escape hatch for fused ops defined elsewhere (same contract as built-ins)."""
    return _node(np.asarray(data, dtype=np.float64), tuple(parents), backward_fn, op)


# ---------------------------------------------------------------- backward

def _topo(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Exact reverse-mode gradients of a scalar ``loss`` w.r.t. each leaf in ``wrt``.

    Leaves the loss does not depend on get a zero gradient.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    _check(loss.data, "loss")
    order = _topo(loss)  # parents before children
    targets = {id(t) for t in wrt}
    needed: set[int] = set()
    for node in order:
        if id(node) in targets or any(id(p) in needed for p in node.parents):
            needed.add(id(node))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None) if id(node) not in targets else grads.get(id(node))
        if g is None or node.backward_fn is None:
            continue
        need = tuple(p.requires_grad and id(p) in needed for p in node.parents)
        if not any(need):
            continue
        pgrads = node.backward_fn(g, need)
        for p, pg, nd in zip(node.parents, pgrads, need):
            if not nd or pg is None:
                continue
            _check(pg, f"backward of {node.op}")
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg
    return [grads.get(id(t), np.zeros_like(t.data)).reshape(t.shape) for t in wrt]


# ---------------------------------------------------------------- parameters

class ParamSet:
    """Ordered, named parameter tensors."""

    def __init__(self, items: Iterable[tuple[str, np.ndarray]] = ()):
        self._t: OrderedDict[str, Tensor] = OrderedDict()
        for name, arr in items:
            self[name] = arr

    def __getitem__(self, name) -> Tensor:
        return self._t[name]

    def __setitem__(self, name, value):
        arr = value.data if isinstance(value, Tensor) else value
        arr = np.array(arr, dtype=np.float64)
        if name in self._t and self._t[name].shape != arr.shape:
            raise ShapeError(f"parameter {name}: shape {arr.shape} != {self._t[name].shape}")
        self._t[name] = Tensor(arr, requires_grad=True, name=name)

    def __contains__(self, name):
        return name in self._t

    def __iter__(self):
        return iter(self._t)

    def __len__(self):
        return len(self._t)

    def names(self) -> list[str]:
        return list(self._t)

    def items(self):
        return self._t.items()

    def tensors(self) -> list[Tensor]:
        return list(self._t.values())

    def arrays(self) -> OrderedDict:
        return OrderedDict((k, t.data.copy()) for k, t in self._t.items())

    @property
    def total_count(self) -> int:
        return sum(t.size for t in self._t.values())

    def copy(self) -> "ParamSet":
        return ParamSet(self.arrays().items())


# name -> gradient array, in ParamSet order
GradRecord = OrderedDict


def backward(loss: Tensor, params: ParamSet) -> "OrderedDict[str, np.ndarray]":
    """Gradients of ``loss`` for every entry of ``params``, in ParamSet order."""
    gs = grad(loss, params.tensors())
    return OrderedDict(zip(params.names(), gs))


def finite_diff_grad(f: Callable[[np.ndarray], float], point, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``point``."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(point, dtype=np.float64)
    out = np.zeros_like(x)
    flat, gflat = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite evaluation at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return out


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamSet, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    """One bias-corrected Adam update; replaces the tensors in ``params``."""
    if state.step < 0:
        raise ValueError("step counter must be >= 0")
    t = state.step + 1
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        if lr == 0.0:
            continue
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        params[name] = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    state.step = t
    return state
