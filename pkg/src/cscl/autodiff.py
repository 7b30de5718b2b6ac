"""Dense numpy tensors with tape-free reverse-mode differentiation.

Every op builds a node holding its parents and a closure that maps the
output gradient back to parent gradients. ``backward`` walks the graph in
reverse topological order. Arrays may carry arbitrary leading batch
dimensions; binary ops broadcast like numpy and gradients are summed back
to the operand shape.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class NumericError(RuntimeError):
    """Raised on non-finite values or ill-posed numeric requests."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return Tensor(arr)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], fn) -> Tensor:
    need = any(p.requires_grad for p in parents)
    if not need:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=fn)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _node(ad * bd, (a, b), fn)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def fn(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _node(out, (a, b), fn)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _node(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _node(out, (x,), lambda g: (g * 0.5 / out,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), stable for large |x|."""
    xd = x.data
    out = np.maximum(xd, 0) + np.log1p(np.exp(-np.abs(xd)))
    return _node(out, (x,), lambda g: (g * _sigmoid(xd),))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    out = xd * cdf

    def fn(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _node(out.astype(xd.dtype, copy=False), (x,), fn)


def absolute(x: Tensor) -> Tensor:
    xd = x.data
    return _node(np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def maximum(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    pick_a = ad >= bd

    def fn(g):
        return _unbroadcast(g * pick_a, ad.shape), _unbroadcast(g * ~pick_a, bd.shape)

    return _node(np.maximum(ad, bd), (a, b), fn)


def minimum(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    pick_a = ad <= bd

    def fn(g):
        return _unbroadcast(g * pick_a, ad.shape), _unbroadcast(g * ~pick_a, bd.shape)

    return _node(np.minimum(ad, bd), (a, b), fn)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _node(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = _pair(a, b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape

    def fn(g):
        return _unbroadcast(np.where(cond, g, 0), sa), _unbroadcast(np.where(cond, 0, g), sb)

    return _node(np.where(cond, a.data, b.data), (a, b), fn)


# ---------------------------------------------------------------- reductions / shape


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(np.asarray(out), (x,), fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _node(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _node(np.broadcast_to(x.data, shape), (x,), lambda g: (_unbroadcast(g, old),))


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def index(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype
    basic = _is_basic(idx)

    def fn(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _node(x.data[idx], (x,), fn)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), fn)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _node(np.stack([x.data for x in xs], axis=axis), tuple(xs), fn)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dims")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul shape mismatch {ad.shape} @ {bd.shape}")

    if bd.ndim == 2 and ad.ndim > 2:
        # shared weight: fold batch dims into rows so both passes are single GEMMs
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, ad.shape[-1])

        def fn_shared(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(*lead, bd.shape[0]) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _node((a2 @ bd).reshape(*lead, bd.shape[1]), (a, b), fn_shared)

    def fn(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _node(ad @ bd, (a, b), fn)


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` False entries get exactly zero weight."""
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=-1).all():
            raise NumericError("empty attention support")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (x,), fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data
    n = xd.shape[-1]

    def fn(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / n)
        return dx, _unbroadcast(g * xhat, gd.shape), _unbroadcast(g, beta.shape)

    return _node(out, (x, gamma, beta), fn)


# ---------------------------------------------------------------- graph traversal


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, params: "ParamStore | None" = None) -> np.ndarray | None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf on the path.

    With ``params`` given, their gradients are reset first and the flat
    gradient aligned with ``params.flat()`` is returned (zeros off-path).
    """
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar root")
    if params is not None:
        params.zero_grad()
    if not loss.requires_grad:
        return params.grad_flat() if params is not None else None
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return params.grad_flat() if params is not None else None


# ---------------------------------------------------------------- parameters


class ParamStore:
    """Named leaf tensors with a flat-vector view in registration order."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    @property
    def count(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def offsets(self) -> dict[str, tuple[int, int]]:
        out, pos = {}, 0
        for name, t in self._params.items():
            out[name] = (pos, pos + t.data.size)
            pos += t.data.size
        return out

    def flat(self) -> np.ndarray:
        if not self._params:
            return np.zeros(0, dtype=self.dtype)
        return np.concatenate([t.data.ravel() for t in self._params.values()])

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec)
        if vec.shape != (self.count,):
            raise ValueError(f"flat vector has shape {vec.shape}, expected ({self.count},)")
        pos = 0
        for t in self._params.values():
            n = t.data.size
            t.data = vec[pos:pos + n].reshape(t.data.shape).astype(self.dtype, copy=True)
            pos += n

    def grad_flat(self) -> np.ndarray:
        parts = []
        for t in self._params.values():
            parts.append(np.zeros(t.data.size, self.dtype) if t.grad is None else t.grad.ravel())
        return np.concatenate(parts) if parts else np.zeros(0, self.dtype)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: ParamStore,
    step: float = 1e-5,
    n_coords: int | None = 200,
    rng: np.random.Generator | None = None,
    exclude: Iterable[int] = (),
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error per coordinate is ``|a - n| / max(1, |a|, |n|)``. Coordinates
    in ``exclude`` (e.g. sitting on a kink of a piecewise op) are skipped.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    loss = loss_fn()
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("non-finite loss")
    analytic = backward(loss, params)
    base = params.flat().copy()
    skip = set(int(i) for i in exclude)
    candidates = np.array([i for i in range(base.size) if i not in skip], dtype=int)
    if n_coords is not None and n_coords < candidates.size:
        rng = rng or np.random.default_rng(0)
        candidates = rng.choice(candidates, size=n_coords, replace=False)
    worst = 0.0
    try:
        for i in candidates:
            vec = base.copy()
            vec[i] = base[i] + step
            params.set_flat(vec)
            up = float(loss_fn().data)
            vec[i] = base[i] - step
            params.set_flat(vec)
            down = float(loss_fn().data)
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError("non-finite loss during finite differences")
            numeric = (up - down) / (2 * step)
            a = float(analytic[i])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    finally:
        params.set_flat(base)
    return worst
