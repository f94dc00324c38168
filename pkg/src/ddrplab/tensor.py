"""Dense float64 tensors with tape-free reverse-mode differentiation.

Every differentiable primitive records its parents and a closure mapping the
output gradient to parent gradients. ``Tensor.backward`` walks the graph in
reverse topological order. Gradients accumulate into ``.grad`` until
``zero_grad`` is called, which is the usual training-loop contract.

Only the operations the encoder, the objectives and the diagnostics need are
provided. Broadcasting follows numpy; gradients are summed back to the
operand shape.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, NonFiniteError, ShapeError

DTYPE = np.float64
COSINE_EPS = 1e-8

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> Tensor:
        return self.swapaxes(-1, -2)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph bookkeeping ------------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
        if not np.isfinite(data).all():
            raise NonFiniteError("operation produced a non-finite value")
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        needs = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every ``requires_grad`` tensor reachable from here.

        Repeated calls accumulate; call ``zero_grad`` on the leaves to reset.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- elementwise arithmetic -------------------------------------------
    def __add__(self, other) -> Tensor:
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
        )

    def __rsub__(self, other) -> Tensor:
        return as_tensor(other) - self

    def __mul__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self.data, other.data
        out = a / b
        return Tensor._make(
            out,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)),
        )

    def __rtruediv__(self, other) -> Tensor:
        return as_tensor(other) / self

    def __neg__(self) -> Tensor:
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float) -> Tensor:
        a = self.data
        return Tensor._make(
            a**exponent, (self,), lambda g: (g * exponent * a ** (exponent - 1),)
        )

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    # -- shape manipulation -----------------------------------------------
    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def swapaxes(self, a: int, b: int) -> Tensor:
        return Tensor._make(
            self.data.swapaxes(a, b), (self,), lambda g: (g.swapaxes(a, b),)
        )

    def __getitem__(self, index) -> Tensor:
        if isinstance(index, Tensor):
            raise TypeError("index with numpy arrays, not Tensors")
        shape = self.shape

        def back(g):
            full = np.zeros(shape, dtype=DTYPE)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._make(np.array(self.data[index], dtype=DTYPE), (self,), back)

    # -- reductions ---------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), back)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- unary functions ----------------------------------------------------
    def exp(self) -> Tensor:
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self) -> Tensor:
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,))

    def sqrt(self) -> Tensor:
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,))

    def tanh(self) -> Tensor:
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# -- products ----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, numpy batch broadcasting on the rest."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # fold batch axes into rows: one GEMM instead of a batched loop
        a2 = ad.reshape(-1, ad.shape[-1])

        def back_flat(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return Tensor._make((a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],)), (a, b), back_flat)

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._make(ad @ bd, (a, b), back)


# -- normalisations and activations -------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Row-max stabilised softmax."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), back)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over each row of a matrix; rows are non-negative and sum to one."""
    return softmax(a, axis=-1)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def back(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), back)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    a = x.data
    cdf = 0.5 * (1.0 + erf(a * _INV_SQRT2))

    def back(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a * a)
        return (g * (cdf + a * pdf),)

    return Tensor._make(a * cdf, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    a = x.data
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def back(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gd.shape)
        gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return Tensor._make(xhat * gd + bias.data, (x, gain, bias), back)


# -- structural ops ------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tensors, back)


def gather_last(x: Tensor, index: np.ndarray) -> Tensor:
    """``out[..., i, j] = x[..., i, index[i, j]]``.

    ``index`` has shape ``(rows, cols)`` where ``rows`` matches ``x.shape[-2]``;
    the leading axes of ``x`` broadcast.
    """
    index = np.asarray(index)
    if index.ndim != 2 or index.shape[0] != x.shape[-2]:
        raise ShapeError(f"gather index {index.shape} does not fit operand {x.shape}")
    full = np.broadcast_to(index, x.shape[:-1] + (index.shape[1],))
    shape = x.shape

    rows, cols = index.shape
    row_sorted = np.sort(index, axis=1)
    unique_rows = bool((row_sorted[:, 1:] != row_sorted[:, :-1]).all())

    def back(g):
        if unique_rows:
            out = np.zeros(shape, dtype=DTYPE)
            np.put_along_axis(out, full, g, axis=-1)
            return (out,)
        flat_pos = (np.arange(rows)[:, None] * shape[-1] + index).ravel()
        out = np.zeros((int(np.prod(shape[:-2], dtype=int)), rows * shape[-1]), dtype=DTYPE)
        np.add.at(out, (slice(None), flat_pos), g.reshape(out.shape[0], rows * cols))
        return (out.reshape(shape),)

    return Tensor._make(np.take_along_axis(x.data, full, axis=-1), (x,), back)


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``."""
    ids = np.asarray(ids)
    shape = table.shape

    def back(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (out,)

    return Tensor._make(table.data[ids], (table,), back)


def where_const(mask: np.ndarray, x: Tensor, value: float) -> Tensor:
    """``x`` where ``mask`` is true, constant ``value`` elsewhere."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    return Tensor._make(
        np.where(mask, x.data, value), (x,), lambda g: (np.where(mask, g, 0.0),)
    )


# -- cosine ---------------------------------------------------------------------


def normalize_rows(x: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """``x / (||x|| + eps)`` along the last axis."""
    norm = ((x * x).sum(axis=-1, keepdims=True)).sqrt()
    return x / (norm + eps)


def cosine(u: Tensor, v: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Cosine similarity of two vectors, ``eps`` added to each norm."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape:
        raise ShapeError(f"cosine operands differ in shape: {u.shape} vs {v.shape}")
    nu = (u * u).sum().sqrt() + eps
    nv = (v * v).sum().sqrt() + eps
    return (u * v).sum() / (nu * nv)


def cosine_np(u: np.ndarray, v: np.ndarray, eps: float = COSINE_EPS) -> float:
    return float(np.dot(u, v) / ((np.linalg.norm(u) + eps) * (np.linalg.norm(v) + eps)))


# -- gradient checking ----------------------------------------------------------


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check_fd(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-4,
    coords: Sequence[int] | None = None,
) -> float:
    """Max relative error between backprop and central differences of ``f`` at ``x``.

    Per coordinate the error is ``|a - n| / (|a| + |n| + 1e-10)``. ``coords``
    restricts the check to a subset of flat coordinates.
    """
    x.requires_grad = True
    x.grad = None
    out = f(x)
    out.backward()
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()
    x.grad = None
    return _fd_compare(lambda: f(x), x, analytic, h, coords)


def _fd_compare(evaluate, x: Tensor, analytic: np.ndarray, h: float, coords) -> float:
    flat = x.data.reshape(-1)
    an = analytic.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = evaluate().item()
            flat[i] = orig - h
            fm = evaluate().item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            err = abs(an[i] - num) / (abs(an[i]) + abs(num) + 1e-10)
            worst = max(worst, err)
    return worst


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Finite-difference check of ``loss_fn`` against every tensor in ``params``.

    ``max_coords`` caps the number of coordinates probed per tensor (drawn
    with ``rng``); None probes all of them. Returns the worst relative error
    per parameter name.
    """
    zero_grads(params.values())
    loss_fn().backward()
    analytic = {
        k: (np.zeros(p.shape) if p.grad is None else p.grad.copy()) for k, p in params.items()
    }
    zero_grads(params.values())
    rng = rng if rng is not None else np.random.default_rng(0)
    report = {}
    for name, p in params.items():
        coords = None
        if max_coords is not None and p.size > max_coords:
            coords = np.sort(rng.choice(p.size, size=max_coords, replace=False))
        report[name] = _fd_compare(loss_fn, p, analytic[name], h, coords)
    return report
