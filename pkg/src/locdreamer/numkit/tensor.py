"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tensor`` wraps a numpy array and records the operations applied to it.
Calling :func:`backward` on a scalar result walks the recorded graph in
reverse topological order and accumulates gradients into every reachable
tensor created with ``requires_grad=True``. Everything is float64; the
models built on top are small enough that determinism and testability
matter more than speed.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradientError",
    "as_tensor",
    "concat",
    "backward",
    "zero_grads",
    "no_grad",
]


class GradientError(RuntimeError):
    """Raised when backward() is misused or encounters non-finite values."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager that skips graph recording for pure inference."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _stable_sigmoid(a: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense float64 array with optional gradient tracking.

    Invariants: ``grad``, when populated, has the same shape as ``data``;
    repeated backward passes accumulate into ``grad`` until ``zero_grads``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, np.ndarray) and data.dtype == np.float64:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.data.shape}, op={self._op}, grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """Constant view of this tensor; gradients do not flow through it."""
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph construction ------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: tuple["Tensor", ...], vjp, op: str) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._vjp = vjp
            out._op = op
        return out

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data

        def vjp(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._make(a + b, (self, other), vjp, "add")

    __radd__ = __add__

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data

        def vjp(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._make(a * b, (self, other), vjp, "mul")

    __rmul__ = __mul__

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data

        def vjp(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._make(a - b, (self, other), vjp, "sub")

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other).__sub__(self)

    def __neg__(self) -> "Tensor":
        def vjp(g):
            return (-g,)

        return Tensor._make(-self.data, (self,), vjp, "neg")

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        out = a / b

        def vjp(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)

        return Tensor._make(out, (self, other), vjp, "div")

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other).__truediv__(self)

    def __pow__(self, exponent: float) -> "Tensor":
        if not isinstance(exponent, (int, float)):
            raise TypeError("power exponent must be a python scalar")
        a = self.data
        out = a ** exponent

        def vjp(g):
            return (g * exponent * a ** (exponent - 1),)

        return Tensor._make(out, (self,), vjp, "pow")

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data

        def vjp(g):
            # numpy matmul promotes 1-d operands; mirror that here.
            if a.ndim == 1 and b.ndim == 1:
                return g * b, g * a
            if a.ndim == 1:
                ga = g @ np.swapaxes(b, -1, -2)
                ga = _unbroadcast(ga.reshape(-1, a.shape[0]), (a.shape[0],)) \
                    if ga.ndim > 1 else ga
                gb = _unbroadcast(a[:, None] * g[..., None, :], b.shape)
                return ga, gb
            if b.ndim == 1:
                ga = _unbroadcast(g[..., :, None] * b, a.shape)
                gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g[..., :, None], b.shape + (1,))
                return ga, gb.reshape(b.shape)
            ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
            gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
            return ga, gb

        return Tensor._make(a @ b, (self, other), vjp, "matmul")

    # -- elementwise nonlinearities -------------------------------------------

    def exp(self) -> "Tensor":
        out = np.exp(self.data)

        def vjp(g):
            return (g * out,)

        return Tensor._make(out, (self,), vjp, "exp")

    def log(self) -> "Tensor":
        a = self.data

        def vjp(g):
            return (g / a,)

        return Tensor._make(np.log(a), (self,), vjp, "log")

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)

        def vjp(g):
            return (g / (2.0 * out),)

        return Tensor._make(out, (self,), vjp, "sqrt")

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)

        def vjp(g):
            return (g * (1.0 - out * out),)

        return Tensor._make(out, (self,), vjp, "tanh")

    def sigmoid(self) -> "Tensor":
        out = _stable_sigmoid(self.data)

        def vjp(g):
            return (g * out * (1.0 - out),)

        return Tensor._make(out, (self,), vjp, "sigmoid")

    def softplus(self) -> "Tensor":
        a = self.data
        out = np.logaddexp(0.0, a)

        def vjp(g):
            return (g * _stable_sigmoid(a),)

        return Tensor._make(out, (self,), vjp, "softplus")

    # -- reductions and shape ops ----------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a_shape = self.data.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, a_shape).copy(),)
            if not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g, a_shape).copy(),)

        return Tensor._make(out, (self,), vjp, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else np.prod(
            [self.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a_shape = self.data.shape

        def vjp(g):
            return (g.reshape(a_shape),)

        return Tensor._make(self.data.reshape(shape), (self,), vjp, "reshape")

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        axes = tuple(axes)
        inverse = tuple(np.argsort(axes))

        def vjp(g):
            return (g.transpose(inverse),)

        return Tensor._make(self.data.transpose(axes), (self,), vjp, "transpose")

    def __getitem__(self, key) -> "Tensor":
        a_shape = self.data.shape
        basic = isinstance(key, slice) or (
            isinstance(key, tuple)
            and all(isinstance(k, (slice, int)) or k is Ellipsis for k in key))

        def vjp(g):
            buf = np.zeros(a_shape)
            if basic:  # no repeated indices, so plain assignment-add is safe
                buf[key] += g
            else:
                np.add.at(buf, key, g)
            return (buf,)

        return Tensor._make(self.data[key], (self,), vjp, "getitem")

    def max(self, axis=None, keepdims: bool = False) -> np.ndarray:
        """Detached maximum; used for numerically stable softmax shifts."""
        return self.data.max(axis=axis, keepdims=keepdims)

    def broadcast_to(self, shape) -> "Tensor":
        a_shape = self.data.shape

        def vjp(g):
            return (_unbroadcast(g, a_shape),)

        return Tensor._make(np.broadcast_to(self.data, shape).copy(), (self,), vjp,
                            "broadcast")


def as_tensor(x) -> Tensor:
    """Wrap scalars and arrays as constant tensors; pass tensors through."""
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along `axis` with gradient routed back to each input."""
    tensors = [as_tensor(t) for t in tensors]
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return Tensor._make(out, tuple(tensors), vjp, "concat")


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable ``requires_grad`` leaf of `loss`.

    `loss` must be a scalar (one element). Gradients accumulate across
    repeated calls until cleared. Non-finite values discovered during the
    pass raise :class:`GradientError` naming the first offending operation.
    """
    if not isinstance(loss, Tensor):
        raise GradientError("backward() expects a Tensor")
    if loss.data.size != 1:
        raise GradientError(f"backward() requires a scalar loss, got shape {loss.data.shape}")
    if not np.isfinite(loss.data).all():
        raise GradientError("backward() called on a non-finite loss")
    if not loss.requires_grad:
        return

    order = _toposort(loss)
    leaf_grads, all_finite = _sweep(order, loss, check=False)
    if not all_finite:
        # Re-run with per-node checks to name the first offending op.
        _sweep(order, loss, check=True)
        raise GradientError("non-finite gradient encountered but not localized")
    for node, g in leaf_grads:
        node.grad = g if node.grad is None else node.grad + g


def _sweep(order: list[Tensor], loss: Tensor, check: bool):
    """One reverse pass; leaf gradients are staged, not committed."""
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: list[tuple[Tensor, np.ndarray]] = []
    all_finite = True
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            leaf_grads.append((node, g))
            if not check and not np.isfinite(g).all():
                all_finite = False
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if not parent.requires_grad:
                continue
            if check and not np.isfinite(pg).all():
                raise GradientError(
                    f"non-finite gradient produced by backward of op '{node._op}'"
                )
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaf_grads, all_finite


def zero_grads(params) -> None:
    """Clear gradients on an iterable or mapping of tensors."""
    values = params.values() if hasattr(params, "values") else params
    for p in values:
        p.grad = None
