"""Dense tensors with reverse-mode automatic differentiation.

A deliberately small engine: float32/float64 numpy buffers, a handful of
recorded primitives, and a topological backward pass. Gradients accumulate
across multiple uses of a tensor (multivariate chain rule). Broadcasting is
restricted to scalar-vs-tensor and identical shapes; nothing here needs
more. Higher-level layers register their own operations through
``Tensor.record``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_SCALAR_TYPES = (int, float, np.integer, np.floating)


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float32 or arr.dtype == np.float64:
        return arr
    return arr.astype(DEFAULT_DTYPE)


class Tensor:
    """Dense numeric array, optionally tracked on the differentiation tape.

    ``grad`` is populated by :meth:`backward` for every tensor with
    ``requires_grad`` and has the same shape as ``data``. Tensors without
    grad state are treated as immutable and may be shared freely.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable | None = None
        self._op = ""

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- tape ------------------------------------------------------------------

    @staticmethod
    def record(data: np.ndarray, parents: Sequence["Tensor"],
               backward_fn: Callable, op: str = "") -> "Tensor":
        """Wrap an op result; records a tape node when any input requires grad.

        ``backward_fn(grad_out)`` must return one gradient array per parent
        (``None`` to skip a parent).
        """
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
            out._op = op
        return out

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor with requires_grad.

        The recorded graph is walked once in reverse topological order; a
        tensor consumed by several operations receives the sum of the
        incoming gradients.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar-shaped loss, got shape {self.data.shape}")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            node.grad = grad if node.grad is None else node.grad + grad
            if node._backward_fn is None:
                continue
            parent_grads = node._backward_fn(grad)
            for parent, pgrad in zip(node._parents, parent_grads):
                if pgrad is None or not parent.requires_grad:
                    continue
                held = pending.get(id(parent))
                pending[id(parent)] = pgrad if held is None else held + pgrad

    # -- operator sugar ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return _scalar_rsub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return _scalar_rdiv(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)

    def reshape(self, shape):
        return reshape(self, shape)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch for {op}: {a.data.shape} vs {b.data.shape}")
    if a.data.dtype != b.data.dtype:
        raise ValueError(f"dtype mismatch for {op}: {a.data.dtype} vs {b.data.dtype}")


def _is_scalar(x) -> bool:
    return isinstance(x, _SCALAR_TYPES)


# -- elementwise arithmetic -----------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return Tensor.record(a.data + b, (a,), lambda g: (g,), "add")
    _check_same_shape(a, b, "add")
    return Tensor.record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return Tensor.record(a.data - b, (a,), lambda g: (g,), "sub")
    _check_same_shape(a, b, "sub")
    return Tensor.record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def _scalar_rsub(a: Tensor, b) -> Tensor:
    return Tensor.record(b - a.data, (a,), lambda g: (-g,), "rsub")


def mul(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return Tensor.record(a.data * b, (a,), lambda g: (g * b,), "mul")
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor.record(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return Tensor.record(a.data / b, (a,), lambda g: (g / b,), "div")
    _check_same_shape(a, b, "div")
    ad, bd = a.data, b.data
    return Tensor.record(ad / bd, (a, b),
                         lambda g: (g / bd, -g * ad / (bd * bd)), "div")


def _scalar_rdiv(a: Tensor, b) -> Tensor:
    ad = a.data
    return Tensor.record(b / ad, (a,), lambda g: (-g * b / (ad * ad),), "rdiv")


def neg(a: Tensor) -> Tensor:
    return Tensor.record(-a.data, (a,), lambda g: (-g,), "neg")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a: Tensor, b) -> Tensor:
    """Dispatch one of the basic arithmetic ops by name."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}; expected one of "
                         f"{sorted(_ELEMENTWISE)}") from None
    return fn(a, b)


# -- reductions and shape ops -----------------------------------------------------


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.data.shape
    return Tensor.record(a.data.sum(), (a,),
                         lambda g: (np.full(shape, g, dtype=a.data.dtype),), "sum")


def tensor_mean(a: Tensor) -> Tensor:
    shape = a.data.shape
    n = a.data.size
    return Tensor.record(a.data.mean(), (a,),
                         lambda g: (np.full(shape, g / n, dtype=a.data.dtype),), "mean")


def sum_axis(a: Tensor, axis: int) -> Tensor:
    """Sum along one axis (no keepdims)."""
    shape = a.data.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Tensor.record(a.data.sum(axis=axis), (a,), backward, "sum_axis")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return Tensor.record(np.reshape(a.data, shape), (a,),
                         lambda g: (np.reshape(g, old),), "reshape")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis (axis 1).

    Accepts (batch, channels, width) or (batch, features) tensors; all
    inputs must agree on every non-channel dimension.
    """
    if len(tensors) == 0:
        raise ValueError("concat_channels requires at least one tensor")
    first = tensors[0]
    if first.ndim not in (2, 3):
        raise ValueError(f"concat_channels expects 2-d or 3-d tensors, got {first.shape}")
    for t in tensors[1:]:
        if t.ndim != first.ndim:
            raise ValueError(f"rank mismatch in concat_channels: {first.shape} vs {t.shape}")
        if t.shape[0] != first.shape[0] or t.shape[2:] != first.shape[2:]:
            raise ValueError(
                f"batch/width mismatch in concat_channels: {first.shape} vs {t.shape}")
        if t.dtype != first.dtype:
            raise ValueError(f"dtype mismatch in concat_channels: {first.dtype} vs {t.dtype}")
    if len(tensors) == 1:
        t = tensors[0]
        return Tensor.record(t.data.copy(), (t,), lambda g: (g,), "concat")

    sizes = [t.shape[1] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=1))

    out = np.concatenate([t.data for t in tensors], axis=1)
    return Tensor.record(out, tuple(tensors), backward, "concat")


# -- gradient verification -----------------------------------------------------------


def finite_difference_grad(f: Callable[[Tensor], Tensor], x: Tensor,
                           eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar-valued tensor function.

    This is the verification oracle for the analytic backward pass and is
    intentionally independent of it: ``f`` is re-evaluated forward-only at
    ``x +- eps`` along every coordinate.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")

    def evaluate(values: np.ndarray) -> float:
        out = f(Tensor(values, dtype=x.dtype))
        if out.data.size != 1:
            raise ValueError(
                f"finite_difference_grad requires a scalar-valued function, "
                f"got output shape {out.data.shape}")
        return float(out.data)

    base = np.array(x.data, dtype=x.dtype, copy=True)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = evaluate(base)
        flat[i] = orig - eps
        f_minus = evaluate(base)
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return Tensor(grad, dtype=x.dtype)
