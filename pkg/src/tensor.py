"""
Minimal dense tensor engine with reverse-mode differentiation.

Tensors wrap numpy arrays. Every differentiable operation builds a new
Tensor that remembers its parents and a local backward rule; calling
``backward(loss)`` records the ancestry of ``loss`` on a ``Tape`` (ordered
by creation, i.e. execution order) and walks it once in reverse.

Tensors are never mutated by operations. Only the optimizer (for parameters)
and the codebook EMA update (for its buffers) replace a tensor's ``data``.
"""

from __future__ import annotations

import itertools
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np

from src.errors import ContractError, DimensionError, NumericalError

logger = logging.getLogger("mars.tensor")

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_default_dtype: np.dtype = np.dtype(np.float64)
_grad_enabled: bool = True
_sequence = itertools.count()


def set_default_dtype(dtype: Any) -> None:
    """Select the float precision used for new tensors (float64 or float32)."""
    global _default_dtype
    resolved = np.dtype(dtype)
    if resolved not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ContractError(f"Unsupported default dtype: {resolved}")
    _default_dtype = resolved


def get_default_dtype() -> np.dtype:
    return _default_dtype


@contextmanager
def default_dtype(dtype: Any) -> Iterator[None]:
    """Temporarily switch the default float precision."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (inference, gradient checks, EMA updates)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense real array with an optional gradient slot.

    Attributes:
        data: Underlying numpy array (row-major).
        requires_grad: Whether gradients flow into this tensor.
        grad: Gradient array of identical shape, populated by ``backward``.
        name: Optional label used in error messages and state dicts.
    """

    __array_priority__ = 1000
    __array_ufunc__ = None

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        dtype: Any = None,
        name: str | None = None,
        _parents: tuple["Tensor", ...] = (),
        _backward: BackwardFn | None = None,
        _op: str = "leaf",
    ) -> None:
        if dtype is not None:
            array = np.asarray(data, dtype=dtype)
        else:
            array = np.asarray(data)
            integral = np.issubdtype(array.dtype, np.integer)
            if _op == "leaf" and (not integral or requires_grad):
                array = array.astype(_default_dtype, copy=False)
        if any(extent <= 0 for extent in array.shape):
            raise ContractError(f"Tensor extents must be positive, got {array.shape}")
        if np.issubdtype(array.dtype, np.floating) and not np.isfinite(array).all():
            raise NumericalError(f"Non-finite values produced by '{_op}'")
        self.data: np.ndarray = array
        self.requires_grad: bool = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        self._seq = next(_sequence)

    # ── basic properties ───────────────────────────────────────────────
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Return a constant view of the same values (stop-gradient)."""
        return Tensor(self.data, _op="detach")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # ── operator sugar ─────────────────────────────────────────────────
    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Any) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Any) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Any) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Any) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Any) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other: Any) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return getitem(self, index)

    def sum(self, axis: Any = None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Any = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: Any) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes if axes else None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)


@dataclass
class Tape:
    """Execution-ordered record of the operations that produced a tensor.

    Attributes:
        nodes: Every tensor in the ancestry of the root, sorted by creation
            order, so that the reverse of ``nodes`` is a valid reverse
            topological order.
    """

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        seen: set[int] = set()
        stack = [root]
        nodes: list[Tensor] = []
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes=nodes)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> Tape:
    """Populate ``grad`` of every requires_grad tensor that ``loss`` depends on.

    Gradients from multiple uses of a tensor are summed. Leaf gradients
    accumulate across calls until ``zero_grad``; intermediate tensors get a
    fresh gradient each call.

    Args:
        loss: Scalar tensor recorded with gradients enabled.

    Returns:
        The tape that was walked.

    Raises:
        ContractError: If ``loss`` is not a scalar or is not on a tape.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward() called on a tensor that is not on the tape")

    tape = Tape.record(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        upstream = grads.pop(id(node), None)
        if upstream is None:
            continue
        if node.is_leaf:
            node.grad = upstream if node.grad is None else node.grad + upstream
            continue
        node.grad = upstream
        if node._backward is None:
            continue
        local = node._backward(upstream)
        for parent, g in zip(node._parents, local):
            if g is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + g if key in grads else g
    return tape


# ── op construction ────────────────────────────────────────────────────
def as_tensor(value: Any, like: Tensor | None = None) -> Tensor:
    """Wrap scalars and arrays as constant tensors (matching ``like``'s dtype)."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None and np.issubdtype(like.dtype, np.floating) else None
    return Tensor(np.asarray(value, dtype=dtype or _default_dtype), _op="const")


def apply_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: BackwardFn,
    op: str,
) -> Tensor:
    """Create the result of a differentiable op.

    ``backward_fn`` maps the upstream gradient to one gradient per parent
    (``None`` for parents that need none). Exposed for custom ops.
    """
    track = _grad_enabled and any(p.requires_grad for p in parents)
    return Tensor(
        data,
        requires_grad=track,
        _parents=tuple(parents) if track else (),
        _backward=backward_fn if track else None,
        _op=op,
    )


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ── elementwise arithmetic ─────────────────────────────────────────────
def add(a: Any, b: Any) -> Tensor:
    a, b = _pair(a, b)

    def _bw(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return apply_op(a.data + b.data, (a, b), _bw, "add")


def sub(a: Any, b: Any) -> Tensor:
    a, b = _pair(a, b)

    def _bw(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return apply_op(a.data - b.data, (a, b), _bw, "sub")


def mul(a: Any, b: Any) -> Tensor:
    a, b = _pair(a, b)

    def _bw(g: np.ndarray):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return apply_op(a.data * b.data, (a, b), _bw, "mul")


def div(a: Any, b: Any) -> Tensor:
    a, b = _pair(a, b)

    def _bw(g: np.ndarray):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return apply_op(a.data / b.data, (a, b), _bw, "div")


def neg(a: Tensor) -> Tensor:
    return apply_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent

    def _bw(g: np.ndarray):
        return (g * exponent * a.data ** (exponent - 1),)

    return apply_op(out, (a,), _bw, "pow")


def _pair(a: Any, b: Any) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ── linear algebra ─────────────────────────────────────────────────────
def matmul(a: Any, b: Any) -> Tensor:
    """Batched matrix product over the last two axes.

    Raises:
        DimensionError: If the inner extents differ or an operand is 1-D.
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def _bw(g: np.ndarray):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return apply_op(out, (a, b), _bw, "matmul")


# ── reductions and shape ops ───────────────────────────────────────────
def sum_(a: Tensor, axis: Any = None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return apply_op(out, (a,), _bw, "sum")


def mean(a: Tensor, axis: Any = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return apply_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return apply_op(out, (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def getitem(a: Tensor, index: Any) -> Tensor:
    """Basic or integer-array indexing; gradients scatter-add back."""
    out = a.data[index]

    def _bw(g: np.ndarray):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return apply_op(np.array(out, copy=True), (a,), _bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat() needs at least one tensor")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _bw(g: np.ndarray):
        return tuple(np.split(g, bounds, axis=axis))

    return apply_op(out, tuple(tensors), _bw, "concat")


# ── nonlinearities ─────────────────────────────────────────────────────
def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return apply_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return apply_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return apply_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return apply_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return apply_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return apply_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU (smooth, so finite differences stay exact)."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def _bw(g: np.ndarray):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return apply_op(out, (a,), _bw, "gelu")


def clip(a: Tensor, low: float, high: float) -> Tensor:
    inside = (a.data >= low) & (a.data <= high)
    return apply_op(np.clip(a.data, low, high), (a,), lambda g: (g * inside,), "clip")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtraction) along ``axis``."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _bw(g: np.ndarray):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return apply_op(out, (a,), _bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def _bw(g: np.ndarray):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return apply_op(out, (a,), _bw, "log_softmax")


def straight_through(source: Tensor, values: np.ndarray) -> Tensor:
    """Forward ``values``; pass the upstream gradient to ``source`` unchanged."""
    values = np.asarray(values, dtype=source.dtype)
    if values.shape != source.shape:
        raise DimensionError(
            f"straight_through shape mismatch: {source.shape} vs {values.shape}"
        )
    return apply_op(values.copy(), (source,), lambda g: (g,), "straight_through")
