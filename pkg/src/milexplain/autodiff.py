"""Small reverse-mode automatic differentiation engine over float64 numpy arrays.

Operations executed while a :class:`Tape` is active are appended to it when any
input requires a gradient. :func:`backward` replays the tape in reverse, so the
graph only lives as long as the tape that recorded it::

    w = Tensor(np.zeros(3), requires_grad=True)
    with Tape() as tape:
        out = sigmoid(sum_(w * x))
    backward(out, tape)
    w.grad  # d(out)/dw
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "Tape",
    "Tensor",
    "abs_",
    "add",
    "backward",
    "clamp_min",
    "concat",
    "elementwise",
    "exp",
    "index",
    "linear",
    "log",
    "matmul",
    "max_k",
    "mean",
    "min_k",
    "mul",
    "reduce",
    "relu",
    "reshape",
    "sigmoid",
    "softmax",
    "sub",
    "sum_",
    "tanh",
    "topk_indices",
]


class NonFiniteError(ArithmeticError):
    """Raised by the operation that produced a NaN or infinite value."""


class Tensor:
    """Dense float64 array, optionally tracked for gradients."""

    __array_priority__ = 100  # keep numpy from hijacking reflected operators

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".rstrip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, i: int):
        return index(self, i)


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    # maps the output gradient to one gradient per input (None for inputs that need none)
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


@dataclass
class Tape:
    """Ordered record of the primitive operations of one forward pass.

    Used as a context manager; tapes nest, the innermost one records. A tape is
    owned by the thread that opened it.
    """

    nodes: list[_Node] = field(default_factory=list)
    grads: dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    _produced: set[int] = field(default_factory=set, repr=False)

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, node: _Node) -> None:
        self.nodes.append(node)
        self._produced.add(id(node.output))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the last backward output w.r.t. ``t`` (zeros if unrelated)."""
        g = self.grads.get(id(t))
        return np.zeros_like(t.data) if g is None else g

    def __len__(self) -> int:
        return len(self.nodes)


def _active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(data: np.ndarray, inputs: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    tape = _active_tape()
    out.requires_grad = needs and tape is not None
    if out.requires_grad:
        tape.record(_Node(inputs, out, vjp))
    return out


# -- linear algebra ------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product of two 2-D tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        return g @ B.T, A.T @ g

    return _finish(A @ B, (a, b), vjp, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """Row-wise affine map ``x @ weight + bias``; one row per tile."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear shape mismatch: {x.shape} x {weight.shape}")
    X, W = x.data, weight.data
    out = X @ W
    if bias is None:
        return _finish(out, (x, weight), lambda g: (g @ W.T, X.T @ g), "linear")
    bias = _as_tensor(bias)
    if bias.shape != (W.shape[1],):
        raise ValueError(f"bias shape {bias.shape} does not match {W.shape[1]} outputs")

    def vjp(g):
        return g @ W.T, X.T @ g, g.sum(axis=0)

    return _finish(out + bias.data, (x, weight, bias), vjp, "linear")


# -- elementwise ----------------------------------------------------------------


def _binary(a, b, op: str):
    a, b = _as_tensor(a), _as_tensor(b)
    A, B = a.data, b.data
    if a.shape != b.shape:
        if a.size == 1:
            A = A.reshape(())
        elif b.size == 1:
            B = B.reshape(())
        else:
            raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    return a, b, A, B


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.full(t.shape, g.sum())


def add(a, b) -> Tensor:
    a, b, A, B = _binary(a, b, "add")
    return _finish(A + B, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b, A, B = _binary(a, b, "sub")
    return _finish(A - B, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b, A, B = _binary(a, b, "mul")

    def vjp(g):
        return _unbroadcast(g * B, a), _unbroadcast(g * A, b)

    return _finish(A * B, (a, b), vjp, "mul")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _finish(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    return _finish(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    y = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _finish(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def abs_(x) -> Tensor:
    x = _as_tensor(x)
    # sign(0) == 0 gives the zero subgradient at the kink
    s = np.sign(x.data)
    return _finish(np.abs(x.data), (x,), lambda g: (g * s,), "abs")


def exp(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _finish(y, (x,), lambda g: (g * y,), "exp")


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        raise NonFiniteError("log of a non-positive value")
    X = x.data
    return _finish(np.log(X), (x,), lambda g: (g / X,), "log")


def clamp_min(x, lo: float) -> Tensor:
    x = _as_tensor(x)
    mask = x.data >= lo
    return _finish(np.where(mask, x.data, lo), (x,), lambda g: (g * mask,), "clamp_min")


_UNARY = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid, "abs": abs_, "exp": exp, "log": log}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, *operands) -> Tensor:
    """Dispatch an elementwise operation by name."""
    if op in _BINARY:
        if len(operands) != 2:
            raise TypeError(f"{op} takes two operands")
        return _BINARY[op](*operands)
    if op in _UNARY:
        if len(operands) != 1:
            raise TypeError(f"{op} takes one operand")
        return _UNARY[op](operands[0])
    raise ValueError(f"unknown elementwise op {op!r}")


# -- reductions and shape ops ------------------------------------------------------


def softmax(x) -> Tensor:
    """Softmax of a 1-D tensor, computed after subtracting the max."""
    x = _as_tensor(x)
    if x.data.ndim != 1:
        raise ValueError(f"softmax expects a 1-D tensor, got shape {x.shape}")
    if x.size == 0:
        raise ValueError("softmax of an empty tensor")
    e = np.exp(x.data - x.data.max())
    y = e / e.sum()

    def vjp(g):
        return (y * (g - np.dot(g, y)),)

    return _finish(y, (x,), vjp, "softmax")


def sum_(x) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _finish(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(x) -> Tensor:
    x = _as_tensor(x)
    shape, n = x.shape, x.size
    if n == 0:
        raise ValueError("mean of an empty tensor")
    return _finish(
        np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),), "mean"
    )


def topk_indices(values: np.ndarray, k: int, largest: bool, exclude=None) -> np.ndarray:
    """Indices of the k largest (or smallest) values, sorted; ties go to the lowest index.

    Positions in ``exclude`` are never selected.
    """
    values = np.asarray(values)
    if k < 0:
        raise ValueError("k must be non-negative")
    # stable sort keeps equal keys in index order
    order = np.argsort(-values if largest else values, kind="stable")
    if exclude is not None and len(exclude):
        order = order[~np.isin(order, exclude)]
    if k > order.size:
        raise ValueError(f"k={k} exceeds length {order.size}")
    return order[:k]


def _select_k(x, k: int, largest: bool, op: str, exclude=None) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 1:
        raise ValueError(f"{op} expects a 1-D tensor, got shape {x.shape}")
    idx = topk_indices(x.data, k, largest, exclude)
    n = x.size

    def vjp(g):
        full = np.zeros(n)
        full[idx] = g
        return (full,)

    out = _finish(x.data[idx].copy(), (x,), vjp, op)
    out.source_index = idx
    return out


def max_k(x, k: int, exclude=None) -> Tensor:
    """The k largest entries of a 1-D tensor in descending order.

    The returned tensor carries ``source_index``, the input position of each entry.
    Positions listed in ``exclude`` are skipped.
    """
    return _select_k(x, k, True, "max_k", exclude)


def min_k(x, k: int, exclude=None) -> Tensor:
    """The k smallest entries of a 1-D tensor in ascending order (see :func:`max_k`)."""
    return _select_k(x, k, False, "min_k", exclude)


def reduce(op: str, x, k: int | None = None) -> Tensor:
    if op == "sum":
        return sum_(x)
    if op == "mean":
        return mean(x)
    if op in ("min_k", "max_k"):
        if k is None:
            raise TypeError(f"{op} requires k")
        return (min_k if op == "min_k" else max_k)(x, k)
    raise ValueError(f"unknown reduction {op!r}")


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return _finish(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate 1-D tensors."""
    ts = tuple(_as_tensor(t) for t in tensors)
    if any(t.data.ndim != 1 for t in ts):
        raise ValueError("concat expects 1-D tensors")
    bounds = np.cumsum([0] + [t.size for t in ts])

    def vjp(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(ts)))

    return _finish(np.concatenate([t.data for t in ts]), ts, vjp, "concat")


def index(x, i: int) -> Tensor:
    """Scalar element ``i`` of a 1-D tensor."""
    x = _as_tensor(x)
    if x.data.ndim != 1:
        raise ValueError("index expects a 1-D tensor")
    n = x.size
    if not -n <= i < n:
        raise IndexError(f"index {i} out of range for length {n}")

    def vjp(g):
        full = np.zeros(n)
        full[i] = g
        return (full,)

    return _finish(np.array(x.data[i]), (x,), vjp, "index")


# -- backward --------------------------------------------------------------------


def backward(output: Tensor, tape: Tape, attach: bool = True) -> dict[int, np.ndarray]:
    """Propagate d(output)/d(.) through ``tape``.

    Gradients for every tensor on the tape (leaves and intermediates) are stored in
    ``tape.grads``, keyed by ``id``. With ``attach`` set, ``.grad`` is also
    overwritten on every requires-grad leaf the tape touched; leaves the output does
    not depend on get zeros.
    """
    if output.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    if not tape.produced(output):
        raise ValueError("output was not recorded on this tape")

    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if not t.requires_grad or gi is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=np.float64).reshape(t.shape)
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and not tape.produced(t):
                leaves[id(t)] = t
    tape.grads = grads
    if attach:
        for key, t in leaves.items():
            g = grads.get(key)
            t.grad = np.zeros_like(t.data) if g is None else g
    return grads
