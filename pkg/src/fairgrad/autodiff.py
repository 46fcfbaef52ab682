"""Reverse-mode automatic differentiation over dense float64 arrays.

Operations are recorded define-by-run on the active :class:`Tape`::

    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        y = logsumexp(x)
    grads = backward(tape, y)
    grads[x]  # softmax(x)

Outside a tape context the same functions compute values only.
Broadcasting is restricted to scalar <-> array; matrix products go through
:func:`matmul` and bias rows through :func:`bias_add`.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DomainError",
    "NonFiniteError",
    "as_tensor",
    "add",
    "subtract",
    "multiply",
    "divide",
    "negate",
    "matmul",
    "bias_add",
    "exp",
    "log",
    "absolute",
    "sigmoid",
    "relu",
    "sum",
    "mean",
    "logsumexp",
    "maximum",
    "clamp",
    "power",
    "backward",
    "grad",
    "finite_difference_check",
    "FiniteDifferenceReport",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        joined = ", ".join(str(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class DomainError(ValueError):
    """An operand lies outside the domain of an operation."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity appeared in a value or a gradient."""


_local = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of the operations executed while the tape is active.

    Nodes are appended in creation order, which is a topological order of
    the computation graph. A tape belongs to the thread that entered it.
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tapes must be exited in LIFO order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, node: object) -> bool:
        return any(n is node for n in self.nodes)

    def gradient(self, root: "Tensor", wrt: Sequence["Tensor"]) -> list[np.ndarray]:
        grads = backward(self, root)
        return [grads.get(t, np.zeros(t.shape)) for t in wrt]


class Tensor:
    """Dense float64 array with an optional gradient-tracking flag."""

    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or infinity")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    __hash__ = object.__hash__

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negate(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __abs__(self):
        return absolute(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, value: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op}: produced NaN or infinity")
    out = Tensor.__new__(Tensor)
    out.data = value
    out.grad = None
    out.op = op
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
        tape.nodes.append(out)
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    if a.ndim == 0:
        return b.shape
    if b.ndim == 0:
        return a.shape
    raise ShapeError(op, a.shape, b.shape)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum())


# -- elementwise binary ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("subtract", a, b)
    return _make(
        "subtract",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("multiply", a, b)
    return _make(
        "multiply",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def divide(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("divide", a, b)
    if np.any(b.data == 0.0):
        raise DomainError("divide: division by zero")
    q = a.data / b.data

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * q / b.data, b.shape),
        )

    return _make("divide", q, (a, b), vjp)


# -- linear algebra --------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product for 2-D @ 2-D, 2-D @ 1-D, 1-D @ 2-D and 1-D @ 1-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    A, B = a.data, b.data

    def vjp(g):
        if A.ndim == 2 and B.ndim == 2:
            return g @ B.T, A.T @ g
        if A.ndim == 2:
            return np.outer(g, B), A.T @ g
        if B.ndim == 2:
            return B @ g, np.outer(A, g)
        return g * B, g * A

    return _make("matmul", np.asarray(A @ B), (a, b), vjp)


def bias_add(x, bias) -> Tensor:
    """Add a length-m vector to every row of an n x m matrix."""
    x, bias = as_tensor(x), as_tensor(bias)
    if x.ndim != 2 or bias.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise ShapeError("bias_add", x.shape, bias.shape)
    return _make("bias_add", x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=0)))


# -- elementwise unary -----------------------------------------------------


def negate(x) -> Tensor:
    x = as_tensor(x)
    return _make("negate", -x.data, (x,), lambda g: (-g,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        e = np.exp(x.data)
    return _make("exp", e, (x,), lambda g: (g * e,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log: non-positive operand")
    return _make("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    # np.sign(0) == 0 gives subgradient 0 at the kink
    return _make("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    return _make("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0.0
    return _make("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def clamp(x, lower: float | None = None, upper: float | None = None) -> Tensor:
    """Clip into [lower, upper]; the gradient is zero where clipping is active."""
    x = as_tensor(x)
    lo = -np.inf if lower is None else lower
    hi = np.inf if upper is None else upper
    if lo > hi:
        raise DomainError(f"clamp: lower {lo} exceeds upper {hi}")
    mask = (x.data >= lo) & (x.data <= hi)
    return _make("clamp", np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,))


def power(x, exponent: float) -> Tensor:
    """Raise to a constant power. At base 0 with exponent < 1 the gradient is 0."""
    x = as_tensor(x)
    p = float(exponent)
    if not p.is_integer() and np.any(x.data < 0.0):
        raise DomainError(f"power: negative base with non-integer exponent {p}")
    if p < 0 and np.any(x.data == 0.0):
        raise DomainError("power: zero base with negative exponent")
    value = np.power(x.data, p)

    def vjp(g):
        zero = x.data == 0.0
        safe = np.where(zero, 1.0, x.data)
        at_zero = 1.0 if p == 1.0 else 0.0
        return (g * np.where(zero, at_zero, p * np.power(safe, p - 1.0)),)

    return _make("power", value, (x,), vjp)


# -- reductions ------------------------------------------------------------


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    return _make("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.full(x.shape, g),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    if x.size == 0:
        raise ShapeError("mean", x.shape)
    n = x.size
    return _make("mean", np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / n),))


def logsumexp(x) -> Tensor:
    x = as_tensor(x)
    if x.size == 0:
        raise ShapeError("logsumexp", x.shape)
    m = x.data.max()
    e = np.exp(x.data - m)
    total = e.sum()
    soft = e / total
    return _make("logsumexp", np.asarray(m + np.log(total)), (x,), lambda g: (g * soft,))


def maximum(x) -> Tensor:
    """Maximum over all entries; ties route the gradient to the first argmax."""
    x = as_tensor(x)
    if x.size == 0:
        raise ShapeError("maximum", x.shape)
    idx = int(np.argmax(x.data))

    def vjp(g):
        d = np.zeros(x.size)
        d[idx] = g
        return (d.reshape(x.shape),)

    return _make("maximum", np.asarray(x.data.flat[idx]), (x,), vjp)


# -- reverse sweep ---------------------------------------------------------


def backward(tape: Tape, root: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of the scalar ``root`` with respect to every tracked leaf.

    Leaf tensors also get their ``.grad`` attribute set.
    """
    if root.shape != ():
        raise ShapeError("backward", root.shape)
    leaves: dict[int, Tensor] = {}
    grads: dict[int, np.ndarray] = {id(root): np.asarray(1.0)}

    if root.op == "leaf":
        if not root.requires_grad:
            raise ValueError("backward: root does not require gradients")
        leaves[id(root)] = root
    elif root not in tape:
        raise ValueError("backward: root was not recorded on this tape")

    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            if not np.all(np.isfinite(pg)):
                raise NonFiniteError(f"backward: non-finite gradient flowing out of '{node.op}'")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if parent.op == "leaf":
                leaves[key] = parent

    result: dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = np.broadcast_to(grads.get(key, np.zeros(leaf.shape)), leaf.shape).copy()
        leaf.grad = g
        result[leaf] = g
    return result


def grad(function: Callable[[Tensor], Tensor], point) -> tuple[float, np.ndarray]:
    """Value and gradient of a scalar function at ``point``."""
    x = Tensor(point, requires_grad=True)
    with Tape() as tape:
        y = function(x)
    if not y.requires_grad:
        return float(y.data), np.zeros(x.shape)
    g = backward(tape, y).get(x, np.zeros(x.shape))
    return float(y.data), g


@dataclass
class FiniteDifferenceReport:
    max_relative_error: float
    passed: bool
    tape_gradient: np.ndarray
    numeric_gradient: np.ndarray
    nonsmooth: list[int] = field(default_factory=list)


def finite_difference_check(
    function: Callable[[Tensor], Tensor],
    point,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    kink_tolerance: float = 1e-3,
) -> FiniteDifferenceReport:
    """Compare tape gradients against central differences.

    The error is ``max_i |g_i - d_i| / max(max_i |d_i|, tiny)``. Coordinates
    where the one-sided differences disagree by more than ``kink_tolerance``
    (relative) are treated as non-smooth, reported, and excluded.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(point, dtype=np.float64)
    f0, g = grad(function, x0)

    def f(x):
        return float(function(Tensor(x)).data)

    numeric = np.zeros(x0.size)
    nonsmooth = []
    flat = x0.reshape(-1)
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += step
        down[i] -= step
        fu, fd = f(up.reshape(x0.shape)), f(down.reshape(x0.shape))
        numeric[i] = (fu - fd) / (2.0 * step)
        forward_d, backward_d = (fu - f0) / step, (f0 - fd) / step
        scale = max(1.0, abs(numeric[i]))
        if abs(forward_d - backward_d) > kink_tolerance * scale:
            nonsmooth.append(i)

    tape_flat = g.reshape(-1)
    keep = np.ones(flat.size, dtype=bool)
    keep[nonsmooth] = False
    if keep.any():
        denom = max(np.abs(numeric[keep]).max(), np.finfo(float).tiny)
        err = float(np.abs(tape_flat[keep] - numeric[keep]).max() / denom)
        if np.abs(numeric[keep]).max() == 0.0:
            err = float(np.abs(tape_flat[keep]).max())
    else:
        err = 0.0
    return FiniteDifferenceReport(
        max_relative_error=err,
        passed=err <= tolerance,
        tape_gradient=g,
        numeric_gradient=numeric.reshape(x0.shape),
        nonsmooth=nonsmooth,
    )
