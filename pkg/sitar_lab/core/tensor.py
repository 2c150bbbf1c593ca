"""
Minimal n-dimensional arrays with reverse-mode automatic differentiation.

Every operation on a ``Tensor`` that requires gradients attaches a ``Node`` to
its output: the op kind, the input tensors and a backward rule mapping the
output gradient to input gradients. ``backward`` linearises the nodes reachable
from a scalar loss into a ``Tape`` (inputs always precede their consumers) and
replays it in reverse, so each recorded operation is visited exactly once. The
tape only lives for the duration of one ``backward`` call.

Data is always contiguous float64.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Iterator, Sequence, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import NonFiniteError, ShapeError, SitarError

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]
BackwardRule = Callable[[Array], tuple[Union[Array, None], ...]]
Operand = Union["Tensor", float, int]


class OpKind(str, Enum):
    """Differentiable operations understood by ``forward_op``."""

    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    MATMUL = "matmul"
    RELU = "relu"
    TANH = "tanh"
    EXP = "exp"
    LOG = "log"
    SUM = "sum"
    MEAN = "mean"
    SQUARE = "square"
    SOFTMAX = "softmax"
    LOG_SOFTMAX = "log_softmax"
    CONV2D = "conv2d"
    CONV_TRANSPOSE2D = "conv_transpose2d"
    RESHAPE = "reshape"
    CONCAT = "concat"


@dataclass(eq=False)
class Node:
    """How a tensor was produced."""

    op: OpKind
    inputs: tuple["Tensor", ...]
    backward_rule: BackwardRule


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: str | None = None,
    ) -> None:
        self.data: Array = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, detail="tensor is not a scalar")
        return float(self.data.reshape(()))

    def numpy(self) -> Array:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return stop_gradient(self)

    def _accumulate(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        op = f" op={self.node.op.value}" if self.node is not None else ""
        return (
            f"Tensor(shape={self.shape}{label}{op}, "
            f"requires_grad={self.requires_grad})"
        )

    # -------------------------------------------------------------- operators
    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __truediv__(self, other: float | int) -> "Tensor":
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def relu(self) -> "Tensor":
        return relu(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def square(self) -> "Tensor":
        return square(self)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def softmax(self) -> "Tensor":
        return softmax(self)

    def log_softmax(self) -> "Tensor":
        return log_softmax(self)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape)


class Tape:
    """Operations reachable from one output, in topological order."""

    def __init__(self, records: list[tuple[Tensor, Node]]) -> None:
        self.records = records

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        records: list[tuple[Tensor, Node]] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            tensor, expanded = stack.pop()
            if id(tensor) in visited or tensor.node is None:
                continue
            if expanded:
                visited.add(id(tensor))
                records.append((tensor, tensor.node))
                continue
            stack.append((tensor, True))
            for parent in tensor.node.inputs:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(records)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[tuple[Tensor, Node]]:
        return iter(self.records)

    def replay_backward(self, output: Tensor, seed: Array) -> None:
        """Propagate ``seed`` (d output / d output) to every attached leaf."""
        if output.node is None:
            output._accumulate(seed)
            return
        pending: dict[int, Array] = {id(output): seed}
        for tensor, node in reversed(self.records):
            g = pending.pop(id(tensor), None)
            if g is None:
                continue
            input_grads = node.backward_rule(g)
            for parent, pg in zip(node.inputs, input_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.node is None:
                    parent._accumulate(pg)
                elif id(parent) in pending:
                    pending[id(parent)] = pending[id(parent)] + pg
                else:
                    pending[id(parent)] = pg


def backward(loss: Tensor) -> Tape:
    """Accumulate d loss / d leaf into ``leaf.grad`` for every attached leaf."""
    if loss.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
    if not loss.requires_grad:
        raise SitarError("backward: loss is not attached to a differentiation tape")
    tape = Tape.from_output(loss)
    logger.debug("backward over %d recorded operations", len(tape))
    tape.replay_backward(loss, np.ones_like(loss.data))
    return tape


def stop_gradient(x: Tensor) -> Tensor:
    """Same values, no tape attachment: gradients never flow through the result."""
    return Tensor(x.data, requires_grad=False, name=x.name)


def as_tensor(value: Operand | ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _record(
    op: OpKind, data: Array, inputs: tuple[Tensor, ...], rule: BackwardRule
) -> Tensor:
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, rule)
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for dim, extent in enumerate(shape):
        if extent == 1 and g.shape[dim] != 1:
            g = g.sum(axis=dim, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a.shape, b.shape))
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise
def add(a: Operand, b: Operand) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", ta, tb)

    def rule(g: Array) -> tuple[Array, Array]:
        return _unbroadcast(g, ta.shape), _unbroadcast(g, tb.shape)

    return _record(OpKind.ADD, ta.data + tb.data, (ta, tb), rule)


def sub(a: Operand, b: Operand) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", ta, tb)

    def rule(g: Array) -> tuple[Array, Array]:
        return _unbroadcast(g, ta.shape), _unbroadcast(-g, tb.shape)

    return _record(OpKind.SUB, ta.data - tb.data, (ta, tb), rule)


def mul(a: Operand, b: Operand) -> Tensor:
    """Elementwise (Hadamard) product."""
    ta, tb = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", ta, tb)

    def rule(g: Array) -> tuple[Array, Array]:
        return _unbroadcast(g * tb.data, ta.shape), _unbroadcast(g * ta.data, tb.shape)

    return _record(OpKind.MUL, ta.data * tb.data, (ta, tb), rule)


def relu(x: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = x.data > 0.0

    def rule(g: Array) -> tuple[Array]:
        return (g * mask,)

    return _record(OpKind.RELU, np.where(mask, x.data, 0.0), (x,), rule)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def rule(g: Array) -> tuple[Array]:
        return (g * (1.0 - out * out),)

    return _record(OpKind.TANH, out, (x,), rule)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def rule(g: Array) -> tuple[Array]:
        return (g * out,)

    return _record(OpKind.EXP, out, (x,), rule)


def log(x: Tensor) -> Tensor:
    def rule(g: Array) -> tuple[Array]:
        return (g / x.data,)

    return _record(OpKind.LOG, np.log(x.data), (x,), rule)


def square(x: Tensor) -> Tensor:
    def rule(g: Array) -> tuple[Array]:
        return (2.0 * g * x.data,)

    return _record(OpKind.SQUARE, x.data * x.data, (x,), rule)


# ----------------------------------------------------------------- reductions
def _expand_reduced(
    g: Array, shape: tuple[int, ...], axis: int | tuple[int, ...] | None, keepdims: bool
) -> Array:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tensor_sum(
    x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False
) -> Tensor:
    def rule(g: Array) -> tuple[Array]:
        return (_expand_reduced(g, x.shape, axis, keepdims),)

    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=np.float64)
    return _record(OpKind.SUM, out, (x,), rule)


def mean(
    x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False
) -> Tensor:
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims), dtype=np.float64)
    count = x.size // max(out.size, 1)

    def rule(g: Array) -> tuple[Array]:
        return (_expand_reduced(g, x.shape, axis, keepdims) / count,)

    return _record(OpKind.MEAN, out, (x,), rule)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def rule(g: Array) -> tuple[Array]:
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record(OpKind.SOFTMAX, out, (x,), rule)


def log_softmax(x: Tensor) -> Tensor:
    """Numerically stable log of the last-axis softmax."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def rule(g: Array) -> tuple[Array]:
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _record(OpKind.LOG_SOFTMAX, out, (x,), rule)


# ------------------------------------------------------------- linear algebra
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for operands of rank 1 or 2."""
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    a2 = a.data if a.ndim == 2 else a.data[None, :]
    b2 = b.data if b.ndim == 2 else b.data[:, None]
    out2 = a2 @ b2
    out_shape = a.shape[:-1] + b.shape[1:]

    def rule(g: Array) -> tuple[Array, Array]:
        g2 = g.reshape(out2.shape)
        return (g2 @ b2.T).reshape(a.shape), (a2.T @ g2).reshape(b.shape)

    return _record(OpKind.MATMUL, out2.reshape(out_shape), (a, b), rule)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    target = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(target)
    except ValueError:
        raise ShapeError("reshape", x.shape, target) from None

    def rule(g: Array) -> tuple[Array]:
        return (g.reshape(x.shape),)

    return _record(OpKind.RESHAPE, out, (x,), rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(tensors)
    if not parts:
        raise ShapeError("concat", detail="no tensors given")
    try:
        out = np.concatenate([t.data for t in parts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in parts)) from None
    bounds = np.cumsum([t.shape[axis] for t in parts])[:-1]

    def rule(g: Array) -> tuple[Array, ...]:
        return tuple(np.split(g, bounds, axis=axis))

    return _record(OpKind.CONCAT, out, parts, rule)


# -------------------------------------------------------------- convolutions
def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 2,
    padding: int = 1,
) -> Tensor:
    """Direct 2-D cross-correlation. x: N×C×H×W, weight: F×C×k×k, bias: F."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    if weight.shape[2] != weight.shape[3]:
        raise ShapeError("conv2d", weight.shape, detail="kernel must be square")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError("conv2d", weight.shape, bias.shape, detail="bias")
    n, _, h, w = x.shape
    f, _, k, _ = weight.shape
    ho, wo = _conv_out(h, k, stride, padding), _conv_out(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", x.shape, weight.shape, detail="output would be empty")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wd = weight.data

    out = np.zeros((n, f, ho, wo))
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            out += np.einsum("nchw,fc->nfhw", patch, wd[:, :, i, j], optimize=True)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def rule(g: Array) -> tuple[Array | None, ...]:
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        for i in range(k):
            for j in range(k):
                rows = slice(i, i + stride * ho, stride)
                cols = slice(j, j + stride * wo, stride)
                patch = xp[:, :, rows, cols]
                gw[:, :, i, j] = np.einsum("nchw,nfhw->fc", patch, g, optimize=True)
                gxp[:, :, rows, cols] += np.einsum(
                    "nfhw,fc->nchw", g, wd[:, :, i, j], optimize=True
                )
        gx = gxp[:, :, padding : padding + h, padding : padding + w]
        grads: list[Array | None] = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(OpKind.CONV2D, out, inputs, rule)


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 2,
    padding: int = 1,
) -> Tensor:
    """Adjoint of ``conv2d``. x: N×Cin×H×W, weight: Cin×Cout×k×k, bias: Cout."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise ShapeError("conv_transpose2d", x.shape, weight.shape)
    if weight.shape[2] != weight.shape[3]:
        raise ShapeError("conv_transpose2d", weight.shape, detail="kernel must be square")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError("conv_transpose2d", weight.shape, bias.shape, detail="bias")
    n, _, h, w = x.shape
    _, cout, k, _ = weight.shape
    full_h, full_w = (h - 1) * stride + k, (w - 1) * stride + k
    ho, wo = full_h - 2 * padding, full_w - 2 * padding
    if ho < 1 or wo < 1:
        raise ShapeError("conv_transpose2d", x.shape, weight.shape, detail="output would be empty")
    wd = weight.data

    full = np.zeros((n, cout, full_h, full_w))
    for i in range(k):
        for j in range(k):
            full[:, :, i : i + stride * h : stride, j : j + stride * w : stride] += np.einsum(
                "nchw,cd->ndhw", x.data, wd[:, :, i, j], optimize=True
            )
    out = np.ascontiguousarray(full[:, :, padding : padding + ho, padding : padding + wo])
    if bias is not None:
        out += bias.data[None, :, None, None]

    def rule(g: Array) -> tuple[Array | None, ...]:
        gfull = np.zeros((n, cout, full_h, full_w))
        gfull[:, :, padding : padding + ho, padding : padding + wo] = g
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(wd)
        for i in range(k):
            for j in range(k):
                window = gfull[:, :, i : i + stride * h : stride, j : j + stride * w : stride]
                gx += np.einsum("ndhw,cd->nchw", window, wd[:, :, i, j], optimize=True)
                gw[:, :, i, j] = np.einsum("nchw,ndhw->cd", x.data, window, optimize=True)
        grads: list[Array | None] = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(OpKind.CONV_TRANSPOSE2D, out, inputs, rule)


_DISPATCH: dict[OpKind, Callable[..., Tensor]] = {
    OpKind.ADD: add,
    OpKind.SUB: sub,
    OpKind.MUL: mul,
    OpKind.MATMUL: matmul,
    OpKind.RELU: relu,
    OpKind.TANH: tanh,
    OpKind.EXP: exp,
    OpKind.LOG: log,
    OpKind.SUM: tensor_sum,
    OpKind.MEAN: mean,
    OpKind.SQUARE: square,
    OpKind.SOFTMAX: softmax,
    OpKind.LOG_SOFTMAX: log_softmax,
    OpKind.CONV2D: conv2d,
    OpKind.CONV_TRANSPOSE2D: conv_transpose2d,
    OpKind.RESHAPE: reshape,
}


def forward_op(op_kind: OpKind | str, *inputs: Tensor, **params: Any) -> Tensor:
    """Apply ``op_kind`` to ``inputs``; ``params`` carry axis/shape/stride options."""
    kind = OpKind(op_kind)
    if kind is OpKind.CONCAT:
        return concat(inputs, **params)
    return _DISPATCH[kind](*inputs, **params)


# ------------------------------------------------------- finite differences
def _scalar_value(value: Any) -> float:
    if isinstance(value, Tensor):
        return value.item()
    return float(np.asarray(value, dtype=np.float64).reshape(()))


def fd_gradient(
    f: Callable[[Array], Any], x: Tensor | ArrayLike, step: float = 1e-5
) -> Array:
    """Central-difference estimate of the gradient of scalar ``f`` at ``x``."""
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64, copy=True)
    grad = np.zeros_like(base)
    for i in range(base.size):
        original = base.flat[i]
        base.flat[i] = original + step
        f_plus = _scalar_value(f(base))
        base.flat[i] = original - step
        f_minus = _scalar_value(f(base))
        base.flat[i] = original
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFiniteError(f"fd_gradient: non-finite value at coordinate {i}")
        grad.flat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def autodiff_gradient(fn: Callable[[Tensor], Tensor], x: ArrayLike) -> Array:
    """Gradient of scalar ``fn`` at ``x`` by reverse mode."""
    leaf = Tensor(np.array(x, dtype=np.float64, copy=True), requires_grad=True)
    backward(fn(leaf))
    assert leaf.grad is not None
    return leaf.grad
