"""Dense tensors with reverse-mode automatic differentiation.

Every public operation returns a new :class:`Tensor`. When at least one input
requires a gradient (and recording is enabled), the result keeps references to
its inputs plus a closure mapping the output gradient to input gradients.
:func:`backward` linearises that graph into a :class:`Tape` and walks it once
in reverse.

Shapes are explicit. The only implicit expansion is

* ``matmul`` with a 2-D right operand, which is shared across leading batch
  axes (a linear layer), and
* ``add_bias``, which adds a vector to every row.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DegenerateRowError",
    "GraphError",
    "tensor",
    "no_grad",
    "is_recording",
    "matmul",
    "add",
    "add_bias",
    "sub",
    "mul",
    "scale",
    "neg",
    "transpose",
    "permute",
    "reshape",
    "activation",
    "gelu",
    "relu",
    "tanh",
    "layer_norm",
    "softmax_rows",
    "cross_entropy",
    "embedding",
    "sum_all",
    "backward",
    "ACTIVATIONS",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateRowError(ValueError):
    """A softmax row has no unmasked entry."""


class GraphError(RuntimeError):
    """Backward was requested on something that is not a scalar on the tape."""


_state = threading.local()


def is_recording() -> bool:
    return getattr(_state, "recording", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_recording()
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """An n-dimensional array of reals, optionally tracked for gradients.

    ``data`` is treated as immutable once the tensor exists; only ``grad`` is
    ever mutated (by accumulation in :func:`backward`). Optimizers replace
    parameter values through :meth:`assign`, which is not recorded.
    """

    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: BackwardFn | None = None
        self.op = "leaf"
        self.name = name

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
    def is_leaf(self) -> bool:
        return self.backward_fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def assign(self, values: np.ndarray) -> None:
        """Overwrite the values of a leaf in place (optimizer use only)."""
        if not self.is_leaf:
            raise GraphError("assign() is only valid on leaf tensors")
        values = np.asarray(values, dtype=self.data.dtype)
        if values.shape != self.data.shape:
            raise ShapeError(f"assign: shape {values.shape} does not match {self.data.shape}")
        self.data = values.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False, dtype=np.float64, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad, name=name)


def _result(data: np.ndarray, parents: Iterable[Tensor], fn: BackwardFn, op: str) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if is_recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = fn
        out.op = op
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` is ``(..., m, k)``; ``b`` is either ``(..., k, n)`` with the same
    leading axes, or a plain ``(k, n)`` matrix shared by every batch entry.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    shared = b.ndim == 2 and a.ndim > 2
    if a.shape[-1] != b.shape[-2] or (not shared and a.shape[:-2] != b.shape[:-2]):
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.data, b.data

    def fn(g):
        ga = g @ np.swapaxes(bv, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if shared:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return _result(av @ bv, (a, b), fn, "matmul")


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose: need at least 2-D, got {x.shape}")
    return _result(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "permute")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


# -- elementwise ------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    av, bv = a.data, b.data
    return _result(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * x.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),), "scale")


def neg(x: Tensor) -> Tensor:
    return _result(-x.data, (x,), lambda g: (-g,), "neg")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add vector ``b`` to every row of ``x`` (last-axis broadcast only)."""
    if b.ndim != 1 or x.shape[-1:] != b.shape:
        raise ShapeError(f"add_bias: bias {b.shape} does not match rows of {x.shape}")
    width = b.shape[0]
    return _result(x.data + b.data, (x, b), lambda g: (g, g.reshape(-1, width).sum(axis=0)), "add_bias")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


# -- nonlinearities ---------------------------------------------------------

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error linear unit ``x * Phi(x)``."""
    v = x.data
    cdf = 0.5 * (1.0 + erf(v * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * v * v)
    out = (v * cdf).astype(v.dtype, copy=False)
    dout = (cdf + v * pdf).astype(v.dtype, copy=False)
    return _result(out, (x,), lambda g: (g * dout,), "gelu")


def relu(x: Tensor) -> Tensor:
    v = x.data
    mask = v > 0
    return _result(np.where(mask, v, 0).astype(v.dtype, copy=False), (x,), lambda g: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {"gelu": gelu, "relu": relu, "tanh": tanh}


def activation(x: Tensor, kind: str = "gelu") -> Tensor:
    try:
        return ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; choose from {sorted(ACTIVATIONS)}") from None


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply per-feature gain and shift."""
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise ShapeError(f"layer_norm: gain/shift {gamma.shape}/{beta.shape} do not match width {width}")
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    centered = v - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gv = gamma.data

    def fn(g):
        dgamma = (g * xhat).reshape(-1, width).sum(axis=0) if gamma.requires_grad else None
        dbeta = g.reshape(-1, width).sum(axis=0) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            gx = g * gv
            dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _result(xhat * gv + beta.data, (x, gamma, beta), fn, "layer_norm")


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax over the last axis with optional boolean keep-mask.

    ``mask`` is True where an entry participates. It must match the trailing
    axes of ``x`` (e.g. an ``N x N`` causal mask applied to every head).
    Masked entries of the output are exactly zero.
    """
    v = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != v.shape[v.ndim - mask.ndim:]:
            raise ShapeError(f"softmax_rows: mask {mask.shape} does not match {v.shape}")
        if not mask.any(axis=-1).all():
            raise DegenerateRowError("softmax_rows: a row has every entry masked")
        v = np.where(mask, v, -np.inf)
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (x,), fn, "softmax")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` (``V x d``) for integer ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {table.shape[0]})")

    def fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result(table.data[ids], (table,), fn, "embedding")


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean next-token cross-entropy over the positions where ``mask`` is set.

    ``logits`` is ``(..., V)``; ``targets`` and ``mask`` have the leading shape.
    """
    targets = np.asarray(targets, dtype=np.int64)
    lead = logits.shape[:-1]
    if targets.shape != lead:
        raise ShapeError(f"cross_entropy: targets {targets.shape} do not match logits {logits.shape}")
    mask = np.ones(lead, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != lead:
        raise ShapeError(f"cross_entropy: mask {mask.shape} does not match logits {logits.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy: loss mask selects no positions")
    v = logits.data
    shifted = v - v.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))

    idx = np.where(mask, targets, 0)[..., None]
    weight = (mask / count).astype(v.dtype)[..., None]

    picked = np.take_along_axis(shifted, idx, axis=-1)[..., 0]
    loss = ((logz - picked) * mask).sum() / count

    def fn(g):
        p = np.exp(shifted - logz[..., None])
        np.put_along_axis(p, idx, np.take_along_axis(p, idx, axis=-1) - 1.0, axis=-1)
        return (p * weight * g,)

    return _result(np.asarray(loss, dtype=v.dtype), (logits,), fn, "cross_entropy")


# -- reverse pass -----------------------------------------------------------


class Tape:
    """Topologically ordered record of the graph that produced a tensor.

    ``nodes[i]`` never depends on ``nodes[j]`` for ``j > i``; the output is the
    final node.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node.parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def is_topological(self) -> bool:
        position = {id(n): i for i, n in enumerate(self.nodes)}
        return all(
            position[id(p)] < i
            for i, n in enumerate(self.nodes)
            for p in n.parents
            if p.requires_grad
        )

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


def backward(loss: Tensor, inputs: Sequence[Tensor] | None = None) -> Tape:
    """Accumulate ``d loss / d leaf`` into ``leaf.grad`` for every tracked leaf.

    Leaves listed in ``inputs`` that the loss does not depend on receive a
    zero gradient. Returns the tape that was walked.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise GraphError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("backward: loss is not on the tape (no input requires grad)")
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for t in inputs or ():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    return tape
