"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every op builds its output eagerly and, when any input requires gradients,
records a closure that maps the output adjoint to input adjoints.  A
:class:`Tape` is the topologically ordered list of those records reachable
from a scalar loss; :func:`backward` replays it in reverse.

Leading batch dimensions are supported wherever numpy supports them; general
broadcasting is only used for bias-style operands.
"""

from __future__ import annotations

import threading
import warnings
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
LAYER_NORM_EPS = 1e-5


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A precondition of an operation was violated."""


_local = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    """Dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __getitem__(self, key):
        return index(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn, op)
    return Tensor(data)


def stop_gradient(x) -> Tensor:
    """Identity in the forward pass; blocks all gradient flow to ``x``."""
    return Tensor(as_tensor(x).data)


# ---------------------------------------------------------------------------
# tape and backward


class Tape:
    """Operations reachable from ``loss`` in execution (topological) order."""

    def __init__(self, loss: Tensor):
        self.loss = loss
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


def backward(loss: Tensor, tape: Tape | None = None) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Raises ContractError for a non-scalar loss.  Returns the tape used, which
    may be passed back in to replay the same graph.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = Tape(loss)
    elif tape.loss is not loss:
        raise ContractError("tape was recorded for a different loss")
    if not loss.requires_grad:
        return tape
    adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = adjoints.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in adjoints:
                adjoints[key] = adjoints[key] + pg
            else:
                adjoints[key] = pg
    return tape


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


# ---------------------------------------------------------------------------
# activations


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # numerically stable in both tails
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0
    return _node(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,), "relu")


_ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def activation(kind: str, x) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ContractError(f"unknown activation {kind!r}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# contractions


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        return (
            _unbroadcast(g @ _swap(b.data), a.shape) if a.requires_grad else None,
            _unbroadcast(_swap(a.data) @ g, b.shape) if b.requires_grad else None,
        )

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def batched_contract_qk(q, k) -> Tensor:
    """Scores ``s[..., h, t, m] = sum_d q[..., h, t, d] * k[..., h, m, d]``."""
    q, k = as_tensor(q), as_tensor(k)
    if q.ndim < 3 or k.ndim < 3 or q.shape[-3] != k.shape[-3] or q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"contract_qk: heads/head-dim mismatch between {q.shape} and {k.shape}")

    def bw(g):
        return (
            _unbroadcast(g @ k.data, q.shape) if q.requires_grad else None,
            _unbroadcast(_swap(g) @ q.data, k.shape) if k.requires_grad else None,
        )

    return _node(q.data @ _swap(k.data), (q, k), bw, "contract_qk")


def batched_contract_av(w, v) -> Tensor:
    """Weighted values ``y[..., h, t, d] = sum_m w[..., h, t, m] * v[..., h, m, d]``."""
    w, v = as_tensor(w), as_tensor(v)
    if w.ndim < 3 or v.ndim < 3 or w.shape[-3] != v.shape[-3] or w.shape[-1] != v.shape[-2]:
        raise DimensionError(f"contract_av: heads/length mismatch between {w.shape} and {v.shape}")

    def bw(g):
        return (
            _unbroadcast(g @ _swap(v.data), w.shape) if w.requires_grad else None,
            _unbroadcast(_swap(w.data) @ g, v.shape) if v.requires_grad else None,
        )

    return _node(w.data @ v.data, (w, v), bw, "contract_av")


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum with explicit subscripts (no ellipsis).

    Every index of an operand must also appear in the other operand or in the
    output, so that each adjoint is itself a two-operand einsum.
    """
    a, b = as_tensor(a), as_tensor(b)
    lhs, out_idx = spec.replace(" ", "").split("->")
    a_idx, b_idx = lhs.split(",")
    for own, other in ((a_idx, b_idx), (b_idx, a_idx)):
        if not set(own) <= set(other) | set(out_idx):
            raise ContractError(f"einsum {spec!r}: index reduced within one operand")
    try:
        out = np.einsum(spec, a.data, b.data)
    except ValueError as err:
        raise DimensionError(f"einsum {spec!r} on {a.shape} and {b.shape}: {err}") from None

    def bw(g):
        return (
            np.einsum(f"{out_idx},{b_idx}->{a_idx}", g, b.data) if a.requires_grad else None,
            np.einsum(f"{out_idx},{a_idx}->{b_idx}", g, a.data) if b.requires_grad else None,
        )

    return _node(out, (a, b), bw, "einsum")


# ---------------------------------------------------------------------------
# normalization and softmax


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize each row over the last axis, then apply ``gain`` and ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(f"layer_norm: width {width} vs gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        lead = tuple(range(g.ndim - 1))
        return (
            gx,
            (g * xhat).sum(axis=lead) if gain.requires_grad else None,
            g.sum(axis=lead) if bias.requires_grad else None,
        )

    return _node(out, (x, gain, bias), bw, "layer_norm")


def masked_softmax(logits, mask) -> Tensor:
    """Softmax over the last axis restricted to entries where ``mask`` is True.

    Masked entries are exactly zero.  A row with no allowed entry yields all
    zeros and a RuntimeWarning.
    """
    logits = as_tensor(logits)
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=bool)
    if mask.shape != logits.shape[-mask.ndim:]:
        raise DimensionError(f"masked_softmax: mask {mask.shape} vs logits {logits.shape}")
    mask = np.broadcast_to(mask, logits.shape)
    shifted = np.where(mask, logits.data, -np.inf)
    row_max = shifted.max(axis=-1, keepdims=True)
    empty = ~np.isfinite(row_max)
    if empty.any():
        warnings.warn("masked_softmax: fully masked row, returning zeros", RuntimeWarning, stacklevel=2)
        row_max = np.where(empty, 0.0, row_max)
    e = np.where(mask, np.exp(np.where(mask, logits.data - row_max, 0.0)), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    out = e / np.where(denom > 0, denom, 1.0)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (logits,), bw, "masked_softmax")


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)
    return _node(out, (x,), lambda g: (g - probs * g.sum(axis=-1, keepdims=True),), "log_softmax")


# ---------------------------------------------------------------------------
# reductions and shape plumbing


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), bw, "sum")


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def swapaxes(x, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    return _node(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def index(x, key) -> Tensor:
    """``x[key]`` for basic or integer-array indexing."""
    x = as_tensor(x)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return _node(x.data[key], (x,), bw, "index")


def gather_rows(table, idx) -> Tensor:
    """Rows of a 2-D ``table`` selected by an integer array of any shape."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.intp)

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _node(table.data[idx], (table,), bw, "gather_rows")


def take_last(x, idx) -> Tensor:
    """``out[...] = x[..., idx[...]]``: pick one entry along the last axis."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape != x.shape[:-1]:
        raise DimensionError(f"take_last: index {idx.shape} vs operand {x.shape}")
    picked = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return _node(picked, (x,), bw, "take_last")
