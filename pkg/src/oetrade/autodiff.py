"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation records its parents and a local vector-Jacobian product.
``backward`` replays the recorded graph in reverse topological order and
accumulates gradients into leaf tensors created with ``requires_grad=True``.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateInputError, NumericError, ParameterError, ShapeError

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "vjp", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = ()
        self.vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis=None, keepdims=False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out.requires_grad = False
    out.parents = ()
    out.vjp = None
    out.op = "const"
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.vjp = vjp
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def relu(a) -> Tensor:
    a = as_tensor(a)
    # derivative at exactly 0 is taken as 0
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


# ---------------------------------------------------------------------------
# shape and linear-algebra primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return _make(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
        "matmul",
    )


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def take(a, index) -> Tensor:
    """Basic or integer-array indexing along leading axes."""
    a = as_tensor(a)

    basic = isinstance(index, (int, slice)) or (
        isinstance(index, tuple) and all(isinstance(i, (int, slice)) for i in index)
    )

    def vjp(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), vjp, "take")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, vjp, "concat")


# ---------------------------------------------------------------------------
# reductions


def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return _make(
        a.data.sum(axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (_expand(g, a.shape, axis, keepdims).copy(),),
        "sum",
    )


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def tmax(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Max-reduce; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    if axis is None:
        flat = int(np.argmax(a.data))

        def vjp(g):
            full = np.zeros(a.data.size)
            full[flat] = float(g)
            return (full.reshape(a.shape),)

        out = a.data.reshape(-1)[flat]
        if keepdims:
            out = np.reshape(out, (1,) * a.ndim)
        return _make(out, (a,), vjp, "max")

    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), g, axis=axis)
        return (full,)

    return _make(out if keepdims else np.squeeze(out, axis), (a,), vjp, "max")


# ---------------------------------------------------------------------------
# fused numerically-stable primitives


def _check_logits(z: np.ndarray) -> None:
    if np.isnan(z).any():
        raise NumericError("NaN in logits")


def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")


def softmax(logits, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Softmax of ``logits / temperature`` along ``axis``, via max subtraction."""
    _check_temperature(temperature)
    z = as_tensor(logits)
    _check_logits(z.data)
    scaled = z.data / temperature
    shifted = scaled - scaled.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return ((g - (g * out).sum(axis=axis, keepdims=True)) * out / temperature,)

    return _make(out, (z,), vjp, "softmax")


def log_softmax(logits, temperature: float = 1.0, axis: int = -1) -> Tensor:
    _check_temperature(temperature)
    z = as_tensor(logits)
    _check_logits(z.data)
    scaled = z.data / temperature
    shifted = scaled - scaled.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def vjp(g):
        return ((g - probs * g.sum(axis=axis, keepdims=True)) / temperature,)

    return _make(out, (z,), vjp, "log_softmax")


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    _check_logits(a.data)
    m = a.data.max(axis=axis, keepdims=True)
    s = np.exp(a.data - m).sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    weights = np.exp(a.data - out)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    return _make(out if keepdims else np.squeeze(out, axis), (a,), vjp, "logsumexp")


def masked_log_softmax(a, mask: np.ndarray, axis: int = -1) -> Tensor:
    """``a - log(sum(mask * exp(a)))`` along ``axis``; ``mask`` is a constant 0/1 array.

    Entries with mask 0 are excluded from the normaliser only. Every slice
    must keep at least one active entry.
    """
    a = as_tensor(a)
    _check_logits(a.data)
    mask = np.broadcast_to(np.asarray(mask, dtype=np.float64), a.shape)
    if np.any(mask.sum(axis=axis) == 0):
        raise DegenerateInputError("masked_log_softmax: a slice has no active entries")
    m = np.where(mask > 0, a.data, -np.inf).max(axis=axis, keepdims=True)
    e = np.exp(a.data - m) * mask
    s = e.sum(axis=axis, keepdims=True)
    weights = e / s

    def vjp(g):
        return (g - weights * g.sum(axis=axis, keepdims=True),)

    return _make(a.data - (np.log(s) + m), (a,), vjp, "masked_log_softmax")


def l2_normalize(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise DegenerateInputError("cannot normalize a zero vector")
    out = a.data / norm

    def vjp(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _make(out, (a,), vjp, "l2_normalize")


# ---------------------------------------------------------------------------
# reverse pass


class Tape:
    """Nodes reachable from a root, ordered so that parents precede children."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> Tape:
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
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = Tape.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.vjp is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def finite_difference_check(
    loss_fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5
) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    The relative gap of one entry is ``|analytic - numeric| / max(1, |numeric|)``.
    ``loss_fn`` must rebuild the loss from ``params`` on every call.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                up = loss_fn().item()
            flat[i] = orig - eps
            with no_grad():
                down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst
