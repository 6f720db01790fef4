"""Dense 2-D float64 tensors with reverse-mode differentiation.

Every tensor is a ``rows x cols`` array. Operations on tensors that require
gradients record their parents and a backward closure; :func:`backward`
orders that record topologically (a :class:`Tape`) and walks it once in
reverse.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> loss = sum_(square(w))
    >>> backward(loss)[w]
    array([[2., 4.]])
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateError, DimensionError, DomainError, TapeError

__all__ = [
    "Tensor", "Tape", "Gradients", "GradCheckReport",
    "as_tensor", "constant", "detach",
    "add", "sub", "mul", "div", "neg", "scale", "matmul", "transpose",
    "leaky_relu", "hinge", "square", "log", "exp", "abs_", "clamp_min",
    "elementwise", "softmax_rows", "reduce", "sum_", "mean", "mean_nonzero",
    "max_rows", "rows_l2_norm", "normalize_rows", "cosine_matrix",
    "cosine_similarity", "concat", "take_rows", "backward", "grad_check",
]


class Tensor:
    """A 2-D float64 array that may take part in differentiation.

    Leaves are tensors created directly; non-leaves come out of operations and
    keep references to their parents until the tape that contains them is
    discarded.
    """

    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward", "_tape")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got array of shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._tape = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.name = None
        t._parents = ()
        t._backward = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """Tensor that never requires gradients (copies data)."""
    return Tensor(x.data if isinstance(x, Tensor) else x)


def detach(t: Tensor) -> Tensor:
    """Same values, cut from the tape. Shares memory with ``t``."""
    return Tensor._wrap(t.data)


def _node(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    out = Tensor._wrap(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# -- binary arithmetic -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    if np.any(b.data == 0.0):
        raise DomainError("division by zero")
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _node(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,))


def _rowwise_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Stacked 1-row products: each output row is independent of the other
    # rows of ``a`` bit for bit (plain gemm blocks across rows).
    return np.matmul(a[:, None, :], b)[:, 0, :]


def matmul(a: Tensor, b: Tensor, rowwise: bool = False) -> Tensor:
    """Matrix product. With ``rowwise`` each output row is bit-identical to
    the product of that row alone, whatever the other rows of ``a`` are."""
    a, b = as_tensor(a), as_tensor(b)
    if a.cols != b.rows:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    out = _rowwise_matmul(a.data, b.data) if rowwise else a.data @ b.data
    return _node(out, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    return _node(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


# -- unary elementwise -------------------------------------------------------

def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _node(np.where(pos, a.data, slope * a.data), (a,),
                 lambda g: (np.where(pos, g, slope * g),))


def hinge(a: Tensor) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is 0."""
    a = as_tensor(a)
    pos = a.data > 0
    return _node(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def square(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log of a non-positive value")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def abs_(a: Tensor) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _node(np.abs(a.data), (a,), lambda g: (g * sign,))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    a = as_tensor(a)
    keep = a.data >= lo
    # np.maximum lets NaN through so it is reported rather than floored
    return _node(np.maximum(a.data, lo), (a,), lambda g: (g * keep,))


_UNARY = {
    "leaky_relu": leaky_relu, "hinge": hinge, "square": square, "log": log,
    "exp": exp, "abs": abs_,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, *args, **kwargs) -> Tensor:
    """Dispatch by name: ``elementwise("leaky_relu", t, slope=0.1)``,
    ``elementwise("scale", t, 3.0)``, ``elementwise("add", a, b)``."""
    if kind in _UNARY:
        return _UNARY[kind](*args, **kwargs)
    if kind in _BINARY:
        return _BINARY[kind](*args, **kwargs)
    if kind == "scale":
        return scale(*args, **kwargs)
    raise ValueError(f"unknown elementwise op {kind!r}")


# -- softmax and reductions --------------------------------------------------

def softmax_rows(t: Tensor, mask=None) -> Tensor:
    """Row softmax. ``mask`` is a boolean array, True where an entry is kept;
    masked entries come out exactly 0 and receive no gradient."""
    t = as_tensor(t)
    if mask is None:
        z = t.data
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != t.shape:
            raise DimensionError(f"mask shape {mask.shape} does not match {t.shape}")
        if not mask.any(axis=1).all():
            raise DegenerateError("softmax over a fully masked row")
        z = np.where(mask, t.data, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _node(out, (t,), bw)


def _reduce_shape(t: Tensor, axis):
    if axis not in (None, 0, 1):
        raise DimensionError(f"invalid axis {axis!r} for a 2-D tensor")


def sum_(t: Tensor, axis=None) -> Tensor:
    t = as_tensor(t)
    _reduce_shape(t, axis)
    shape = t.shape
    if axis is None:
        out = np.array([[t.data.sum()]])
    else:
        out = t.data.sum(axis=axis, keepdims=True)
    return _node(out, (t,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(t: Tensor, axis=None) -> Tensor:
    t = as_tensor(t)
    _reduce_shape(t, axis)
    n = t.data.size if axis is None else t.shape[axis]
    return scale(sum_(t, axis), 1.0 / n)


def mean_nonzero(t: Tensor, axis=None) -> Tensor:
    """Sum divided by the number of entries strictly greater than 0; 0 when
    there are none."""
    t = as_tensor(t)
    _reduce_shape(t, axis)
    shape = t.shape
    if axis is None:
        count = np.array([[np.count_nonzero(t.data > 0)]], dtype=np.float64)
        total = np.array([[t.data.sum()]])
    else:
        count = (t.data > 0).sum(axis=axis, keepdims=True).astype(np.float64)
        total = t.data.sum(axis=axis, keepdims=True)
    inv = np.divide(1.0, count, out=np.zeros_like(count), where=count > 0)
    return _node(total * inv, (t,), lambda g: (np.broadcast_to(g * inv, shape).copy(),))


def max_rows(t: Tensor, mask=None) -> Tensor:
    """Row-wise maximum over unmasked entries (N x 1). Gradient goes to the
    first maximal entry."""
    t = as_tensor(t)
    z = t.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != t.shape:
            raise DimensionError(f"mask shape {mask.shape} does not match {t.shape}")
        if not mask.any(axis=1).all():
            raise DegenerateError("max over a fully masked row")
        z = np.where(mask, z, -np.inf)
    idx = np.argmax(z, axis=1)
    rows = np.arange(t.rows)
    out = z[rows, idx].reshape(-1, 1)
    shape = t.shape

    def bw(g):
        full = np.zeros(shape)
        full[rows, idx] = g[:, 0]
        return (full,)

    return _node(out, (t,), bw)


_REDUCE = {"sum": sum_, "mean": mean, "mean_nonzero": mean_nonzero}


def reduce(kind: str, t: Tensor, axis=None) -> Tensor:
    if kind == "max":
        if axis not in (1, None):
            raise DimensionError("max reduces along rows (axis=1) only")
        return max_rows(t)
    try:
        return _REDUCE[kind](t, axis)
    except KeyError:
        raise ValueError(f"unknown reduction {kind!r}") from None


# -- norms and cosine similarity ----------------------------------------------

def rows_l2_norm(t: Tensor) -> Tensor:
    """Euclidean norm of every row, shape (N, 1). Zero rows get zero gradient."""
    t = as_tensor(t)
    n = np.sqrt((t.data * t.data).sum(axis=1, keepdims=True))

    def bw(g):
        inv = np.divide(1.0, n, out=np.zeros_like(n), where=n > 0)
        return (g * t.data * inv,)

    return _node(n, (t,), bw)


def normalize_rows(t: Tensor) -> Tensor:
    t = as_tensor(t)
    n = np.sqrt((t.data * t.data).sum(axis=1, keepdims=True))
    if np.any(n == 0.0):
        raise DegenerateError("cannot normalise a zero-norm row")
    u = t.data / n

    def bw(g):
        return ((g - u * (g * u).sum(axis=1, keepdims=True)) / n,)

    return _node(u, (t,), bw)


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """All pairwise cosine similarities, shape (a.rows, b.rows)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.cols != b.cols:
        raise DimensionError(f"cosine: shapes {a.shape} and {b.shape} differ in width")
    return matmul(normalize_rows(a), transpose(normalize_rows(b)))


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two row vectors as a 1x1 tensor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.rows != 1 or b.rows != 1:
        raise DimensionError(f"cosine_similarity takes single rows, got {a.shape}, {b.shape}")
    return cosine_matrix(a, b)


# -- structural --------------------------------------------------------------

def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    if axis not in (0, 1):
        raise DimensionError(f"invalid concat axis {axis!r}")
    other = 1 - axis
    if len({t.shape[other] for t in ts}) != 1:
        raise DimensionError(f"concat: mismatched shapes {[t.shape for t in ts]}")
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), bw)


def take_rows(t: Tensor, idx) -> Tensor:
    t = as_tensor(t)
    idx = np.asarray(idx, dtype=np.intp).reshape(-1)
    shape = t.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _node(t.data[idx], (t,), bw)


# -- backward pass -----------------------------------------------------------

class Gradients:
    """Gradient arrays keyed by leaf tensor."""

    def __init__(self):
        self._grads: dict[int, np.ndarray] = {}
        self._leaves: dict[int, Tensor] = {}

    def _set(self, leaf: Tensor, grad: np.ndarray) -> None:
        self._grads[id(leaf)] = grad
        self._leaves[id(leaf)] = leaf

    def __getitem__(self, leaf: Tensor) -> np.ndarray:
        if id(leaf) in self._grads:
            return self._grads[id(leaf)]
        if leaf.requires_grad:
            # leaf did not influence the loss
            return np.zeros(leaf.shape)
        raise KeyError(f"{leaf!r} does not require gradients")

    def __contains__(self, leaf: Tensor) -> bool:
        return id(leaf) in self._grads

    def __len__(self):
        return len(self._grads)

    def items(self):
        return [(self._leaves[k], g) for k, g in self._grads.items()]


class Tape:
    """Topologically ordered record of the operations leading to ``loss``.

    A tape can run :meth:`backward` once; :meth:`reset` re-arms it.
    """

    def __init__(self, loss: Tensor):
        self.loss = loss
        self.nodes: list[Tensor] = []
        self.consumed = False
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

    def reset(self) -> None:
        self.consumed = False

    def backward(self, wrt: Iterable[Tensor] | None = None) -> Gradients:
        if self.consumed:
            raise TapeError("tape already consumed; call reset() before a second backward")
        if self.loss.shape != (1, 1):
            raise TapeError(f"backward needs a 1x1 loss, got {self.loss.shape}")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(self.loss): np.ones((1, 1))}
        result = Gradients()
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                result._set(node, g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        if wrt is not None:
            keep = Gradients()
            for leaf in wrt:
                keep._set(leaf, result[leaf])
            return keep
        return result


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> Gradients:
    """Gradients of a scalar ``loss`` with respect to every leaf that requires
    them (or only ``wrt``). Calling it twice on the same loss raises
    :class:`TapeError` unless ``loss._tape.reset()`` is called in between."""
    if not isinstance(loss, Tensor) or loss.shape != (1, 1):
        shape = getattr(loss, "shape", None)
        raise TapeError(f"backward needs a 1x1 loss tensor, got shape {shape}")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any tensor that requires gradients")
    if loss._tape is None:
        loss._tape = Tape(loss)
    return loss._tape.backward(wrt)


# -- finite-difference checking ----------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    n_checked: dict[str, int] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tol


def grad_check(
    f: Callable[[], Tensor],
    leaves,
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f()`` with central differences.

    ``leaves`` is a sequence or a name->Tensor mapping; their ``data`` is
    perturbed in place and restored. The relative error of one entry is
    ``|a - n| / max(|a|, |n|, floor)``. ``max_entries`` samples that many
    entries (across all leaves) instead of checking every one.
    """
    if isinstance(leaves, dict):
        named = list(leaves.items())
    else:
        named = [(t.name or f"leaf{i}", t) for i, t in enumerate(leaves)]
    analytic = backward(f(), wrt=[t for _, t in named])

    entries = [(k, j) for k, (_, t) in enumerate(named) for j in range(t.data.size)]
    if max_entries is not None and max_entries < len(entries):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(entries), size=max_entries, replace=False)
        entries = [entries[i] for i in sorted(pick)]

    report = GradCheckReport(tol=tol)
    for name, _ in named:
        report.max_rel_error[name] = 0.0
        report.n_checked[name] = 0
    for k, j in entries:
        name, t = named[k]
        flat = t.data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        up = f().item()
        flat[j] = orig - h
        down = f().item()
        flat[j] = orig
        num = (up - down) / (2.0 * h)
        ana = analytic[t].reshape(-1)[j]
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        report.max_rel_error[name] = max(report.max_rel_error[name], err)
        report.n_checked[name] += 1
    return report
