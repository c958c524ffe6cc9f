"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends a record to the active :class:`Tape`.
Records are appended in execution order, so the tape is topologically sorted
by construction and :meth:`Tape.backward` simply walks it in reverse.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> backward((x * x).sum())
    >>> x.grad
    array([6.])
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, DimensionError

ArrayLike = Union[np.ndarray, float, int, Sequence]

_DTYPES = {"f64": np.float64, "f32": np.float32}
_state = threading.local()


def _default_dtype():
    return getattr(_state, "dtype", np.float64)


def get_default_dtype():
    return _default_dtype()


def set_default_dtype(dtype) -> None:
    """Set the float dtype for newly created tensors ("f32", "f64" or a numpy dtype)."""
    _state.dtype = _resolve_dtype(dtype)


def _resolve_dtype(dtype):
    if isinstance(dtype, str):
        try:
            return _DTYPES[dtype]
        except KeyError:
            raise ValueError(f"unknown precision {dtype!r}; expected one of {sorted(_DTYPES)}")
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    return dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default float dtype."""
    old = _default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


class Tensor:
    """Row-major real array with optional gradient and tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_gen", "name")
    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        dtype = _resolve_dtype(dtype) if dtype is not None else _default_dtype()
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self._gen = -1
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t.node_id = None
        t._gen = -1
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        extra = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{extra})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
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
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported; multiply by a reciprocal instead")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=_default_dtype()))


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


@dataclass
class Record:
    op: str
    inputs: tuple
    output_id: int
    backward: Callable[[np.ndarray], tuple]


@dataclass
class Tape:
    """Ordered log of differentiable operations.

    A tape is single-threaded; each thread has its own active tape.
    Call :meth:`reset` between optimisation steps to release saved values.
    """

    records: list = field(default_factory=list)
    generation: int = 0

    def record(self, op: str, inputs: tuple, out: Tensor, backward_fn) -> None:
        out.node_id = len(self.records)
        out._gen = self.generation
        out.requires_grad = True
        self.records.append(Record(op, inputs, out.node_id, backward_fn))

    def reset(self) -> None:
        self.records = []
        self.generation += 1

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node_id is None or loss._gen != self.generation:
            raise ContractError("loss was not produced on the active tape")

        # unreached leaves end up holding zeros rather than None
        for rec in self.records[: loss.node_id + 1]:
            for t in rec.inputs:
                if t.requires_grad and t.node_id is None and t.grad is None:
                    t.grad = np.zeros_like(t.data)

        grads = {loss.node_id: np.ones_like(loss.data)}
        for rec in reversed(self.records[: loss.node_id + 1]):
            g = grads.pop(rec.output_id, None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.node_id is None or t._gen != self.generation:
                    t.grad = t.grad + gi if t.grad is not None else np.array(gi, dtype=t.data.dtype)
                elif t.node_id in grads:
                    grads[t.node_id] = grads[t.node_id] + gi
                else:
                    grads[t.node_id] = gi


def get_tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = Tape()
    return tape


@contextlib.contextmanager
def use_tape(tape: Tape) -> Iterator[Tape]:
    old = getattr(_state, "tape", None)
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = old


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording them on the tape."""
    old = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    get_tape().backward(loss)


def _make(op: str, out_data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    out = Tensor._wrap(out_data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        get_tape().record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a} and {b}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def ewise(kind: str, a, b) -> Tensor:
    """Elementwise ``add``, ``sub`` or ``mul`` with size-1 broadcasting."""
    # python scalars take the dtype of the tensor operand
    if isinstance(a, Tensor) and isinstance(b, (int, float)):
        b = Tensor._wrap(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and isinstance(a, (int, float)):
        a = Tensor._wrap(np.asarray(a, dtype=b.dtype))
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(kind, a.shape, b.shape)
    sa, sb = a.shape, b.shape
    if kind == "add":
        out = a.data + b.data

        def bw(g):
            return _unbroadcast(g, sa), _unbroadcast(g, sb)

    elif kind == "sub":
        out = a.data - b.data

        def bw(g):
            return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    elif kind == "mul":
        ad, bd = a.data, b.data
        out = ad * bd

        def bw(g):
            ga = _unbroadcast(g * bd, sa) if a.requires_grad else None
            gb = _unbroadcast(g * ad, sb) if b.requires_grad else None
            return ga, gb

    else:
        raise ValueError(f"unknown elementwise op {kind!r}")
    return _make(kind, out, (a, b), bw)


def add(a, b) -> Tensor:
    return ewise("add", a, b)


def sub(a, b) -> Tensor:
    return ewise("sub", a, b)


def mul(a, b) -> Tensor:
    return ewise("mul", a, b)


def sigmoid(x: Tensor) -> Tensor:
    # exp(-log(1 + e^-x)) never overflows
    y = np.exp(-np.logaddexp(0.0, -x.data)).astype(x.dtype, copy=False)
    return _make("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make("relu", np.where(pos, x.data, 0.0).astype(x.dtype, copy=False), (x,), lambda g: (g * pos,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make("log", np.log(xd), (x,), lambda g: (g / xd,))


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` is true, else ``b``; no gradient flows to the unselected side."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    _broadcast_shape("where", np.broadcast_shapes(cond.shape, a.shape), b.shape)
    sa, sb = a.shape, b.shape
    out = np.where(cond, a.data, b.data)

    def bw(g):
        return _unbroadcast(np.where(cond, g, 0.0), sa), _unbroadcast(np.where(cond, 0.0, g), sb)

    return _make("where", out, (a, b), bw)


def masked_fill(x: Tensor, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by ``value``."""
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=bool)
    try:
        np.broadcast_to(mask, x.shape)
    except ValueError:
        raise DimensionError(f"masked_fill: mask shape {mask.shape} does not broadcast to {x.shape}") from None
    out = np.where(mask, np.asarray(value, dtype=x.dtype), x.data)
    return _make("masked_fill", out, (x,), lambda g: (np.where(mask, 0.0, g),))


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(x.dtype)
    return _make("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make("sum", np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    """Permute axes; by default swap the last two."""
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape
    out = x.data[index]
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in parts)

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make("getitem", np.array(out), (x,), bw)


def concat_lastdim(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis; backward splits the gradient."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("concat_lastdim needs at least one part")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise DimensionError(
                f"concat_lastdim: leading dims differ, {parts[0].shape} vs {p.shape}"
            )
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([p.shape[-1] for p in parts])[:-1]
    out = np.concatenate([p.data for p in parts], axis=-1)
    return _make("concat", out, tuple(parts), lambda g: tuple(np.split(g, bounds, axis=-1)))


def slice_lastdim(x: Tensor, start: int, stop: int) -> Tensor:
    return getitem(x, (Ellipsis, slice(start, stop)))


# ---------------------------------------------------------------------------
# linear algebra and fused ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[..., p, q] @ [..., q, r]`` with broadcast batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data
    out = ad @ bd

    if bd.ndim == 2:
        # fold batch dims into rows: one GEMM per gradient instead of a batched reduction
        def bw(g):
            ga = g @ bd.T if a.requires_grad else None
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if b.requires_grad else None
            return ga, gb

        return _make("matmul", out, (a, b), bw)

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make("matmul", out, (a, b), bw)


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise ContractError("softmax over an empty last dimension")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("softmax", y, (x,), bw)


def log_softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", y, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift per feature."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = xd.shape[-1]

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)
        gg = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, gg, gb

    return _make("layer_norm", out, (x, gamma, beta), bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; the backward pass scatter-adds into the table."""
    ids = np.asarray(ids.data if isinstance(ids, Tensor) else ids)
    if ids.size and not np.issubdtype(ids.dtype, np.integer):
        raise TypeError(f"embedding ids must be integers, got {ids.dtype}")
    ids = ids.astype(np.int64, copy=False)
    vocab = table.shape[0]
    bad = ids[(ids < 0) | (ids >= vocab)]
    if bad.size:
        raise IndexError(f"embedding id {int(bad.flat[0])} out of range for table of {vocab} rows")
    shape = table.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return _make("embedding", table.data[ids], (table,), bw)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over positions where ``mask`` is true."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    m = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(m.sum())
    if count == 0:
        raise ContractError("cross_entropy: no unmasked target positions")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * m).sum() / count
    weight = (m / count).astype(logits.dtype)[..., None]

    def bw(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (g * p * weight,)

    return _make("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), bw)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients of scalar ``f`` at ``x`` and central differences.

    The error per element is ``|ga - gn| / max(1, |ga| + |gn|)``.
    """
    x0 = np.array(x.data, dtype=np.float64)
    with precision("f64"), use_tape(Tape()):
        leaf = Tensor(x0, requires_grad=True)
        backward(f(leaf))
        analytic = leaf.grad.copy()

        numeric = np.zeros_like(x0)
        with no_grad():
            for i in np.ndindex(x0.shape):
                orig = x0[i]
                x0[i] = orig + eps
                fp = float(f(Tensor(x0)).data)
                x0[i] = orig - eps
                fm = float(f(Tensor(x0)).data)
                x0[i] = orig
                numeric[i] = (fp - fm) / (2 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic) + np.abs(numeric))
    return float(err.max()) if err.size else 0.0
