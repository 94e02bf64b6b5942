"""Dense tensors with a reverse-mode autodiff tape.

Layout convention: row-major, rank-4 tensors ordered (batch, channels, height,
width). Data lives in a read-only numpy array of float32 (default) or float64
(gradient-check mode, see :func:`precision`).

Recording is explicit. Operations executed inside ``with Tape() as tape:``
whose inputs require gradients append a node to the tape; outside a tape
nothing is recorded, which is how inference runs::

    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = (w * w).sum()
    grads = tape.backward(loss)
    grads[w]  # array([2., 2., 2.])
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    AxisOutOfRange,
    BoundsError,
    DetachedLoss,
    DomainError,
    NonFiniteInput,
    NonScalarOutput,
    NotScalarLoss,
    ShapeMismatch,
    UEEGError,
)

_local = threading.local()


def get_default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise TypeError(f"unsupported precision {dtype}")
    _local.dtype = dtype


@contextmanager
def precision(dtype):
    """Temporarily switch the default dtype, e.g. ``with precision(np.float64):``."""
    old = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = old


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def record_branches():
    """Collect the branch choices (ReLU signs, max positions, clamps) made inside the block.

    Yields a list that piecewise-smooth ops append arrays to. Two evaluations
    with equal lists ran on the same smooth piece of the function.
    """
    old = getattr(_local, "branches", None)
    log: list[np.ndarray] = []
    _local.branches = log
    try:
        yield log
    finally:
        _local.branches = old


def note_branch(arr: np.ndarray) -> None:
    log = getattr(_local, "branches", None)
    if log is not None:
        log.append(np.array(arr, copy=True))


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype or get_default_dtype(), copy=True)
        self.data = _freeze(arr)
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = _freeze(arr) if arr.flags.writeable else arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def _replace(self, arr: np.ndarray) -> None:
        # Optimizer and grad-check only: swaps the backing array for a new one.
        if arr.shape != self.data.shape:
            raise ShapeMismatch(f"cannot replace {self.data.shape} with {arr.shape}")
        self.data = _freeze(np.ascontiguousarray(arr, dtype=self.data.dtype))

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operators
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

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# tape


@dataclass
class Node:
    out: Tensor
    parents: tuple
    rule: Callable[[np.ndarray], tuple]
    op: str


class GradStore:
    """Mapping from tensors to their gradient arrays."""

    def __init__(self):
        self._items: dict[int, tuple[Tensor, np.ndarray]] = {}

    def __getitem__(self, t: Tensor) -> np.ndarray:
        return self._items[id(t)][1]

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._items

    def get(self, t: Tensor, default=None):
        item = self._items.get(id(t))
        return default if item is None else item[1]

    def __len__(self) -> int:
        return len(self._items)

    def tensors(self) -> list[Tensor]:
        return [t for t, _ in self._items.values()]

    def _accumulate(self, t: Tensor, g: np.ndarray) -> None:
        item = self._items.get(id(t))
        if item is None:
            self._items[id(t)] = (t, g)
        else:
            self._items[id(t)] = (t, item[1] + g)


class Tape:
    """Single-owner record of one forward pass.

    Nodes are appended in execution order, so parents always precede their
    consumers and a reverse sweep is a valid topological traversal.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._position: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def _record(self, out: Tensor, parents: tuple, rule, op: str) -> None:
        self._position[id(out)] = len(self.nodes)
        self.nodes.append(Node(out, parents, rule, op))

    def backward(self, loss: Tensor) -> GradStore:
        return backward(self, loss)


def backward(tape: Tape, loss: Tensor) -> GradStore:
    if loss.size != 1:
        raise NotScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    end = tape._position.get(id(loss))
    if end is None or tape.nodes[end].out is not loss:
        raise DetachedLoss("loss was not produced on this tape")
    store = GradStore()
    store._accumulate(loss, np.ones_like(loss.data))
    for node in reversed(tape.nodes[: end + 1]):
        g = store.get(node.out)
        if g is None:
            continue
        pgrads = node.rule(g)
        for parent, pg in zip(node.parents, pgrads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeMismatch(
                    f"{node.op}: gradient shape {pg.shape} != parent shape {parent.shape}"
                )
            store._accumulate(parent, pg)
    return store


def record(data: np.ndarray, parents: Sequence[Tensor], rule, op: str) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and log it on the active tape.

    ``rule(g)`` maps the output gradient to a tuple of parent gradients (``None``
    for parents that need none).
    """
    tape = current_tape()
    track = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor._wrap(np.asarray(data), requires_grad=track)
    if track:
        tape._record(out, tuple(parents), rule, op)
    return out


# ---------------------------------------------------------------------------
# elementwise


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_operands(a, b) -> tuple[Tensor, Tensor, tuple]:
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from None
    return a, b, shape


def add(a, b) -> Tensor:
    a, b, _ = _binary_operands(a, b)
    return record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b, _ = _binary_operands(a, b)
    return record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b, _ = _binary_operands(a, b)
    return record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b, _ = _binary_operands(a, b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    out = a.data / b.data
    return record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    note_branch(mask)
    return record(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return record(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return record(t, (a,), lambda g: (g * (1 - t * t),), "tanh")


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return record(e, (a,), lambda g: (g * e,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    return record(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; clamped elements receive zero gradient."""
    inside = (a.data >= lo) & (a.data <= hi)
    note_branch(inside)
    out = np.clip(a.data, lo, hi)
    return record(out, (a,), lambda g: (g * inside,), "clip")


_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh, "exp": exp, "log": log, "neg": neg}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch by name: ``elementwise("relu", x)`` or ``elementwise("add", x, y)``."""
    if kind in _BINARY:
        if b is None:
            raise TypeError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](as_tensor(a))
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return record(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise AxisOutOfRange(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(out))


def reduce(kind: str, a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape

    def expand(g):
        if keepdims or axes is None and g.ndim == len(shape):
            return g
        if axes is None:
            return np.reshape(g, (1,) * len(shape))
        return np.expand_dims(g, axes)

    if kind == "sum":
        out = a.data.sum(axis=axes, keepdims=keepdims)
        return record(out, (a,), lambda g: (np.broadcast_to(expand(g), shape).copy(),), "sum")
    if kind == "mean":
        n = a.size if axes is None else int(np.prod([shape[i] for i in axes]))
        out = a.data.mean(axis=axes, keepdims=keepdims)
        return record(
            out, (a,), lambda g: (np.broadcast_to(expand(g) / n, shape).astype(a.dtype),), "mean"
        )
    if kind == "max":
        mask = _first_max_mask(a.data, axes)
        note_branch(mask)
        out = a.data.max(axis=axes, keepdims=keepdims)
        return record(out, (a,), lambda g: (mask * expand(g),), "max")
    raise ValueError(f"unknown reduction {kind!r}")


def _first_max_mask(x: np.ndarray, axes) -> np.ndarray:
    # one-hot of the first maximum inside each reduced group
    if axes is None:
        mask = np.zeros(x.size, dtype=x.dtype)
        mask[np.argmax(x)] = 1
        return mask.reshape(x.shape)
    keep = [i for i in range(x.ndim) if i not in axes]
    perm = keep + list(axes)
    moved = np.transpose(x, perm)
    flat = moved.reshape(moved.shape[: len(keep)] + (-1,))
    idx = np.argmax(flat, axis=-1)
    m = np.zeros_like(flat)
    np.put_along_axis(m, idx[..., None], 1, axis=-1)
    return np.transpose(m.reshape(moved.shape), np.argsort(perm))


def argmax(a: Tensor, axis=None) -> np.ndarray:
    """Index of the first maximum (not differentiable)."""
    if axis is not None:
        _norm_axis(axis, a.ndim)
    return np.argmax(a.data, axis=axis)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {a.shape} into {shape}") from None
    old = a.shape
    return record(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise AxisOutOfRange(f"bad permutation {axes} for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    return record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def slice_(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous sub-range ``[start, stop)`` along ``axis``."""
    (ax,) = _norm_axis(axis, a.ndim)
    if not 0 <= start <= stop <= a.shape[ax]:
        raise BoundsError(f"slice [{start}:{stop}) outside axis {ax} of size {a.shape[ax]}")
    index = (slice(None),) * ax + (slice(start, stop),)
    return getitem(a, index)


def getitem(a: Tensor, index) -> Tensor:
    if not isinstance(index, tuple):
        index = (index,)
    for ax, ix in enumerate(i for i in index if i is not Ellipsis):
        if isinstance(ix, (int, np.integer)) and ax < a.ndim and not -a.shape[ax] <= ix < a.shape[ax]:
            raise BoundsError(f"index {ix} out of range for axis {ax} of size {a.shape[ax]}")
    out = a.data[index]

    def rule(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return record(out, (a,), rule, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeMismatch("concat of nothing")
    (ax,) = _norm_axis(axis, tensors[0].ndim)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeMismatch(f"concat shapes disagree off axis {ax}: {ref} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def rule(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return record(out, tuple(tensors), rule, "concat")


def pad(a: Tensor, widths: Sequence[tuple[int, int]], value: float = 0.0) -> Tensor:
    """Constant padding; ``widths`` holds one (before, after) pair per axis."""
    widths = [tuple(int(v) for v in w) for w in widths]
    if len(widths) != a.ndim or any(w < 0 for pair in widths for w in pair):
        raise ShapeMismatch(f"bad pad widths {widths} for rank {a.ndim}")
    out = np.pad(a.data, widths, mode="constant", constant_values=value)
    index = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return record(out, (a,), lambda g: (g[index],), "pad")


def shape_ops(kind: str, a, *args, **kwargs) -> Tensor:
    ops = {"reshape": reshape, "transpose": transpose, "slice": slice_, "concat": concat, "pad": pad}
    if kind not in ops:
        raise ValueError(f"unknown shape op {kind!r}")
    return ops[kind](a, *args, **kwargs)


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


# ---------------------------------------------------------------------------
# softmax family


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput(f"{what}: non-finite input")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_finite(a.data, "softmax")
    (ax,) = _norm_axis(axis, a.ndim)
    z = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return record(y, (a,), rule, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_finite(a.data, "log_softmax")
    (ax,) = _norm_axis(axis, a.ndim)
    z = a.data - a.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return record(out, (a,), lambda g: (g - p * g.sum(axis=ax, keepdims=True),), "log_softmax")


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: list[float] = field(default_factory=list)
    eps: float = 1e-5
    tol: float = 1e-4
    skipped: int = 0
    probed: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Iterable[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    n_samples: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
    skip_kinks: bool = False,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(*xs)`` with central differences.

    The error for each tensor is normwise, ``max|analytic - numeric|`` over
    ``max(max|analytic|, max|numeric|, floor)``; the report keeps the worst.
    ``n_samples`` limits the number of probed coordinates per tensor (chosen
    with ``seed``) for large parameter sets. All tensors must be float64.

    With ``skip_kinks`` a probed coordinate is dropped when either perturbed
    evaluation takes a different branch (ReLU sign, max position, clamp) than
    the unperturbed one: the function has a kink inside the probe interval
    there, so central differences do not estimate the derivative.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if t.dtype != np.float64:
            raise UEEGError("grad_check needs float64 tensors (use precision(np.float64))")
    flags = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
    try:
        with Tape() as tape, record_branches() as base_branches:
            out = f(*xs)
        if out.size != 1:
            raise NonScalarOutput(f"grad_check needs a scalar function, got shape {out.shape}")
        grads = tape.backward(out) if out.requires_grad else GradStore()
        rng = np.random.default_rng(seed)
        errors = []
        skipped = probed = 0

        def same_branches(branches):
            return len(branches) == len(base_branches) and all(
                np.array_equal(a, b) for a, b in zip(branches, base_branches)
            )

        def evaluate():
            if not skip_kinks:
                return f(*xs).item(), True
            with record_branches() as branches:
                value = f(*xs).item()
            return value, same_branches(branches)

        for t in xs:
            analytic = grads.get(t, np.zeros_like(t.data)).reshape(-1)
            coords = np.arange(t.size)
            if n_samples is not None and t.size > n_samples:
                coords = np.sort(rng.choice(t.size, size=n_samples, replace=False))
            base = t.data.copy()
            numeric = np.empty(len(coords))
            smooth = np.ones(len(coords), dtype=bool)
            for j, i in enumerate(coords):
                flat = base.reshape(-1).copy()
                flat[i] += eps
                t._replace(flat.reshape(base.shape))
                hi, ok_hi = evaluate()
                flat[i] -= 2 * eps
                t._replace(flat.reshape(base.shape))
                lo, ok_lo = evaluate()
                numeric[j] = (hi - lo) / (2 * eps)
                smooth[j] = ok_hi and ok_lo
            t._replace(base)
            a = analytic[coords][smooth]
            numeric = numeric[smooth]
            probed += len(coords)
            skipped += int((~smooth).sum())
            denom = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
            err = np.abs(a - numeric)
            errors.append(float(np.max(err, initial=0.0) / denom))
    finally:
        for t, flag in zip(xs, flags):
            t.requires_grad = flag
    return GradCheckReport(max(errors, default=0.0), errors, eps, tol, skipped, probed)
