"""Dense float64 matrices with tape-based reverse-mode differentiation.

Every tensor is two-dimensional. Operations executed while a :class:`Tape`
is active are recorded when at least one input requires a gradient;
outside a tape they run as plain numpy arithmetic, which is what inference
and finite-difference probing use.

Example::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(relu(matmul(x, w)))
    tape.backward(loss)
    w.grad  # ndarray, same shape as w
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "Tape",
    "TapeEntry",
    "RowGroups",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "shift",
    "relu",
    "tanh",
    "exp",
    "elementwise",
    "add_row",
    "concat_cols",
    "transpose",
    "gather_rows",
    "scale_rows",
    "sum_all",
    "group_softmax",
    "rowwise_softmax_over_groups",
    "segment_sum",
    "cross_entropy_with_logits",
    "backward",
    "grad_check",
    "finite_difference_errors",
    "relative_errors",
]

_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A rows x cols float64 matrix, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got an array of shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @classmethod
    def zeros(cls, rows: int, cols: int, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros((rows, cols)), requires_grad=requires_grad)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    # maps d(loss)/d(output) to one gradient (or None) per input
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations.

    Entries are appended in execution order, so the list is already a
    topological order and the backward sweep simply walks it in reverse.
    A tape belongs to the thread that opened it.
    """

    def __init__(self) -> None:
        self.entries: list[TapeEntry] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, op, inputs, output, backward_fn) -> None:
        self.entries.append(TapeEntry(op, tuple(inputs), output, backward_fn))

    def leaves(self) -> list[Tensor]:
        produced = {id(e.output) for e in self.entries}
        seen: set[int] = set()
        out = []
        for e in self.entries:
            for t in e.inputs:
                if t.requires_grad and id(t) not in produced and id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out

    def backward(self, loss: Tensor) -> list[Tensor]:
        """Populate ``.grad`` on every leaf recorded on this tape.

        Gradients from repeated use of a tensor are summed. Leaves the loss
        does not depend on receive zeros. Returns the leaves in first-use
        order.
        """
        if loss.shape != (1, 1):
            raise ContractError(f"backward needs a scalar (1x1) loss, got shape {loss.shape}")
        if not any(e.output is loss for e in self.entries):
            raise ContractError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
        for entry in reversed(self.entries):
            g_out = grads.pop(id(entry.output), None)
            if g_out is None:
                continue
            for inp, g in zip(entry.inputs, entry.backward(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        leaves = self.leaves()
        for leaf in leaves:
            g = grads.get(id(leaf))
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.array(g, dtype=np.float64)
        return leaves


def backward(loss: Tensor, tape: Tape | None = None) -> list[Tensor]:
    tape = tape or _active_tape()
    if tape is None:
        raise ContractError("no tape is active; run the forward pass inside `with Tape()`")
    return tape.backward(loss)


def _emit(op: str, inputs: Iterable[Tensor], value: np.ndarray, backward_fn) -> Tensor:
    inputs = tuple(inputs)
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(value, track)
    if track:
        tape.record(op, inputs, out, backward_fn)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: operand shapes differ, {a.shape} vs {b.shape}")


# --- linear algebra -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    ga, gb = a.requires_grad, b.requires_grad
    return _emit(
        "matmul", (a, b), A @ B,
        lambda g: (g @ B.T if ga else None, A.T @ g if gb else None),
    )


def transpose(a: Tensor) -> Tensor:
    return _emit("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def add_row(x: Tensor, row: Tensor) -> Tensor:
    """``x + row`` with a 1 x cols row vector broadcast over every row."""
    if row.shape != (1, x.shape[1]):
        raise DimensionError(f"add_row: expected a (1, {x.shape[1]}) row, got {row.shape}")
    return _emit("add_row", (x, row), x.data + row.data, lambda g: (g, g.sum(axis=0, keepdims=True)))


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols: row counts differ, {a.shape} vs {b.shape}")
    k = a.shape[1]
    return _emit(
        "concat_cols",
        (a, b),
        np.concatenate([a.data, b.data], axis=1),
        lambda g: (g[:, :k], g[:, k:]),
    )


def gather_rows(x: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.intp).reshape(-1)
    n, c = x.shape
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise DimensionError(f"gather_rows: index out of range for {n} rows")

    def bw(g):
        # scatter-add as a sparse (n x len(idx)) product; much faster than np.add.at
        scatter = sparse.csr_matrix(
            (np.ones(idx.shape[0]), (idx % n if n else idx, np.arange(idx.shape[0]))), shape=(n, idx.shape[0])
        )
        return (np.asarray(scatter @ g),)

    return _emit("gather_rows", (x,), x.data[idx], bw)


def scale_rows(x: Tensor, factors) -> Tensor:
    """Multiply row i by the constant ``factors[i]`` (no gradient to factors)."""
    f = np.asarray(factors, dtype=np.float64).reshape(-1)
    if f.shape[0] != x.shape[0]:
        raise ContractError(f"scale_rows: {f.shape[0]} factors for {x.shape[0]} rows")
    col = f[:, None]
    return _emit("scale_rows", (x,), x.data * col, lambda g: (g * col,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum_all", (x,), np.array([[x.data.sum()]]), lambda g: (np.full(shape, g[0, 0]),))


# --- elementwise ----------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return shift(a, b)
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return shift(a, -float(b))
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return _emit("mul", (a, b), A * B, lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def shift(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("shift", (a,), a.data + c, lambda g: (g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient 0 at exactly 0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _emit("exp", (a,), y, lambda g: (g * y,))


_UNARY = {"relu": relu, "tanh": tanh, "exp": exp}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: add, sub, mul, relu, tanh, exp, scale."""
    if op in _UNARY:
        (x,) = args
        return _UNARY[op](_as_tensor(x))
    if op in _BINARY:
        a, b = args
        return _BINARY[op](_as_tensor(a), b)
    if op == "scale":
        x, c = args
        return scale(_as_tensor(x), c)
    raise ContractError(f"unknown elementwise op {op!r}")


# --- grouped reductions ---------------------------------------------------


class RowGroups:
    """Assignment of the rows of a matrix to groups ``0..n_groups-1``.

    Rows are sorted by group once so per-group reductions run as
    ``ufunc.reduceat`` calls. Groups may be empty; operations that need
    every group populated check :attr:`has_empty`.
    """

    def __init__(self, ids, n_groups: int | None = None):
        ids = np.asarray(ids, dtype=np.intp).reshape(-1)
        if n_groups is None:
            n_groups = int(ids.max()) + 1 if ids.size else 0
        if ids.size and (ids.min() < 0 or ids.max() >= n_groups):
            raise ContractError(f"group ids must lie in [0, {n_groups})")
        self.ids = ids
        self.n_groups = int(n_groups)
        self.order = np.argsort(ids, kind="stable")
        self.counts = np.bincount(ids, minlength=self.n_groups)
        self.nonempty = np.flatnonzero(self.counts)
        ends = np.cumsum(self.counts)
        self.starts = (ends - self.counts)[self.nonempty]
        self.is_sorted = bool(np.all(ids[1:] >= ids[:-1]))
        # sorted, no empty groups, equal sizes (k-NN edge lists): reduce by reshaping
        size = int(self.counts[0]) if self.n_groups else 0
        self.block = size if self.is_sorted and size and np.all(self.counts == size) else 0

    @classmethod
    def from_partition(cls, groups: Sequence[Sequence[int]], n_rows: int | None = None) -> "RowGroups":
        """Build from explicit lists of row indices, one list per group."""
        if n_rows is None:
            n_rows = sum(len(g) for g in groups)
        ids = np.full(n_rows, -1, dtype=np.intp)
        for gi, rows in enumerate(groups):
            for r in rows:
                if ids[r] != -1:
                    raise ContractError(f"row {r} appears in more than one group")
                ids[r] = gi
        if (ids == -1).any():
            raise ContractError(f"rows {np.flatnonzero(ids == -1).tolist()} belong to no group")
        return cls(ids, len(groups))

    @property
    def n_rows(self) -> int:
        return self.ids.shape[0]

    @property
    def has_empty(self) -> bool:
        return self.nonempty.shape[0] < self.n_groups

    def _reduce(self, ufunc, values: np.ndarray, fill: float) -> np.ndarray:
        if self.block:
            return ufunc.reduce(values.reshape(self.n_groups, self.block, -1), axis=1)
        out = np.full((self.n_groups, values.shape[1]), fill)
        if self.n_rows:
            v = values if self.is_sorted else values[self.order]
            out[self.nonempty] = ufunc.reduceat(v, self.starts, axis=0)
        return out

    def sum(self, values: np.ndarray) -> np.ndarray:
        return self._reduce(np.add, values, 0.0)

    def max(self, values: np.ndarray) -> np.ndarray:
        return self._reduce(np.maximum, values, -np.inf)

    def expand(self, per_group: np.ndarray) -> np.ndarray:
        """Row i of the result is the row of ``per_group`` for row i's group."""
        if self.block:
            return np.repeat(per_group, self.block, axis=0)
        return per_group[self.ids]


def _groups(groups, n_rows: int) -> RowGroups:
    if isinstance(groups, RowGroups):
        g = groups
    elif len(groups) and not np.isscalar(groups[0]) and not isinstance(groups, np.ndarray):
        g = RowGroups.from_partition(groups, n_rows)
    else:
        g = RowGroups(groups)
    if g.n_rows != n_rows:
        raise DimensionError(f"group assignment covers {g.n_rows} rows, tensor has {n_rows}")
    return g


def group_softmax(values: Tensor, groups) -> Tensor:
    """Softmax over the rows of each group, independently per column.

    ``groups`` is a :class:`RowGroups`, an array of per-row group ids, or a
    list of row-index lists. Every group must be nonempty.
    """
    g = _groups(groups, values.shape[0])
    if g.has_empty:
        empty = np.flatnonzero(g.counts == 0).tolist()
        raise ContractError(f"group softmax over empty group(s) {empty}")
    x = values.data
    if g.block:
        # equal-size sorted groups: normalize along axis 1 of a (groups, size, cols) view
        x3 = x.reshape(g.n_groups, g.block, -1)
        z = np.exp(x3 - x3.max(axis=1, keepdims=True))
        y3 = z / z.sum(axis=1, keepdims=True)

        def bw3(dy):
            d3 = dy.reshape(y3.shape)
            return ((y3 * (d3 - (y3 * d3).sum(axis=1, keepdims=True))).reshape(x.shape),)

        return _emit("group_softmax", (values,), y3.reshape(x.shape), bw3)
    z = np.exp(x - g.expand(g.max(x)))
    y = z / g.expand(g.sum(z))

    def bw(dy):
        return (y * (dy - g.expand(g.sum(y * dy))),)

    return _emit("group_softmax", (values,), y, bw)


rowwise_softmax_over_groups = group_softmax


def segment_sum(values: Tensor, groups) -> Tensor:
    """Per-group row sums; empty groups yield zero rows."""
    g = _groups(groups, values.shape[0])
    return _emit("segment_sum", (values,), g.sum(values.data), lambda dy: (g.expand(dy),))


# --- loss -----------------------------------------------------------------


def cross_entropy_with_logits(logits: Tensor, label: int) -> Tensor:
    """``-log softmax(logits)[label]`` for a single 1 x C logit row."""
    if logits.shape[0] != 1:
        raise DimensionError(f"cross entropy expects a single logit row, got {logits.shape}")
    n_cls = logits.shape[1]
    if isinstance(label, bool) or int(label) != label or not 0 <= int(label) < n_cls:
        raise ContractError(f"label {label!r} outside 0..{n_cls - 1}")
    label = int(label)
    z = logits.data - logits.data.max()
    e = np.exp(z)
    top = int(np.argmax(z[0]))
    # log1p keeps the loss relatively accurate when it is tiny
    lse = np.log1p(e.sum() - e[0, top])
    p = e / (1.0 + (e.sum() - e[0, top]))
    onehot = np.zeros_like(p)
    onehot[0, label] = 1.0
    loss = np.array([[lse - z[0, label]]])
    return _emit("cross_entropy", (logits,), loss, lambda g: ((p - onehot) * g[0, 0],))


# --- verification ---------------------------------------------------------


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def finite_difference_errors(
    evaluate: Callable[[], float],
    tensor: Tensor,
    analytic: np.ndarray,
    h: float = 1e-5,
    coords: Iterable[tuple[int, int]] | None = None,
) -> np.ndarray:
    """Relative error of ``analytic`` against central differences.

    ``evaluate`` must recompute the scalar objective from the current
    contents of ``tensor.data``; each coordinate is perturbed in place and
    restored afterwards. Coordinates not listed in ``coords`` get error 0.
    """
    errs = np.zeros(tensor.shape)
    data = tensor.data
    it = coords if coords is not None else np.ndindex(*tensor.shape)
    for idx in it:
        orig = data[idx]
        data[idx] = orig + h
        fp = evaluate()
        data[idx] = orig - h
        fm = evaluate()
        data[idx] = orig
        numeric = (fp - fm) / (2.0 * h)
        errs[idx] = relative_errors(np.float64(analytic[idx]), np.float64(numeric))
    return errs


def grad_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a tensor to a scalar tensor. NaN in the result means ``f``
    produced non-finite values around ``point``.
    """
    x = Tensor(point.data if isinstance(point, Tensor) else point, requires_grad=True)
    with Tape() as tape:
        out = f(x)
    if not any(e.output is out for e in tape.entries):
        # f does not depend on x at all
        analytic = np.zeros(x.shape)
    else:
        tape.backward(out)
        analytic = x.grad

    probe = Tensor(x.data)

    def evaluate() -> float:
        return f(probe).item()

    errs = finite_difference_errors(evaluate, probe, analytic, h)
    return float(np.max(errs)) if errs.size else 0.0
