"""Minimal dense-tensor library with reverse-mode automatic differentiation.

Tensors wrap float64 numpy arrays. Every differentiable operation records a
backward closure on the active :class:`Tape`; ``backward`` replays the tape in
exact reverse order of recording, accumulating gradients additively into every
reachable tensor that wants them. The op set is deliberately small: exactly
what embedding-table MLPs, the augmenter machinery, and their losses need.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class Tensor:
    """Dense float64 array with optional gradient accumulation.

    ``grad`` is lazily allocated on first accumulation and always matches
    ``data``'s shape. A tensor whose ``grad_suppressed`` flag is set (frozen
    parameters) silently drops incoming gradient contributions.
    """

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.grad_suppressed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def wants_grad(self) -> bool:
        return self.requires_grad and not self.grad_suppressed

    def accumulate(self, g: np.ndarray) -> None:
        if not self.wants_grad():
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__


class Parameter:
    """Named trainable tensor; ``frozen`` suppresses gradient accumulation.

    The grad buffer exists from construction so a frozen parameter's gradient
    is observably all-zero at any point, not merely absent.
    """

    def __init__(self, data, name: str, frozen: bool = False):
        self.tensor = Tensor(data, requires_grad=True)
        self.tensor.zero_grad()
        self.name = name
        self.frozen = frozen
        self.tensor.grad_suppressed = frozen

    def set_frozen(self, frozen: bool) -> None:
        self.frozen = frozen
        self.tensor.grad_suppressed = frozen

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray:
        assert self.tensor.grad is not None
        return self.tensor.grad

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape}, frozen={self.frozen})"


class Tape:
    """Append-only record of (output, backward closure) pairs.

    ``backward`` walks entries newest-first, so every consumer of a tensor has
    contributed to its gradient before that tensor's own producer runs.
    """

    def __init__(self):
        self.entries: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def record(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        self.entries.append((out, backward_fn))

    def clear(self) -> None:
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


_active_tape: Tape | None = Tape()


def active_tape() -> Tape | None:
    return _active_tape


def set_active_tape(tape: Tape | None) -> Tape | None:
    global _active_tape
    prev = _active_tape
    _active_tape = tape
    return prev


@contextlib.contextmanager
def no_tape():
    """Run forward passes without recording; outputs are untracked constants."""
    prev = set_active_tape(None)
    try:
        yield
    finally:
        set_active_tape(prev)


@contextlib.contextmanager
def new_tape():
    """Record onto a fresh tape for the duration of the block (one training step)."""
    tape = Tape()
    prev = set_active_tape(tape)
    try:
        yield tape
    finally:
        set_active_tape(prev)


def _tracking(*tensors: Tensor) -> bool:
    return _active_tape is not None and any(t.requires_grad for t in tensors)


def _emit(out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    if out.requires_grad:
        assert _active_tape is not None
        _active_tape.record(out, backward_fn)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(t) into every reachable tensor on the tape.

    The loss must be a scalar. Entries are visited in exact reverse order of
    recording; entries whose output never received a gradient are skipped.
    """
    if loss.data.shape != ():
        raise ShapeMismatchError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    tape = tape if tape is not None else _active_tape
    if tape is None:
        raise RuntimeError("backward called with no active tape")
    loss.grad = np.ones_like(loss.data)
    for out, backward_fn in reversed(tape.entries):
        if out.grad is not None:
            backward_fn(out.grad)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    """Elementwise sum; also accepts a trailing-shape bias for a batched left arg."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        bias_style = False
    elif a.ndim == b.ndim + 1 and a.shape[1:] == b.shape:
        bias_style = True
    else:
        raise ShapeMismatchError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data + b.data, requires_grad=_tracking(a, b))

    def backward_fn(g):
        if a.wants_grad():
            a.accumulate(g)
        if b.wants_grad():
            b.accumulate(g.sum(axis=0) if bias_style else g)

    return _emit(out, backward_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data - b.data, requires_grad=_tracking(a, b))

    def backward_fn(g):
        if a.wants_grad():
            a.accumulate(g)
        if b.wants_grad():
            b.accumulate(-g)

    return _emit(out, backward_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data * b.data, requires_grad=_tracking(a, b))

    def backward_fn(g):
        if a.wants_grad():
            a.accumulate(g * b.data)
        if b.wants_grad():
            b.accumulate(g * a.data)

    return _emit(out, backward_fn)


def div(a, b) -> Tensor:
    """Elementwise quotient; the caller is responsible for a nonzero divisor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"div: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data / b.data, requires_grad=_tracking(a, b))

    def backward_fn(g):
        if a.wants_grad():
            a.accumulate(g / b.data)
        if b.wants_grad():
            b.accumulate(-g * out.data / b.data)

    return _emit(out, backward_fn)


def scale(t, c: float) -> Tensor:
    t = as_tensor(t)
    c = float(c)
    out = Tensor(t.data * c, requires_grad=_tracking(t))

    def backward_fn(g):
        t.accumulate(g * c)

    return _emit(out, backward_fn)


def matmul(a, b) -> Tensor:
    """Matrix product for 1-D/2-D operands (vector operands contract away)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeMismatchError(f"matmul: only 1-D/2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: inner dimensions disagree, {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data, requires_grad=_tracking(a, b))

    def backward_fn(g):
        if a.ndim == 2 and b.ndim == 2:
            if a.wants_grad():
                a.accumulate(g @ b.data.T)
            if b.wants_grad():
                b.accumulate(a.data.T @ g)
        elif a.ndim == 1 and b.ndim == 2:
            if a.wants_grad():
                a.accumulate(b.data @ g)
            if b.wants_grad():
                b.accumulate(np.outer(a.data, g))
        elif a.ndim == 2 and b.ndim == 1:
            if a.wants_grad():
                a.accumulate(np.outer(g, b.data))
            if b.wants_grad():
                b.accumulate(a.data.T @ g)
        else:
            if a.wants_grad():
                a.accumulate(g * b.data)
            if b.wants_grad():
                b.accumulate(g * a.data)

    return _emit(out, backward_fn)


def contract3(x, w) -> Tensor:
    """Contract a vector (or batch of vectors) against axis 0 of a 3-D tensor.

    out[j, k] = sum_i x[i] * w[i, j, k]; a batched ``x`` of shape (B, d) yields
    shape (B, J, K).
    """
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 3:
        raise ShapeMismatchError(f"contract3: weight must be 3-D, got {w.shape}")
    if x.ndim not in (1, 2) or x.shape[-1] != w.shape[0]:
        raise ShapeMismatchError(f"contract3: incompatible shapes {x.shape} and {w.shape}")
    # Contractions run as 2-D matmuls on a (i, j*k) view of the weight so they
    # hit BLAS; einsum would fall back to a single-threaded C loop here.
    d, j, k = w.shape
    w_flat = w.data.reshape(d, j * k)
    if x.ndim == 1:
        out_data = (x.data @ w_flat).reshape(j, k)
    else:
        out_data = (x.data @ w_flat).reshape(x.shape[0], j, k)
    out = Tensor(out_data, requires_grad=_tracking(x, w))

    def backward_fn(g):
        g_flat = g.reshape(-1, j * k) if x.ndim == 2 else g.reshape(j * k)
        if x.wants_grad():
            x.accumulate(g_flat @ w_flat.T)
        if w.wants_grad():
            if x.ndim == 1:
                w.accumulate(np.multiply.outer(x.data, g))
            else:
                w.accumulate((x.data.T @ g_flat).reshape(d, j, k))

    return _emit(out, backward_fn)


def contract_last(m, v) -> Tensor:
    """Contract the last axis of ``m`` with a vector: out[...] = m[..., :] . v."""
    m, v = as_tensor(m), as_tensor(v)
    if v.ndim != 1 or m.shape[-1] != v.shape[0]:
        raise ShapeMismatchError(f"contract_last: incompatible shapes {m.shape} and {v.shape}")
    out = Tensor(m.data @ v.data, requires_grad=_tracking(m, v))
    lead = m.ndim - 1

    def backward_fn(g):
        if m.wants_grad():
            m.accumulate(g[..., None] * v.data)
        if v.wants_grad():
            v.accumulate(np.tensordot(g, m.data, axes=(tuple(range(lead)), tuple(range(lead)))))

    return _emit(out, backward_fn)


def reshape(t, shape: Sequence[int]) -> Tensor:
    t = as_tensor(t)
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != t.size:
        raise ShapeMismatchError(f"reshape: cannot view {t.shape} as {shape}")
    out = Tensor(t.data.reshape(shape), requires_grad=_tracking(t))

    def backward_fn(g):
        t.accumulate(g.reshape(t.shape))

    return _emit(out, backward_fn)


def concat(parts: Iterable[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeMismatchError("concat: need at least one tensor")
    nd = parts[0].ndim
    if any(p.ndim != nd for p in parts):
        raise ShapeMismatchError(f"concat: mixed ranks {[p.shape for p in parts]}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis),
                 requires_grad=_tracking(*parts))
    ax = axis if axis >= 0 else nd + axis
    widths = [p.shape[ax] for p in parts]
    splits = np.cumsum(widths)[:-1]

    def backward_fn(g):
        for p, piece in zip(parts, np.split(g, splits, axis=ax)):
            p.accumulate(piece)

    return _emit(out, backward_fn)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(t) -> Tensor:
    t = as_tensor(t)
    out = Tensor(np.maximum(t.data, 0.0), requires_grad=_tracking(t))

    def backward_fn(g):
        t.accumulate(g * (t.data > 0.0))

    return _emit(out, backward_fn)


_SIGMOID_LO = np.nextafter(0.0, 1.0)
_SIGMOID_HI = np.nextafter(1.0, 0.0)


def sigmoid(t) -> Tensor:
    """Logistic function, guaranteed strictly inside (0, 1).

    Saturated values are nudged to the nearest representable number inside
    the open interval (one ulp) so downstream code can rely on the bound.
    """
    t = as_tensor(t)
    z = t.data
    # split by sign so exp never overflows
    s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                 np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    s = np.clip(s, _SIGMOID_LO, _SIGMOID_HI)
    out = Tensor(s, requires_grad=_tracking(t))

    def backward_fn(g):
        t.accumulate(g * s * (1.0 - s))

    return _emit(out, backward_fn)


# ---------------------------------------------------------------------------
# lookups


def embedding_lookup(table, indices) -> Tensor:
    """Row gather from a 2-D table; backward scatters additively into the rows."""
    table = as_tensor(table)
    if table.ndim != 2:
        raise ShapeMismatchError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(
            f"embedding_lookup: index out of range for table with {table.shape[0]} rows")
    out = Tensor(table.data[idx], requires_grad=_tracking(table))

    def backward_fn(g):
        if table.wants_grad():
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, idx, g)

    return _emit(out, backward_fn)


def embedding_bag_mean(table, flat_indices, offsets) -> Tensor:
    """Mean-pool variable-length index bags out of an embedding table.

    ``flat_indices`` concatenates all bags; ``offsets`` (length B+1) delimits
    them. An empty bag yields a zero row and receives no gradient.
    """
    table = as_tensor(table)
    flat = np.asarray(flat_indices, dtype=np.int64)
    offs = np.asarray(offsets, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeMismatchError(f"embedding_bag_mean: table must be 2-D, got {table.shape}")
    if flat.size and (flat.min() < 0 or flat.max() >= table.shape[0]):
        raise IndexError(
            f"embedding_bag_mean: index out of range for table with {table.shape[0]} rows")
    n_bags = offs.size - 1
    counts = np.diff(offs)
    seg = np.repeat(np.arange(n_bags), counts)
    acc = np.zeros((n_bags, table.shape[1]))
    if flat.size:
        np.add.at(acc, seg, table.data[flat])
    denom = np.maximum(counts, 1).astype(np.float64)
    out = Tensor(acc / denom[:, None], requires_grad=_tracking(table))

    def backward_fn(g):
        if table.wants_grad() and flat.size:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, flat, g[seg] / denom[seg, None])

    return _emit(out, backward_fn)


# ---------------------------------------------------------------------------
# reductions and losses


def mean_all(t) -> Tensor:
    t = as_tensor(t)
    out = Tensor(np.asarray(t.data.mean()), requires_grad=_tracking(t))
    n = t.size

    def backward_fn(g):
        t.accumulate(np.full(t.shape, float(g) / n))

    return _emit(out, backward_fn)


def mean_last(t) -> Tensor:
    """Mean over the trailing axis: shape (..., K) -> (...)."""
    t = as_tensor(t)
    if t.ndim == 0:
        raise ShapeMismatchError("mean_last: needs at least one axis")
    out = Tensor(t.data.mean(axis=-1), requires_grad=_tracking(t))
    k = t.shape[-1]

    def backward_fn(g):
        t.accumulate(np.repeat(g[..., None], k, axis=-1) / k)

    return _emit(out, backward_fn)


def _mean_squared_difference(a: Tensor, b: Tensor, op: str) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    diff = a.data - b.data
    out = Tensor(np.asarray(np.mean(diff * diff)), requires_grad=_tracking(a, b))
    n = max(a.size, 1)

    def backward_fn(g):
        coeff = 2.0 * float(g) / n
        if a.wants_grad():
            a.accumulate(coeff * diff)
        if b.wants_grad():
            b.accumulate(-coeff * diff)

    return _emit(out, backward_fn)


def mse_loss(pred, target) -> Tensor:
    """Mean over all elements of the squared prediction error."""
    return _mean_squared_difference(as_tensor(pred), as_tensor(target), "mse_loss")


def l2_divergence(a, h) -> Tensor:
    """Divergence between an answer and a hidden state: mean squared difference."""
    return _mean_squared_difference(as_tensor(a), as_tensor(h), "l2_divergence")
