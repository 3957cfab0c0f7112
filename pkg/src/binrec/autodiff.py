"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tape` records every operation in creation order; because each
node is created after its inputs, the record list is already a topological
order and the backward sweep is a single reversed pass.  Values are float64
throughout.  Gradients accumulate into ``Node.grad`` and start as ``None``
so that nodes outside the ancestry of the loss are skipped for free.

Every operation validates operand shapes up front and raises
:class:`~binrec.errors.ShapeError` naming the op and both shapes, so shape
bugs surface at the call site instead of deep inside numpy broadcasting.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sparse
from scipy.special import expit

from .errors import ConfigError, NumericError, ShapeError


class Node:
    """A value on the tape together with its accumulated gradient."""

    __slots__ = ("value", "grad", "op", "tape")

    def __init__(self, value: np.ndarray, op: str, tape: "Tape"):
        self.value = value
        self.grad: np.ndarray | None = None
        self.op = op
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Node(op={self.op!r}, shape={self.shape})"


class Tape:
    """Flat record of operations, replayed in reverse to backpropagate."""

    def __init__(self) -> None:
        self._records: list[tuple[Node, Callable[[np.ndarray], None]]] = []

    def leaf(self, value, op: str = "leaf") -> Node:
        """Wrap an array as an input node (not recorded; has no pull-back)."""
        return Node(np.asarray(value, dtype=np.float64), op, self)

    def record(self, value, pull: Callable[[np.ndarray], None], op: str) -> Node:
        node = Node(np.asarray(value, dtype=np.float64), op, self)
        self._records.append((node, pull))
        return node

    def backward(self, loss: Node) -> None:
        """Seed ``loss.grad = 1`` and run all pull-backs in reverse order."""
        if loss.value.shape != ():
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.value.shape}")
        if not np.isfinite(loss.value):
            raise NumericError(f"backward: loss is non-finite ({loss.value!r})")
        loss.grad = np.asarray(1.0)
        for node, pull in reversed(self._records):
            if node.grad is not None:
                pull(node.grad)

    def ops(self) -> list[str]:
        """Op names of recorded (non-leaf) nodes, in creation order."""
        return [node.op for node, _ in self._records]

    def __len__(self) -> int:
        return len(self._records)


def _accum(node: Node, grad: np.ndarray) -> None:
    if node.grad is None:
        node.grad = np.zeros_like(node.value)
    node.grad += grad


def _check_same(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


def index_add_rows(out: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> None:
    """``out[idx] += rows`` with repeated indices summed.

    ``np.add.at`` handles repeats but is slow for large batches, so beyond a
    small cutoff we sort by destination row and use ``np.add.reduceat``.
    """
    if len(idx) < 1024:
        np.add.at(out, idx, rows)
        return
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    sorted_rows = rows[order]
    starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]])
    out[sorted_idx[starts]] += np.add.reduceat(sorted_rows, starts, axis=0)


# ---------------------------------------------------------------------------
# arithmetic primitives
# ---------------------------------------------------------------------------


def add(a: Node, b: Node) -> Node:
    _check_same("add", a, b)

    def pull(g):
        _accum(a, g)
        _accum(b, g)

    return a.tape.record(a.value + b.value, pull, "add")


def sub(a: Node, b: Node) -> Node:
    _check_same("sub", a, b)

    def pull(g):
        _accum(a, g)
        _accum(b, -g)

    return a.tape.record(a.value - b.value, pull, "sub")


def hadamard(a: Node, b: Node) -> Node:
    """Elementwise product."""
    _check_same("hadamard", a, b)

    def pull(g):
        _accum(a, g * b.value)
        _accum(b, g * a.value)

    return a.tape.record(a.value * b.value, pull, "hadamard")


def scale(a: Node, c: float) -> Node:
    """Multiply by a scalar constant."""
    c = float(c)

    def pull(g):
        _accum(a, c * g)

    return a.tape.record(c * a.value, pull, "scale")


def scale_rows(a: Node, s: Node) -> Node:
    """Scale row ``i`` of ``a`` by the scalar ``s[i, 0]``."""
    if a.value.ndim != 2 or s.shape != (a.shape[0], 1):
        raise ShapeError(f"scale_rows: expected ({a.shape[0]}, 1) row scales for operand {a.shape}, got {s.shape}")

    def pull(g):
        _accum(a, g * s.value)
        _accum(s, np.sum(g * a.value, axis=1, keepdims=True))

    return a.tape.record(a.value * s.value, pull, "scale_rows")


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def pull(g):
        _accum(a, g @ b.value.T)
        _accum(b, a.value.T @ g)

    return a.tape.record(a.value @ b.value, pull, "matmul")


def sparse_dense_matmul(lap: sparse.spmatrix, x: Node) -> Node:
    """Product of a constant sparse matrix with a dense node.

    The sparse operand is treated as data (no gradient); the pull-back is a
    transposed sparse product.
    """
    if lap.shape[1] != x.shape[0]:
        raise ShapeError(f"sparse_dense_matmul: cannot multiply {lap.shape} by {x.shape}")

    def pull(g):
        _accum(x, lap.T @ g)

    return x.tape.record(lap @ x.value, pull, "sparse_dense_matmul")


def concat_cols(*parts: Node) -> Node:
    rows = parts[0].shape[0]
    for p in parts[1:]:
        if p.value.ndim != 2 or p.shape[0] != rows:
            raise ShapeError(f"concat_cols: row counts differ, {parts[0].shape} vs {p.shape}")
    widths = [p.shape[1] for p in parts]
    splits = np.cumsum(widths)[:-1]

    def pull(g):
        for part, piece in zip(parts, np.split(g, splits, axis=1)):
            _accum(part, piece)

    return parts[0].tape.record(np.concatenate([p.value for p in parts], axis=1), pull, "concat_cols")


def concat_rows(*parts: Node) -> Node:
    cols = parts[0].shape[1]
    for p in parts[1:]:
        if p.value.ndim != 2 or p.shape[1] != cols:
            raise ShapeError(f"concat_rows: column counts differ, {parts[0].shape} vs {p.shape}")
    heights = [p.shape[0] for p in parts]
    splits = np.cumsum(heights)[:-1]

    def pull(g):
        for part, piece in zip(parts, np.split(g, splits, axis=0)):
            _accum(part, piece)

    return parts[0].tape.record(np.concatenate([p.value for p in parts], axis=0), pull, "concat_rows")


def gather_rows(a: Node, idx) -> Node:
    """Select rows ``a[idx]``; the pull-back scatter-adds into the source."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: index array must be 1-D, got shape {idx.shape}")
    if len(idx) and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for operand with {a.shape[0]} rows")

    def pull(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.value)
        index_add_rows(a.grad, idx, g)

    return a.tape.record(a.value[idx], pull, "gather_rows")


def reduce_sum(a: Node, axis: int | None = None) -> Node:
    """Sum all entries (scalar) or each row (``axis=1``, keeps a column shape)."""
    if axis is None:
        value = a.value.sum()
    elif axis == 1:
        if a.value.ndim != 2:
            raise ShapeError(f"reduce_sum: axis=1 needs a 2-D operand, got shape {a.shape}")
        value = a.value.sum(axis=1, keepdims=True)
    else:
        raise ShapeError(f"reduce_sum: unsupported axis {axis!r}")

    def pull(g):
        _accum(a, np.broadcast_to(g, a.shape))

    return a.tape.record(value, pull, "reduce_sum")


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def tanh(a: Node) -> Node:
    y = np.tanh(a.value)

    def pull(g):
        _accum(a, g * (1.0 - y * y))

    return a.tape.record(y, pull, "tanh")


def sigmoid(a: Node) -> Node:
    y = expit(a.value)

    def pull(g):
        _accum(a, g * y * (1.0 - y))

    return a.tape.record(y, pull, "sigmoid")


def log(a: Node) -> Node:
    def pull(g):
        _accum(a, g / a.value)

    return a.tape.record(np.log(a.value), pull, "log")


def square(a: Node) -> Node:
    def pull(g):
        _accum(a, 2.0 * g * a.value)

    return a.tape.record(a.value * a.value, pull, "square")


def absolute(a: Node) -> Node:
    def pull(g):
        _accum(a, g * np.sign(a.value))

    return a.tape.record(np.abs(a.value), pull, "absolute")


def softplus(a: Node) -> Node:
    """``log(1 + exp(x))`` evaluated stably for large ``|x|``."""
    value = np.logaddexp(0.0, a.value)

    def pull(g):
        _accum(a, g * expit(a.value))

    return a.tape.record(value, pull, "softplus")


def _check_temperature(op: str, temperature: float) -> float:
    temperature = float(temperature)
    if temperature <= 0.0:
        raise ConfigError(f"{op}: temperature must be positive, got {temperature}")
    return temperature


def row_softmax(a: Node, temperature: float = 1.0) -> Node:
    """Softmax of each row of ``a / temperature``."""
    temperature = _check_temperature("row_softmax", temperature)
    if a.value.ndim != 2:
        raise ShapeError(f"row_softmax: operand must be 2-D, got shape {a.shape}")
    z = a.value / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def pull(g):
        inner = np.sum(g * p, axis=1, keepdims=True)
        _accum(a, (g - inner) * p / temperature)

    return a.tape.record(p, pull, "row_softmax")


def row_log_softmax(a: Node, temperature: float = 1.0) -> Node:
    """Log of :func:`row_softmax`, computed without forming the softmax first."""
    temperature = _check_temperature("row_log_softmax", temperature)
    if a.value.ndim != 2:
        raise ShapeError(f"row_log_softmax: operand must be 2-D, got shape {a.shape}")
    z = a.value / temperature
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def pull(g):
        p = np.exp(logp)
        _accum(a, (g - p * g.sum(axis=1, keepdims=True)) / temperature)

    return a.tape.record(logp, pull, "row_log_softmax")


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


@dataclass
class BatchNormState:
    """Learnable scale/shift plus running statistics for one normalized layer.

    ``mode`` selects batch statistics ("train") or the running estimates
    ("eval").  Running statistics only change when the forward pass is told
    to commit them, so repeated evaluations are side-effect free.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5
    mode: str = "train"

    @classmethod
    def create(cls, dim: int, momentum: float = 0.9, eps: float = 1e-5) -> "BatchNormState":
        return cls(
            gamma=np.ones(dim),
            beta=np.zeros(dim),
            running_mean=np.zeros(dim),
            running_var=np.ones(dim),
            momentum=momentum,
            eps=eps,
        )

    def commit(self, mean: np.ndarray, var: np.ndarray) -> None:
        self.running_mean = self.momentum * self.running_mean + (1.0 - self.momentum) * mean
        self.running_var = self.momentum * self.running_var + (1.0 - self.momentum) * var


def batch_norm(
    x: Node,
    gamma: Node,
    beta: Node,
    state: BatchNormState,
    update_running: bool = False,
) -> Node:
    """Normalize columns of ``x``, then scale by ``gamma`` and shift by ``beta``.

    Train mode normalizes with biased batch statistics; eval mode uses the
    running estimates stored in ``state``.
    """
    dim = x.shape[1] if x.value.ndim == 2 else -1
    if x.value.ndim != 2:
        raise ShapeError(f"batch_norm: operand must be 2-D, got shape {x.shape}")
    if gamma.shape != (dim,) or beta.shape != (dim,):
        raise ShapeError(
            f"batch_norm: scale/shift shapes {gamma.shape}/{beta.shape} do not match feature count {dim}"
        )
    if state.mode not in ("train", "eval"):
        raise ConfigError(f"batch_norm: unknown mode {state.mode!r}")

    if state.mode == "train":
        n = x.shape[0]
        if n < 2:
            raise ShapeError(f"batch_norm: train mode needs at least 2 rows, got shape {x.shape}")
        mean = x.value.mean(axis=0)
        var = x.value.var(axis=0)
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.value - mean) * inv
        if update_running:
            state.commit(mean, var)

        def pull(g):
            _accum(beta, g.sum(axis=0))
            _accum(gamma, (g * xhat).sum(axis=0))
            dxhat = g * gamma.value
            dx = (inv / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            _accum(x, dx)

    else:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.value - state.running_mean) * inv

        def pull(g):
            _accum(beta, g.sum(axis=0))
            _accum(gamma, (g * xhat).sum(axis=0))
            _accum(x, g * gamma.value * inv)

    return x.tape.record(gamma.value * xhat + beta.value, pull, "batch_norm")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(
    loss_fn: Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]],
    params: dict[str, np.ndarray],
    fd_epsilon: float = 1e-5,
) -> float:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` maps a dict of parameter arrays to ``(loss, grads)`` where
    ``grads`` holds one array per parameter key; it must rebuild its graph
    from the arrays on every call.  Parameters are perturbed one coordinate
    at a time (in place, then restored).

    Returns:
        The worst relative error
        ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`` over all coordinates.
    """
    base_loss, grads = loss_fn(params)
    if not np.isfinite(base_loss):
        raise NumericError(f"grad_check: loss is non-finite ({base_loss!r}) at the base point")

    worst = 0.0
    for key, arr in params.items():
        g_ad = grads[key]
        if g_ad is None or np.asarray(g_ad).shape != arr.shape:
            got = None if g_ad is None else np.asarray(g_ad).shape
            raise ShapeError(f"grad_check: gradient for {key!r} has shape {got}, expected {arr.shape}")
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            orig = arr[ix]
            arr[ix] = orig + fd_epsilon
            lo_plus, _ = loss_fn(params)
            arr[ix] = orig - fd_epsilon
            lo_minus, _ = loss_fn(params)
            arr[ix] = orig
            g_fd = (lo_plus - lo_minus) / (2.0 * fd_epsilon)
            ga = float(np.asarray(g_ad)[ix])
            rel = abs(ga - g_fd) / max(1.0, abs(ga), abs(g_fd))
            worst = max(worst, rel)
    return worst
