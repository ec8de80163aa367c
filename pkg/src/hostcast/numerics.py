"""Dense 2-D linear algebra with reverse-mode differentiation.

Everything the recurrent cells and the trainer compute flows through the
fixed op set in this module: matmul, add (with row-vector bias broadcast),
hadamard, sigmoid, tanh, softmax_rows, scale, concat_rows/cols,
select_rows/cols, take_per_row, log, sum_all and the batch regrouping pair
fold_batch/unfold_batch.

A ``Matrix`` is a double-precision row-major 2-D value. Matrices are treated
as immutable once created; a Matrix that is not attached to a tape is safe to
share across threads. Differentiation is explicit: ops executed inside a
``with Tape() as tape:`` block are recorded when any operand is tracked, and
``backward(tape, loss)`` replays the record once, accumulating gradients
additively into zero-initialized leaf buffers.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ShapeError, UsageError

__all__ = [
    "Matrix",
    "Tape",
    "Gradients",
    "matrix",
    "constant",
    "parameter",
    "zeros",
    "eye",
    "matmul",
    "add",
    "affine",
    "hadamard",
    "sigmoid",
    "tanh",
    "softmax_rows",
    "scale",
    "concat_rows",
    "concat_cols",
    "select_rows",
    "select_cols",
    "take_per_row",
    "log",
    "sum_all",
    "fold_batch",
    "unfold_batch",
    "backward",
    "AdamState",
    "adam_step",
]


class Matrix:
    """A dense rows x cols float64 value, optionally tracked for gradients."""

    __slots__ = ("data", "tracked")

    def __init__(self, data: np.ndarray, tracked: bool = False):
        if data.ndim != 2:
            raise ShapeError(f"Matrix requires a 2-D array, got ndim={data.ndim}")
        self.data = data
        self.tracked = tracked

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __repr__(self) -> str:
        tag = " tracked" if self.tracked else ""
        return f"Matrix({self.rows}x{self.cols}{tag})"

    # Operator sugar over the module-level ops.
    def __matmul__(self, other: "Matrix") -> "Matrix":
        return matmul(self, other)

    def __add__(self, other: "Matrix") -> "Matrix":
        return add(self, other)

    def __mul__(self, other: "Matrix") -> "Matrix":
        return hadamard(self, other)


def matrix(values, tracked: bool = False) -> Matrix:
    """Build a Matrix from nested lists or an array (copied, float64)."""
    arr = np.array(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    return Matrix(arr, tracked=tracked)


def constant(values) -> Matrix:
    return matrix(values, tracked=False)


def parameter(values) -> Matrix:
    return matrix(values, tracked=True)


def zeros(rows: int, cols: int, tracked: bool = False) -> Matrix:
    return Matrix(np.zeros((rows, cols)), tracked=tracked)


def eye(n: int) -> Matrix:
    return Matrix(np.eye(n))


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

_TLS = threading.local()


class Tape:
    """Ordered record of primitive ops for one reverse pass.

    A tape is confined to the thread that opened it. Ops append an entry when
    at least one operand is tracked; ``backward`` walks the record once in
    reverse. Calling backward twice on the same tape is a usage error.
    """

    __slots__ = ("_ops", "_spent")

    def __init__(self):
        self._ops: list[tuple] = []  # (backward_fn, out, args...)
        self._spent = False

    def __enter__(self) -> "Tape":
        stack = getattr(_TLS, "stack", None)
        if stack is None:
            stack = _TLS.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TLS.stack.pop()

    def __len__(self) -> int:
        return len(self._ops)


def _active_tape() -> Tape | None:
    stack = getattr(_TLS, "stack", None)
    return stack[-1] if stack else None


def tape_active() -> bool:
    """True when ops executed now would be recorded."""
    return _active_tape() is not None


def _record(out: Matrix, bwd, *args) -> None:
    tape = _active_tape()
    if tape is not None:
        out.tracked = True
        tape._ops.append((bwd, out, args))


def record_multi(outs: tuple[Matrix, ...], bwd, *args) -> None:
    """Register a custom op with several outputs on the active tape.

    ``bwd`` receives a list of output gradients (None for outputs the loss
    does not reach), then the gradient accumulator dict, then ``args``.
    """
    tape = _active_tape()
    if tape is not None:
        for o in outs:
            o.tracked = True
        tape._ops.append((bwd, outs, args))


def _should_track(*mats: Matrix) -> bool:
    return _active_tape() is not None and any(m.tracked for m in mats)


class Gradients:
    """Gradient of a scalar loss with respect to every tracked node."""

    __slots__ = ("_by_id",)

    def __init__(self, by_id: dict[int, np.ndarray]):
        self._by_id = by_id

    def get(self, m: Matrix) -> np.ndarray:
        """Gradient array for ``m`` (zeros if the loss does not depend on it)."""
        g = self._by_id.get(id(m))
        if g is None:
            return np.zeros(m.shape)
        return g


def backward(tape: Tape, loss: Matrix) -> Gradients:
    """Reverse-replay ``tape`` from scalar ``loss``, once.

    Gradients of leaves are zero-initialized and accumulated additively; each
    recorded op is visited exactly once.
    """
    if tape._spent:
        raise UsageError("backward was already called on this tape")
    tape._spent = True
    if loss.shape != (1, 1):
        raise ShapeError(f"loss must be 1x1, got {loss.rows}x{loss.cols}")
    if not loss.tracked:
        raise UsageError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for bwd, out, args in reversed(tape._ops):
        if type(out) is tuple:
            gs = [grads.pop(id(o), None) for o in out]
            if all(g is None for g in gs):
                continue
            bwd(gs, grads, *args)
        else:
            g = grads.pop(id(out), None)
            if g is None:
                continue  # not on the path from loss
            bwd(g, grads, *args)
    return Gradients(grads)


def _acc(grads: dict[int, np.ndarray], m: Matrix, value: np.ndarray) -> None:
    """Add ``value`` into m's gradient buffer (claiming it when first seen)."""
    if not m.tracked:
        return
    buf = grads.get(id(m))
    if buf is None:
        grads[id(m)] = value if value.flags.owndata else value.copy()
    else:
        np.add(buf, value, out=buf)


def _acc_zeros(grads: dict[int, np.ndarray], m: Matrix) -> np.ndarray | None:
    """Fetch-or-create m's zero-initialized gradient buffer for in-place adds."""
    if not m.tracked:
        return None
    buf = grads.get(id(m))
    if buf is None:
        buf = grads[id(m)] = np.zeros(m.shape)
    return buf


# --------------------------------------------------------------------------
# Primitive ops
# --------------------------------------------------------------------------


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Standard matrix product a @ b."""
    if a.cols != b.rows:
        raise ShapeError(
            f"matmul shape mismatch: {a.rows}x{a.cols} @ {b.rows}x{b.cols}"
        )
    out = Matrix(a.data @ b.data)
    if _should_track(a, b):
        _record(out, _matmul_bwd, a, b)
    return out


def _matmul_bwd(g, grads, a: Matrix, b: Matrix):
    if a.tracked:
        _acc(grads, a, g @ b.data.T)
    if b.tracked:
        _acc(grads, b, a.data.T @ g)


def add(a: Matrix, b: Matrix) -> Matrix:
    """Elementwise sum; ``b`` may be a 1 x a.cols row vector (bias broadcast)."""
    bias = b.rows == 1 and a.rows != 1
    if not bias and a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.rows}x{a.cols} + {b.rows}x{b.cols}")
    if bias and b.cols != a.cols:
        raise ShapeError(f"bias add mismatch: {a.rows}x{a.cols} + {b.rows}x{b.cols}")
    out = Matrix(a.data + b.data)
    if _should_track(a, b):
        _record(out, _add_bwd, a, b, bias)
    return out


def _add_bwd(g, grads, a: Matrix, b: Matrix, bias: bool):
    if a.tracked:
        _acc(grads, a, g)
    if b.tracked:
        _acc(grads, b, g.sum(axis=0, keepdims=True) if bias else g)


def affine(a: Matrix, w: Matrix, b: Matrix) -> Matrix:
    """Fused a @ w + b with ``b`` a 1 x cols bias row (one output buffer)."""
    if a.cols != w.rows:
        raise ShapeError(
            f"affine shape mismatch: {a.rows}x{a.cols} @ {w.rows}x{w.cols}"
        )
    if b.shape != (1, w.cols):
        raise ShapeError(f"affine bias must be 1x{w.cols}, got {b.rows}x{b.cols}")
    out_data = a.data @ w.data
    out_data += b.data
    out = Matrix(out_data)
    if _should_track(a, w, b):
        _record(out, _affine_bwd, a, w, b)
    return out


def _affine_bwd(g, grads, a: Matrix, w: Matrix, b: Matrix):
    if a.tracked:
        _acc(grads, a, g @ w.data.T)
    if w.tracked:
        _acc(grads, w, a.data.T @ g)
    if b.tracked:
        _acc(grads, b, g.sum(axis=0, keepdims=True))


def hadamard(a: Matrix, b: Matrix) -> Matrix:
    """Elementwise product of identically shaped matrices."""
    if a.shape != b.shape:
        raise ShapeError(
            f"hadamard shape mismatch: {a.rows}x{a.cols} vs {b.rows}x{b.cols}"
        )
    out = Matrix(a.data * b.data)
    if _should_track(a, b):
        _record(out, _hadamard_bwd, a, b)
    return out


def _hadamard_bwd(g, grads, a: Matrix, b: Matrix):
    if a.tracked:
        _acc(grads, a, g * b.data)
    if b.tracked:
        _acc(grads, b, g * a.data)


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    """Overflow-safe logistic of a raw array.

    Clamping the argument at -709 keeps exp(-x) below the float64 overflow
    threshold; beyond that point the true value is already subnormal.
    """
    t = np.maximum(x, -709.0)
    np.negative(t, out=t)
    np.exp(t, out=t)
    t += 1.0
    np.reciprocal(t, out=t)
    return t


def sigmoid(a: Matrix) -> Matrix:
    """Elementwise logistic function, overflow-safe for large |x|."""
    out = Matrix(sigmoid_array(a.data))
    if _should_track(a):
        _record(out, _sigmoid_bwd, a, out.data)
    return out


def _sigmoid_bwd(g, grads, a: Matrix, y: np.ndarray):
    _acc(grads, a, g * (y * (1.0 - y)))


def tanh(a: Matrix) -> Matrix:
    out = Matrix(np.tanh(a.data))
    if _should_track(a):
        _record(out, _tanh_bwd, a, out.data)
    return out


def _tanh_bwd(g, grads, a: Matrix, y: np.ndarray):
    _acc(grads, a, g * (1.0 - y * y))


def softmax_rows(a: Matrix) -> Matrix:
    """Row-wise softmax with max-subtraction for stability."""
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = Matrix(e / e.sum(axis=1, keepdims=True))
    if _should_track(a):
        _record(out, _softmax_bwd, a, out.data)
    return out


def _softmax_bwd(g, grads, a: Matrix, y: np.ndarray):
    gy = g * y
    _acc(grads, a, gy - y * gy.sum(axis=1, keepdims=True))


def scale(a: Matrix, s: float) -> Matrix:
    """Multiply every entry by the scalar ``s``."""
    out = Matrix(a.data * s)
    if _should_track(a):
        _record(out, _scale_bwd, a, s)
    return out


def _scale_bwd(g, grads, a: Matrix, s: float):
    _acc(grads, a, g * s)


def concat_rows(mats: list[Matrix]) -> Matrix:
    """Stack matrices vertically (shared column count)."""
    cols = mats[0].cols
    for m in mats:
        if m.cols != cols:
            raise ShapeError("concat_rows requires a common column count")
    out = Matrix(np.concatenate([m.data for m in mats], axis=0))
    if _should_track(*mats):
        _record(out, _concat_rows_bwd, tuple(mats))
    return out


def _concat_rows_bwd(g, grads, mats):
    r = 0
    for m in mats:
        _acc(grads, m, g[r : r + m.rows])
        r += m.rows


def concat_cols(mats: list[Matrix]) -> Matrix:
    """Stack matrices horizontally (shared row count)."""
    rows = mats[0].rows
    for m in mats:
        if m.rows != rows:
            raise ShapeError("concat_cols requires a common row count")
    out = Matrix(np.concatenate([m.data for m in mats], axis=1))
    if _should_track(*mats):
        _record(out, _concat_cols_bwd, tuple(mats))
    return out


def _concat_cols_bwd(g, grads, mats):
    c = 0
    for m in mats:
        _acc(grads, m, g[:, c : c + m.cols])
        c += m.cols


def select_rows(a: Matrix, start: int, stop: int) -> Matrix:
    """Copy of the row slice [start, stop)."""
    if not (0 <= start <= stop <= a.rows):
        raise ShapeError(f"row slice [{start}, {stop}) out of range for {a.rows} rows")
    out = Matrix(a.data[start:stop].copy())
    if _should_track(a):
        _record(out, _select_rows_bwd, a, start, stop)
    return out


def _select_rows_bwd(g, grads, a: Matrix, start: int, stop: int):
    buf = _acc_zeros(grads, a)
    if buf is not None:
        buf[start:stop] += g


def select_cols(a: Matrix, start: int, stop: int) -> Matrix:
    """Copy of the column slice [start, stop)."""
    if not (0 <= start <= stop <= a.cols):
        raise ShapeError(f"col slice [{start}, {stop}) out of range for {a.cols} cols")
    out = Matrix(a.data[:, start:stop].copy())
    if _should_track(a):
        _record(out, _select_cols_bwd, a, start, stop)
    return out


def _select_cols_bwd(g, grads, a: Matrix, start: int, stop: int):
    buf = _acc_zeros(grads, a)
    if buf is not None:
        buf[:, start:stop] += g


def take_per_row(a: Matrix, cols: np.ndarray) -> Matrix:
    """Column ``cols[i]`` of row i, as an n x 1 matrix (used by cross-entropy)."""
    idx = np.asarray(cols, dtype=np.intp)
    if idx.shape != (a.rows,):
        raise ShapeError(f"need one column index per row, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.cols):
        raise ShapeError("column index out of range in take_per_row")
    out = Matrix(a.data[np.arange(a.rows), idx].reshape(-1, 1))
    if _should_track(a):
        _record(out, _take_per_row_bwd, a, idx)
    return out


def _take_per_row_bwd(g, grads, a: Matrix, idx: np.ndarray):
    buf = _acc_zeros(grads, a)
    if buf is not None:
        buf[np.arange(a.rows), idx] += g[:, 0]


def log(a: Matrix, floor: float = 0.0) -> Matrix:
    """Elementwise natural log of max(a, floor); entries at the floor get zero gradient."""
    x = np.maximum(a.data, floor) if floor > 0.0 else a.data
    out = Matrix(np.log(x))
    if _should_track(a):
        _record(out, _log_bwd, a, floor)
    return out


def _log_bwd(g, grads, a: Matrix, floor: float):
    x = a.data
    d = np.where(x > floor, g / np.maximum(x, floor), 0.0) if floor > 0.0 else g / x
    _acc(grads, a, d)


def sum_all(a: Matrix) -> Matrix:
    """Sum of all entries as a 1x1 matrix."""
    out = Matrix(np.array([[a.data.sum()]]))
    if _should_track(a):
        _record(out, _sum_all_bwd, a)
    return out


def _sum_all_bwd(g, grads, a: Matrix):
    _acc(grads, a, np.full(a.shape, g[0, 0]))


def fold_batch(a: Matrix, batch: int) -> Matrix:
    """Regroup a row-stacked batch (batch*n) x d into n x (batch*d).

    Row-stacked layout holds batch item b in rows [b*n, (b+1)*n); the folded
    layout holds it in columns [b*d, (b+1)*d), so an n x n operator can act on
    every item with a single product.
    """
    bn, d = a.shape
    if batch < 1 or bn % batch:
        raise ShapeError(f"cannot fold {bn} rows into batch={batch}")
    n = bn // batch
    out = Matrix(
        np.ascontiguousarray(
            a.data.reshape(batch, n, d).transpose(1, 0, 2).reshape(n, batch * d)
        )
    )
    if _should_track(a):
        _record(out, _fold_batch_bwd, a, batch)
    return out


def _fold_batch_bwd(g, grads, a: Matrix, batch: int):
    bn, d = a.shape
    n = bn // batch
    _acc(grads, a, np.ascontiguousarray(
        g.reshape(n, batch, d).transpose(1, 0, 2).reshape(bn, d)
    ))


def unfold_batch(a: Matrix, batch: int) -> Matrix:
    """Inverse of fold_batch: n x (batch*d) back to (batch*n) x d."""
    n, bd = a.shape
    if batch < 1 or bd % batch:
        raise ShapeError(f"cannot unfold {bd} cols into batch={batch}")
    d = bd // batch
    out = Matrix(
        np.ascontiguousarray(
            a.data.reshape(n, batch, d).transpose(1, 0, 2).reshape(batch * n, d)
        )
    )
    if _should_track(a):
        _record(out, _unfold_batch_bwd, a, batch)
    return out


def _unfold_batch_bwd(g, grads, a: Matrix, batch: int):
    n, bd = a.shape
    d = bd // batch
    _acc(grads, a, np.ascontiguousarray(
        g.reshape(batch, n, d).transpose(1, 0, 2).reshape(n, bd)
    ))


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    """First/second moment buffers, keyed like the tensors they track."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    tensors: dict[str, Matrix],
    grads: dict[str, np.ndarray],
    state: AdamState,
    *,
    lr: float,
    weight_decay: float,
    t: int,
) -> dict[str, Matrix]:
    """One Adam update with bias correction and additive L2 weight decay.

    Returns fresh Matrix values; ``state`` is updated in place. A non-finite
    gradient aborts with a diagnostic naming the offending tensor.
    """
    if t < 1:
        raise UsageError(f"adam_step requires t >= 1, got {t}")
    updated: dict[str, Matrix] = {}
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for name, value in tensors.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for tensor '{name}'")
        if weight_decay:
            g = g + weight_decay * value.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(value.shape)
            state.v[name] = np.zeros(value.shape)
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        step = (lr / bc1) * m / (np.sqrt(v / bc2) + ADAM_EPS)
        updated[name] = Matrix(value.data - step, tracked=True)
    return updated


def finite(a: Matrix) -> bool:
    """True when every entry is finite."""
    return bool(np.all(np.isfinite(a.data)))


# Accumulation hooks for custom ops defined outside this module.
accumulate = _acc
grad_buffer = _acc_zeros
