"""Recurrent cell variants and the per-node classification readout.

Three gated recurrent cells share one engine and differ only in the linear
operator applied to the input and hidden signals before the gate weights:

* ``lstm``     - identity (each host transformed independently),
* ``step``     - Chebyshev polynomials of the scaled graph Laplacian, so
                 every gate mixes information from hosts up to K-1 hops away,
* ``convlstm`` - 2-D shift operators realizing a same-padded square
                 convolution over hosts arranged row-major on a grid.

The cell recurrence is the standard input/forget/output gating with a tanh
candidate; there are no peephole (cell-to-gate) connections. The single-step
functions compose tape primitives; ``forward_sequence`` additionally has a
fused unrolled path (one tape op per step with a hand-derived backward) that
computes the same quantities with far less interpreter and allocation
overhead. Both paths are cross-checked in the test suite.
"""

from __future__ import annotations

import functools
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericalError, ShapeError, UsageError
from . import numerics as nm
from .graph import HostGraph
from .numerics import Matrix

__all__ = [
    "GATES",
    "VARIANTS",
    "ModelParams",
    "CellState",
    "init_params",
    "zero_state",
    "grid_basis",
    "lstm_step",
    "step_cell_step",
    "convlstm_step",
    "readout",
    "forward_sequence",
    "save_checkpoint",
    "load_checkpoint",
]

GATES = ("i", "f", "c", "o")
# concatenation order of the fused gate blocks: the three sigmoid gates
# first (one contiguous activation), the tanh candidate last
GATE_LAYOUT = ("i", "f", "o", "c")
VARIANTS = ("step", "lstm", "convlstm")

CHECKPOINT_MAGIC = b"HCKPT001"


@dataclass
class ModelParams:
    """Learnable tensors of one model variant plus its readout head.

    ``tensors`` maps stable names (``w_xi_0``, ``w_hf_1``, ``b_c``, ``w_out``,
    ...) to tracked matrices; iteration order is the construction order and is
    part of the checkpoint format.
    """

    variant: str
    d_x: int
    d_h: int
    d: int
    K: int
    kernel_size: int
    seed: int
    tensors: dict[str, Matrix]

    @property
    def stack_size(self) -> int:
        """Number of per-gate weight slices (basis terms) for this variant."""
        if self.variant == "step":
            return self.K
        if self.variant == "convlstm":
            return self.kernel_size * self.kernel_size
        return 1

    def finite(self) -> bool:
        return all(nm.finite(t) for t in self.tensors.values())


@dataclass(frozen=True)
class CellState:
    """Hidden and cell state, one row per host."""

    h: Matrix
    c: Matrix


def zero_state(n: int, d_h: int) -> CellState:
    return CellState(h=nm.zeros(n, d_h), c=nm.zeros(n, d_h))


def init_params(
    variant: str,
    d_x: int,
    d_h: int,
    d: int,
    K: int = 2,
    seed: int = 0,
    kernel_size: int = 3,
) -> ModelParams:
    """Glorot-uniform weights, zero biases except a unit forget-gate bias.

    Deterministic for a given seed: tensors are drawn in a fixed name order.
    Each weight tensor uses the bound sqrt(6 / (rows + cols)).
    """
    if variant not in VARIANTS:
        raise InputError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if min(d_x, d_h, d) < 1:
        raise InputError("d_x, d_h and d must all be >= 1")
    if variant == "step" and K < 1:
        raise InputError(f"Chebyshev order must be >= 1, got {K}")
    if variant == "convlstm" and (kernel_size < 1 or kernel_size % 2 == 0):
        raise InputError(f"kernel size must be odd and >= 1, got {kernel_size}")

    rng = np.random.default_rng(seed)
    params = ModelParams(
        variant=variant,
        d_x=d_x,
        d_h=d_h,
        d=d,
        K=K if variant == "step" else 1,
        kernel_size=kernel_size if variant == "convlstm" else 1,
        seed=seed,
        tensors={},
    )

    def glorot(rows: int, cols: int) -> Matrix:
        bound = math.sqrt(6.0 / (rows + cols))
        return Matrix(rng.uniform(-bound, bound, size=(rows, cols)), tracked=True)

    stack = params.stack_size
    for gate in GATES:
        for k in range(stack):
            params.tensors[f"w_x{gate}_{k}"] = glorot(d_x, d_h)
        for k in range(stack):
            params.tensors[f"w_h{gate}_{k}"] = glorot(d_h, d_h)
        bias = np.ones((1, d_h)) if gate == "f" else np.zeros((1, d_h))
        params.tensors[f"b_{gate}"] = Matrix(bias, tracked=True)
    params.tensors["w_out"] = glorot(d_h, d)
    params.tensors["b_out"] = Matrix(np.zeros((1, d)), tracked=True)
    return params


# --------------------------------------------------------------------------
# Per-variant basis operators
# --------------------------------------------------------------------------


@functools.lru_cache(maxsize=32)
def grid_basis(n: int, kernel_size: int) -> tuple[Matrix, ...]:
    """Shift operators realizing a same-padded kernel_size^2 convolution.

    Hosts fill the first n cells of the smallest square grid row-major; the
    remaining cells are permanent zero padding. Entry (p, q) of tap (di, dj)
    is 1 when host q sits at offset (di, dj) from host p on that grid.
    """
    side = math.isqrt(n)
    if side * side < n:
        side += 1
    r = kernel_size // 2
    taps = []
    for di in range(-r, r + 1):
        for dj in range(-r, r + 1):
            b = np.zeros((n, n))
            for p in range(n):
                pi, pj = divmod(p, side)
                qi, qj = pi + di, pj + dj
                if 0 <= qi < side and 0 <= qj < side:
                    q = qi * side + qj
                    if q < n:
                        b[p, q] = 1.0
            taps.append(Matrix(b))
    return tuple(taps)


def _identity_basis(n: int) -> tuple[Matrix, ...]:
    return (nm.eye(n),)


def _resolve_basis(params: ModelParams, graph: HostGraph | None, n: int):
    """Basis operators for this variant plus whether basis[0] is the identity."""
    if params.variant == "lstm":
        return _identity_basis(n), True
    if params.variant == "convlstm":
        return grid_basis(n, params.kernel_size), params.kernel_size == 1
    if graph is None:
        raise UsageError("the step variant requires a host graph")
    if graph.order != params.K:
        raise ShapeError(
            f"graph basis has order {graph.order} but params expect K={params.K}"
        )
    if graph.n != n:
        raise ShapeError(f"graph has {graph.n} nodes but input has {n} rows")
    return graph.cheb_basis, True


# --------------------------------------------------------------------------
# Gated step from tape primitives
# --------------------------------------------------------------------------


def _fused_gate_weights(params: ModelParams) -> tuple[Matrix, Matrix, Matrix]:
    """Per-gate weight stacks concatenated into (stack*d_in) x (4*d_h) blocks."""
    stack = params.stack_size
    t = params.tensors

    def side(prefix: str) -> Matrix:
        blocks = []
        for gate in GATE_LAYOUT:
            names = [f"{prefix}{gate}_{k}" for k in range(stack)]
            stacked = t[names[0]] if stack == 1 else nm.concat_rows([t[n] for n in names])
            blocks.append(stacked)
        return nm.concat_cols(blocks)

    bias = nm.concat_cols([t[f"b_{gate}"] for gate in GATE_LAYOUT])
    return side("w_x"), side("w_h"), bias


def _stacked_signal(
    basis: tuple[Matrix, ...], z: Matrix, batch: int, first_identity: bool
) -> Matrix:
    """[B_0 z | B_1 z | ...] with the batch regrouped so each operator is one product."""
    if len(basis) == 1 and first_identity:
        return z
    parts: list[Matrix] = []
    folded = nm.fold_batch(z, batch) if batch > 1 else z
    for k, b_k in enumerate(basis):
        if k == 0 and first_identity:
            parts.append(z)
        elif batch > 1:
            parts.append(nm.unfold_batch(nm.matmul(b_k, folded), batch))
        else:
            parts.append(nm.matmul(b_k, z))
    return nm.concat_cols(parts)


def _gate_block(pre: Matrix, d_h: int) -> tuple[Matrix, Matrix, Matrix, Matrix]:
    """Slice the fused preactivation into (i, f, candidate, o) activations."""
    i = nm.sigmoid(nm.select_cols(pre, 0, d_h))
    f = nm.sigmoid(nm.select_cols(pre, d_h, 2 * d_h))
    o = nm.sigmoid(nm.select_cols(pre, 2 * d_h, 3 * d_h))
    g = nm.tanh(nm.select_cols(pre, 3 * d_h, 4 * d_h))
    return i, f, g, o


def _gated_step(
    basis: tuple[Matrix, ...],
    first_identity: bool,
    params: ModelParams,
    fused: tuple[Matrix, Matrix, Matrix],
    x_t: Matrix,
    state: CellState,
    batch: int = 1,
) -> CellState:
    w_x, w_h, bias = fused
    zx = _stacked_signal(basis, x_t, batch, first_identity)
    zh = _stacked_signal(basis, state.h, batch, first_identity)
    pre = nm.add(nm.add(nm.matmul(zx, w_x), nm.matmul(zh, w_h)), bias)
    i, f, g, o = _gate_block(pre, params.d_h)
    c = nm.add(nm.hadamard(f, state.c), nm.hadamard(i, g))
    h = nm.hadamard(o, nm.tanh(c))
    return CellState(h=h, c=c)


def _check_step_shapes(params: ModelParams, x_t: Matrix, state: CellState) -> None:
    if x_t.cols != params.d_x:
        raise ShapeError(f"input has {x_t.cols} features, params expect {params.d_x}")
    if state.h.shape != (x_t.rows, params.d_h) or state.c.shape != (x_t.rows, params.d_h):
        raise ShapeError(
            f"state shape {state.h.rows}x{state.h.cols} does not match "
            f"{x_t.rows}x{params.d_h}"
        )


def lstm_step(params: ModelParams, x_t: Matrix, state: CellState) -> CellState:
    """One plain LSTM step; weights are shared across hosts (rows)."""
    if params.variant != "lstm":
        raise UsageError(f"lstm_step called on variant {params.variant!r}")
    _check_step_shapes(params, x_t, state)
    basis, fi = _resolve_basis(params, None, x_t.rows)
    return _gated_step(basis, fi, params, _fused_gate_weights(params), x_t, state)


def step_cell_step(
    params: ModelParams, graph: HostGraph, x_t: Matrix, state: CellState
) -> CellState:
    """One graph-convolutional LSTM step over the host graph."""
    if params.variant != "step":
        raise UsageError(f"step_cell_step called on variant {params.variant!r}")
    _check_step_shapes(params, x_t, state)
    basis, fi = _resolve_basis(params, graph, x_t.rows)
    return _gated_step(basis, fi, params, _fused_gate_weights(params), x_t, state)


def convlstm_step(params: ModelParams, x_t: Matrix, state: CellState) -> CellState:
    """One ConvLSTM step over hosts arranged row-major on a square grid."""
    if params.variant != "convlstm":
        raise UsageError(f"convlstm_step called on variant {params.variant!r}")
    _check_step_shapes(params, x_t, state)
    basis, fi = _resolve_basis(params, None, x_t.rows)
    return _gated_step(basis, fi, params, _fused_gate_weights(params), x_t, state)


def readout(params: ModelParams, h: Matrix) -> Matrix:
    """Per-host class distribution: row softmax of a linear map of the state."""
    logits = nm.affine(h, params.tensors["w_out"], params.tensors["b_out"])
    return nm.softmax_rows(logits)


# --------------------------------------------------------------------------
# Fused unrolled forward
# --------------------------------------------------------------------------


def _fold_raw(a: np.ndarray, batch: int) -> np.ndarray:
    bn, d = a.shape
    n = bn // batch
    return np.ascontiguousarray(
        a.reshape(batch, n, d).transpose(1, 0, 2).reshape(n, batch * d)
    )


def _unfold_raw(a: np.ndarray, batch: int) -> np.ndarray:
    n, bd = a.shape
    d = bd // batch
    return np.ascontiguousarray(
        a.reshape(n, batch, d).transpose(1, 0, 2).reshape(batch * n, d)
    )


def _basis_stack_raw(
    basis: tuple[Matrix, ...], first_identity: bool, z: np.ndarray, batch: int
) -> np.ndarray:
    """Raw-array version of _stacked_signal (no tape)."""
    if len(basis) == 1 and first_identity:
        return z
    rows, d = z.shape
    out = np.empty((rows, len(basis) * d))
    folded = _fold_raw(z, batch) if batch > 1 else z
    for k, b_k in enumerate(basis):
        block = out[:, k * d : (k + 1) * d]
        if k == 0 and first_identity:
            block[:] = z
        elif batch > 1:
            block[:] = _unfold_raw(b_k.data @ folded, batch)
        else:
            np.matmul(b_k.data, z, out=block)
    return out


def _basis_stack_bwd_raw(
    basis: tuple[Matrix, ...], first_identity: bool, dz: np.ndarray, batch: int, d: int
) -> np.ndarray:
    """Transpose of _basis_stack_raw: fold gradient blocks back onto the signal."""
    if len(basis) == 1 and first_identity:
        return dz
    acc: np.ndarray | None = None
    for k, b_k in enumerate(basis):
        block = dz[:, k * d : (k + 1) * d]
        if k == 0 and first_identity:
            contrib = block
        elif batch > 1:
            contrib = _unfold_raw(b_k.data.T @ _fold_raw(block, batch), batch)
        else:
            contrib = b_k.data.T @ block
        if acc is None:
            acc = contrib.copy() if contrib is block else contrib
        else:
            acc += contrib
    return acc


def _recurrent_step(
    gx_all: Matrix,
    r0: int,
    r1: int,
    basis: tuple[Matrix, ...],
    first_identity: bool,
    w_h: Matrix,
    state: CellState | None,
    batch: int,
    d_h: int,
) -> CellState:
    """One unrolled cell step as a single tape op (hand-derived backward).

    ``gx_all`` rows [r0, r1) hold this step's four input-path gate
    preactivations (input signal times gate weights plus bias, gate blocks
    side by side). ``state`` is None on the first step, where the hidden
    path and the forget term vanish exactly.
    """
    gx = gx_all.data[r0:r1]
    if state is None:
        zh = None
        pre = None
        src = gx
    else:
        zh = _basis_stack_raw(basis, first_identity, state.h.data, batch)
        pre = zh @ w_h.data
        pre += gx
        src = pre
    i = nm.sigmoid_array(src[:, :d_h])
    f = nm.sigmoid_array(src[:, d_h : 2 * d_h])
    o = nm.sigmoid_array(src[:, 2 * d_h : 3 * d_h])
    g = np.tanh(src[:, 3 * d_h :])
    if state is None:
        c = i * g
    else:
        c = f * state.c.data
        c += i * g
    tc = np.tanh(c)
    out = CellState(h=Matrix(o * tc), c=Matrix(c))
    tracked = gx_all.tracked or w_h.tracked or (
        state is not None and (state.h.tracked or state.c.tracked)
    )
    if tracked and nm.tape_active():
        # pre's values are dead after activation; its buffer is recycled as
        # the gradient workspace in the backward pass
        nm.record_multi(
            (out.h, out.c),
            _recurrent_step_bwd,
            gx_all,
            r0,
            r1,
            basis,
            first_identity,
            w_h,
            state,
            batch,
            d_h,
            zh,
            pre,
            (i, f, o, g),
            tc,
        )
    return out


def _recurrent_step_bwd(
    gs, grads, gx_all, r0, r1, basis, first_identity, w_h, state, batch, d_h, zh, pre, acts, tc
):
    i, f, o, g = acts
    gh, gc = gs
    if gh is not None:
        dc = gh * o
        dc *= 1.0 - tc * tc
        if gc is not None:
            dc += gc
    else:
        dc = gc  # owned accumulation buffer, safe to consume

    # per-gate preactivation gradients (upstream term times activation slope)
    # assembled side by side, reusing the dead forward buffer when available
    dpre = pre if pre is not None else np.empty((r1 - r0, 4 * d_h))
    bi = dpre[:, :d_h]
    np.multiply(dc, g, out=bi)
    bi *= i
    bi *= 1.0 - i
    bf = dpre[:, d_h : 2 * d_h]
    if state is not None:
        np.multiply(dc, state.c.data, out=bf)
        bf *= f
        bf *= 1.0 - f
    else:
        bf[:] = 0.0
    bo = dpre[:, 2 * d_h : 3 * d_h]
    if gh is not None:
        np.multiply(gh, tc, out=bo)
        bo *= o
        bo *= 1.0 - o
    else:
        bo[:] = 0.0
    bg = dpre[:, 3 * d_h :]
    np.multiply(dc, i, out=bg)
    bg *= 1.0 - g * g

    if gx_all.tracked:
        buf = nm.grad_buffer(grads, gx_all)
        buf[r0:r1] += dpre
    if state is not None:
        if w_h.tracked:
            nm.accumulate(grads, w_h, zh.T @ dpre)
        if state.h.tracked:
            dzh = dpre @ w_h.data.T
            nm.accumulate(
                grads,
                state.h,
                _basis_stack_bwd_raw(basis, first_identity, dzh, batch, d_h),
            )
        if state.c.tracked:
            nm.accumulate(grads, state.c, dc * f)


# above this many stacked rows the whole-window input preactivation is
# built per step instead, capping transient memory at large host counts
_INPUT_STACK_ROW_CAP = 32768


def _forward_fused(
    params: ModelParams,
    basis: tuple[Matrix, ...],
    first_identity: bool,
    frames: list[Matrix],
    batch: int,
) -> Matrix:
    w_x, w_h, bias = _fused_gate_weights(params)
    rows = frames[0].rows
    if len(frames) > 1 and len(frames) * rows <= _INPUT_STACK_ROW_CAP:
        zx = np.vstack(
            [_basis_stack_raw(basis, first_identity, x.data, batch) for x in frames]
        )
        gx_all = nm.affine(Matrix(zx), w_x, bias)
        gx_steps = None
    else:
        gx_steps = [
            nm.affine(Matrix(_basis_stack_raw(basis, first_identity, x.data, batch)), w_x, bias)
            for x in frames
        ]
        gx_all = None
    state: CellState | None = None
    for t in range(len(frames)):
        if gx_steps is None:
            state = _recurrent_step(
                gx_all, t * rows, (t + 1) * rows, basis, first_identity, w_h,
                state, batch, params.d_h,
            )
        else:
            state = _recurrent_step(
                gx_steps[t], 0, rows, basis, first_identity, w_h,
                state, batch, params.d_h,
            )
    return readout(params, state.h)


def _forward_composed(
    params: ModelParams,
    basis: tuple[Matrix, ...],
    first_identity: bool,
    frames: list[Matrix],
    batch: int,
) -> Matrix:
    fused = _fused_gate_weights(params)
    w_x, w_h, bias = fused
    d_h = params.d_h
    state: CellState | None = None
    for x_t in frames:
        gx = nm.add(nm.matmul(_stacked_signal(basis, x_t, batch, first_identity), w_x), bias)
        if state is None:
            i, f, g, o = _gate_block(gx, d_h)
            c = nm.hadamard(i, g)
        else:
            zh = _stacked_signal(basis, state.h, batch, first_identity)
            pre = nm.add(gx, nm.matmul(zh, w_h))
            i, f, g, o = _gate_block(pre, d_h)
            c = nm.add(nm.hadamard(f, state.c), nm.hadamard(i, g))
        h = nm.hadamard(o, nm.tanh(c))
        state = CellState(h=h, c=c)
    return readout(params, state.h)


def forward_sequence(
    params: ModelParams,
    graph: HostGraph | None,
    frames: list[Matrix],
    batch: int = 1,
) -> Matrix:
    """Run the variant's cell over a window and read out the final state.

    ``frames`` is the window's input sequence (each frame n x d_x, or
    (batch*n) x d_x for row-stacked batches); the initial state is zero.
    Returns per-host class probabilities.
    """
    if not frames:
        raise InputError("forward_sequence requires a non-empty window")
    rows = frames[0].rows
    if batch < 1 or rows % batch:
        raise ShapeError(f"cannot split {rows} rows into batch={batch}")
    for x_t in frames:
        if x_t.cols != params.d_x or x_t.rows != rows:
            raise ShapeError(
                f"frame of {x_t.rows}x{x_t.cols} does not match "
                f"{rows}x{params.d_x}"
            )
    basis, fi = _resolve_basis(params, graph, rows // batch)
    if any(x_t.tracked for x_t in frames):
        return _forward_composed(params, basis, fi, frames, batch)
    return _forward_fused(params, basis, fi, frames, batch)


# --------------------------------------------------------------------------
# Checkpoint container
# --------------------------------------------------------------------------
#
# Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON header
# {"meta": {...}, "tensors": [{"name", "rows", "cols"}, ...]}, then the raw
# row-major little-endian float64 payload of each tensor in listed order.


def save_checkpoint(path, params: ModelParams, vocabulary: list[int]) -> None:
    header = {
        "meta": {
            "variant": params.variant,
            "d_x": params.d_x,
            "d_h": params.d_h,
            "d": params.d,
            "K": params.K,
            "kernel_size": params.kernel_size,
            "seed": params.seed,
            "vocabulary": list(vocabulary),
        },
        "tensors": [
            {"name": name, "rows": t.rows, "cols": t.cols}
            for name, t in params.tensors.items()
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for t in params.tensors.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, list[int]]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise InputError(f"{path}: not a model checkpoint (bad magic)")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        meta = header["meta"]
        tensors: dict[str, Matrix] = {}
        for entry in header["tensors"]:
            count = entry["rows"] * entry["cols"]
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise InputError(f"{path}: truncated tensor {entry['name']!r}")
            arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(
                entry["rows"], entry["cols"]
            )
            tensors[entry["name"]] = Matrix(arr, tracked=True)
    params = ModelParams(
        variant=meta["variant"],
        d_x=meta["d_x"],
        d_h=meta["d_h"],
        d=meta["d"],
        K=meta["K"],
        kernel_size=meta["kernel_size"],
        seed=meta["seed"],
        tensors=tensors,
    )
    if not params.finite():
        raise NumericalError(f"{path}: checkpoint contains non-finite values")
    return params, list(meta["vocabulary"])
