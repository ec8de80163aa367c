"""Shared test oracles, independent of the code paths they check."""

from __future__ import annotations

import numpy as np

from hostcast.numerics import Matrix


def fd_gradient(f, param: Matrix, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar ``f()`` w.r.t. one matrix.

    Perturbs ``param.data`` in place entry by entry and re-evaluates the
    forward function, so ``f`` must read the live matrix object.
    """
    g = np.zeros(param.shape)
    flat = param.data.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Worst-case relative disagreement, floored to avoid 0/0 on dead entries."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
