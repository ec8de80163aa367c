"""Host graph construction and spectral-polynomial graph convolution.

The graph over hosts is undirected and unweighted: an edge records that two
hosts interacted at least once. Filtering a node signal by a degree-K
polynomial of the scaled Laplacian aggregates, for every host, information
from hosts up to K-1 hops away (order K uses basis terms T_0 .. T_{K-1};
despite the common "K steps" intuition, the truncation at K terms reaches
exactly K-1 hops).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .errors import InputError, ShapeError
from . import numerics as nm
from .numerics import Matrix

__all__ = [
    "HostGraph",
    "build_host_graph",
    "graph_from_adjacency",
    "with_order",
    "lambda_max",
    "graph_conv",
    "spectral_conv_oracle",
    "load_edge_csv",
]

DENSE_EIG_CUTOFF = 512
ORACLE_SIZE_CAP = 64


@dataclass(frozen=True)
class HostGraph:
    """Immutable host graph with its spectral machinery precomputed.

    ``cheb_basis`` holds [T_0(scaled_L) .. T_{order-1}(scaled_L)]; T_0 is the
    identity and T_1 the scaled Laplacian itself.
    """

    node_ids: tuple[str, ...]
    adjacency: Matrix
    laplacian: Matrix
    lambda_max: float
    scaled_laplacian: Matrix
    cheb_basis: tuple[Matrix, ...]

    @property
    def n(self) -> int:
        return len(self.node_ids)

    @property
    def order(self) -> int:
        return len(self.cheb_basis)

    def index_of(self, host: str) -> int:
        return self.node_ids.index(host)


def build_host_graph(
    edges: list[tuple[str, str]], node_ids: list[str], K: int
) -> HostGraph:
    """Build the graph for ``node_ids`` (in this order) from host-id pairs.

    Self-loops in the edge list are ignored. Unknown endpoints and duplicate
    node ids are fatal.
    """
    if K < 1:
        raise InputError(f"Chebyshev order must be >= 1, got {K}")
    ids = tuple(str(h) for h in node_ids)
    if len(set(ids)) != len(ids):
        seen, dup = set(), None
        for h in ids:
            if h in seen:
                dup = h
                break
            seen.add(h)
        raise InputError(f"duplicate node id: {dup!r}")
    index = {h: i for i, h in enumerate(ids)}
    n = len(ids)
    adj = np.zeros((n, n))
    for src, dst in edges:
        for end in (src, dst):
            if end not in index:
                raise InputError(f"edge references unknown host: {end!r}")
        if src == dst:
            continue
        i, j = index[src], index[dst]
        adj[i, j] = 1.0
        adj[j, i] = 1.0
    return graph_from_adjacency(ids, adj, K)


def graph_from_adjacency(node_ids: tuple[str, ...], adj: np.ndarray, K: int) -> HostGraph:
    """Assemble a HostGraph from a validated binary symmetric adjacency."""
    n = adj.shape[0]
    degrees = adj.sum(axis=1)
    # degree-0 hosts contribute zero rows/cols to the normalized product
    with np.errstate(divide="ignore"):
        d_inv_sqrt = np.where(degrees > 0, 1.0 / np.sqrt(np.maximum(degrees, 1e-300)), 0.0)
    lap = np.eye(n) - (d_inv_sqrt[:, None] * adj) * d_inv_sqrt[None, :]
    lap = (lap + lap.T) / 2.0  # exact symmetry against rounding
    lmax = lambda_max(Matrix(lap))
    scaled = (2.0 / lmax) * lap - np.eye(n)
    basis = _cheb_basis(scaled, K)
    return HostGraph(
        node_ids=node_ids,
        adjacency=Matrix(adj),
        laplacian=Matrix(lap),
        lambda_max=lmax,
        scaled_laplacian=Matrix(scaled),
        cheb_basis=tuple(Matrix(b) for b in basis),
    )


def _cheb_basis(scaled: np.ndarray, K: int) -> list[np.ndarray]:
    n = scaled.shape[0]
    basis = [np.eye(n)]
    if K > 1:
        basis.append(scaled.copy())
    for _ in range(2, K):
        basis.append(2.0 * (scaled @ basis[-1]) - basis[-2])
    return basis


def with_order(graph: HostGraph, K: int) -> HostGraph:
    """Same graph with the Chebyshev basis rebuilt to length ``K``."""
    if K < 1:
        raise InputError(f"Chebyshev order must be >= 1, got {K}")
    if K == graph.order:
        return graph
    basis = _cheb_basis(graph.scaled_laplacian.data, K)
    return replace(graph, cheb_basis=tuple(Matrix(b) for b in basis))


def lambda_max(laplacian: Matrix, dense_cutoff: int = DENSE_EIG_CUTOFF) -> float:
    """Largest eigenvalue of a symmetric matrix, to within 1e-8.

    Uses a full symmetric eigendecomposition up to ``dense_cutoff`` nodes and
    shifted power iteration beyond it.
    """
    a = laplacian.data
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"matrix must be square, got {a.shape[0]}x{a.shape[1]}")
    if np.max(np.abs(a - a.T)) > 1e-9:
        raise InputError("lambda_max requires a symmetric matrix")
    if a.shape[0] <= dense_cutoff:
        return float(np.linalg.eigvalsh(a)[-1])
    return _power_iteration_max(a)


def _power_iteration_max(a: np.ndarray, tol: float = 1e-10, max_iter: int = 100_000) -> float:
    """Dominant eigenvalue of (a + I) minus the unit shift.

    The +1 shift makes the largest eigenvalue of a PSD Laplacian strictly
    dominant in magnitude so plain power iteration converges to it.
    """
    n = a.shape[0]
    rng = np.random.default_rng(0)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    prev = 0.0
    for _ in range(max_iter):
        w = a @ v + v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return -1.0  # a == -I on the iterate subspace
        v = w / norm
        ray = float(v @ (a @ v) + 1.0)
        if abs(ray - prev) < tol:
            return ray - 1.0
        prev = ray
    return prev - 1.0


def graph_conv(
    basis: tuple[Matrix, ...] | list[Matrix],
    x: Matrix,
    theta: list[Matrix],
) -> Matrix:
    """K-localized graph convolution: sum_k T_k(scaled_L) @ x @ theta_k.

    ``theta`` generalizes per-order scalar coefficients to d_in x d_out
    feature transforms; each node mixes features from at most K-1 hops away.
    Differentiable through the numerics tape.
    """
    if len(basis) != len(theta):
        raise ShapeError(
            f"basis has {len(basis)} terms but theta has {len(theta)}"
        )
    out: Matrix | None = None
    for t_k, th_k in zip(basis, theta):
        term = nm.matmul(nm.matmul(t_k, x), th_k)
        out = term if out is None else nm.add(out, term)
    return out


def spectral_conv_oracle(laplacian: Matrix, x: Matrix, theta: list[float]) -> Matrix:
    """Exact spectral-domain filtering, for test-scale graphs only.

    Filters ``x`` through U g(scaled_eigenvalues) U^T where g is the
    Chebyshev polynomial with scalar coefficients ``theta`` evaluated on the
    rescaled eigenvalue diagonal. Complements the recursion in graph_conv.
    """
    n = laplacian.rows
    if n > ORACLE_SIZE_CAP:
        raise InputError(f"spectral oracle supports n <= {ORACLE_SIZE_CAP}, got {n}")
    lam, u = np.linalg.eigh(laplacian.data)
    lmax = float(lam[-1])
    lam_scaled = 2.0 * lam / lmax - 1.0
    g = np.zeros(n)
    t_prev = np.ones(n)
    t_cur = lam_scaled.copy()
    for k, coeff in enumerate(theta):
        if k == 0:
            g += coeff * t_prev
        elif k == 1:
            g += coeff * t_cur
        else:
            t_prev, t_cur = t_cur, 2.0 * lam_scaled * t_cur - t_prev
            g += coeff * t_cur
    return Matrix(u @ (g[:, None] * (u.T @ x.data)))


def load_edge_csv(path) -> list[tuple[str, str]]:
    """Read an undirected edge list CSV with header ``src,dst``.

    Duplicate edges (either orientation) are collapsed, keeping first
    occurrence order.
    """
    edges: list[tuple[str, str]] = []
    seen: set[frozenset] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["src", "dst"]:
            raise InputError(f"edge file {path}: expected header 'src,dst'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2 or not row[0] or not row[1]:
                raise InputError(f"edge file {path}: malformed row at line {lineno}")
            key = frozenset((row[0], row[1]))
            if key in seen:
                continue
            seen.add(key)
            edges.append((row[0], row[1]))
    return edges
