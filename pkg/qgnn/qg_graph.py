from dataclasses import dataclass
from functools import cached_property
from typing import Iterable

import numpy as np
from scipy import sparse

from qgnn.qg_error import ErrorCode
from qgnn.qg_handler import handler

DenseMatrix = np.ndarray

# dense eigendecomposition is only attempted below this size
SPECTRUM_GUARD = 500


@dataclass(frozen=True, eq=False)
class Graph:
    """
    Undirected graph with structural self-loops. `csr` holds Â = I + A,
    `norm_adj` holds Ã = D^-1/2 Â D^-1/2, both with ascending column ids per row.
    Instances are immutable and can be shared between threads.
    """

    n: int
    edges: np.ndarray
    csr: sparse.csr_matrix
    deg: np.ndarray
    norm_adj: sparse.csr_matrix

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def dense_laplacian(self) -> np.ndarray:
        """I - Ã as a dense matrix. Only for small graphs."""
        self._guard("dense Laplacian")
        return np.eye(self.n) - self.norm_adj.toarray()

    @cached_property
    def spectrum(self) -> np.ndarray:
        """Ascending eigenvalues of the normalized Laplacian."""
        self._guard("Laplacian spectrum")
        return np.linalg.eigvalsh(self.dense_laplacian)

    def _guard(self, what: str):
        if self.n > SPECTRUM_GUARD:
            raise handler.error(
                f"{what} needs n <= {SPECTRUM_GUARD}, graph has {self.n} nodes",
                code=ErrorCode.GUARD,
            )


def build_graph(edge_list: Iterable[tuple[int, int]] | np.ndarray, n: int) -> Graph:
    """
    Build a graph from (u, v) pairs. Duplicates, both orientations and self-loops
    are accepted; the result keeps each undirected edge once and adds exactly one
    self-loop per node.
    """

    if n <= 0:
        raise handler.error("graph must have at least one node", code=ErrorCode.EMPTY)
    pairs = np.asarray(list(edge_list) if not isinstance(edge_list, np.ndarray) else edge_list)
    pairs = pairs.reshape(-1, 2).astype(np.int64) if pairs.size else np.empty((0, 2), np.int64)
    if pairs.size and (pairs.min() < 0 or pairs.max() >= n):
        bad = pairs[(pairs < 0).any(axis=1) | (pairs >= n).any(axis=1)][0]
        raise handler.error(
            f"edge ({bad[0]}, {bad[1]}) references a node outside [0, {n})",
            code=ErrorCode.RANGE,
        )

    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    edges = np.unique(np.sort(pairs, axis=1), axis=0) if len(pairs) else pairs

    rows = np.concatenate([edges[:, 0], edges[:, 1], np.arange(n)])
    cols = np.concatenate([edges[:, 1], edges[:, 0], np.arange(n)])
    ahat = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    ahat.sum_duplicates()
    ahat.sort_indices()

    deg = np.asarray(ahat.sum(axis=1)).ravel()
    inv_sqrt = sparse.diags(1.0 / np.sqrt(deg))
    norm_adj = (inv_sqrt @ ahat @ inv_sqrt).tocsr()
    norm_adj.sort_indices()

    return Graph(n=n, edges=edges, csr=ahat, deg=deg, norm_adj=norm_adj)


def _check_rows(g: Graph, m: DenseMatrix, what: str) -> DenseMatrix:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != g.n:
        raise handler.error(
            f"{what} expects a matrix with {g.n} rows, got shape {m.shape}",
            code=ErrorCode.SHAPE,
        )
    return m


def spmm(g: Graph, h: DenseMatrix) -> DenseMatrix:
    """Ã · h"""
    h = _check_rows(g, h, "spmm")
    return np.asarray(g.norm_adj @ h)


def laplacian_quadratic(g: Graph, m: DenseMatrix) -> float:
    """tr(Mᵀ (I - Ã) M), non-negative up to rounding"""
    m = _check_rows(g, m, "laplacian_quadratic")
    return float(np.sum(m * m) - np.sum(m * (g.norm_adj @ m)))


def pinv_trace(g: Graph, tol: float = 1e-8) -> tuple[float, float]:
    """
    Sum of reciprocals of the non-zero Laplacian eigenvalues, and the smallest
    of those eigenvalues (the eigen-gap).
    """

    eig = g.spectrum
    nonzero = eig[eig > tol]
    if not len(nonzero):
        return 0.0, 0.0
    return float(np.sum(1.0 / nonzero)), float(nonzero.min())
