from contextlib import contextmanager

import numpy as np
import pytest

from qgnn.qg_data import GraphBundle, generate_sbm, make_splits
from qgnn.qg_env import ExperimentConfig
from qgnn.qg_error import ErrorCode, QGError
from qgnn.qg_graph import Graph, build_graph


def path_graph(n: int) -> Graph:
    return build_graph([(i, i + 1) for i in range(n - 1)], n)


def dense_norm_adj(edges, n: int) -> np.ndarray:
    a = np.eye(n)
    for u, v in edges:
        if u != v:
            a[u, v] = a[v, u] = 1.0
    d = a.sum(axis=1)
    return a / np.sqrt(np.outer(d, d))


def edge_sum_smoothness(edges, n: int, m: np.ndarray) -> float:
    """Σ over undirected edges of ‖m_i/√d_i - m_j/√d_j‖², with d counting the self-loop"""
    pairs = {(min(u, v), max(u, v)) for u, v in edges if u != v}
    deg = np.ones(n)
    for u, v in pairs:
        deg[u] += 1
        deg[v] += 1
    scaled = m / np.sqrt(deg)[:, None]
    return float(sum(np.sum((scaled[u] - scaled[v]) ** 2) for u, v in pairs))


def numeric_grad(f, value: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar f at every entry of value (modified in place, then restored)."""
    grad = np.zeros_like(value)
    for idx in np.ndindex(value.shape):
        old = value[idx]
        value[idx] = old + eps
        hi = f()
        value[idx] = old - eps
        lo = f()
        value[idx] = old
        grad[idx] = (hi - lo) / (2 * eps)
    return grad


def sbm_bundle(seed: int = 0, n: int = 200, val_size: int = 60, separation: float = 2.0, dim: int = 16) -> GraphBundle:
    bundle = generate_sbm(seed, 2, n, 0.05, 0.005, dim, separation)
    return bundle.with_splits(make_splits(bundle.labels, bundle.classes, seed, 20, val_size))


def small_config(**changes) -> ExperimentConfig:
    base = dict(
        synth_nodes=200,
        val_size=60,
        synth_sep=2.0,
        hidden=16,
        epochs=30,
        dropout=0.5,
        log_every=1000,
    )
    base.update(changes)
    return ExperimentConfig.default().replace(**base)


@contextmanager
def raises_code(code: ErrorCode):
    """pytest.raises for a QGError carrying `code`"""
    with pytest.raises(QGError) as info:
        yield info
    assert info.value.code is code, f"expected {code}, got {info.value.code}"
