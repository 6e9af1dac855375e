import numpy as np

from qgnn.qg_error import ErrorCode
from qgnn.qg_graph import SPECTRUM_GUARD, build_graph, laplacian_quadratic, pinv_trace, spmm

from .utils import dense_norm_adj, path_graph, raises_code


def test_single_edge_normalization():
    g = build_graph([(0, 1)], 2)
    assert g.num_edges == 1
    assert np.allclose(g.deg, [2, 2])
    assert np.allclose(g.norm_adj.toarray(), [[0.5, 0.5], [0.5, 0.5]])


def test_duplicates_reversed_edges_and_self_loops():
    g = build_graph([(0, 1), (1, 0), (1, 1), (0, 1)], 3)
    assert g.num_edges == 1
    assert np.allclose(g.csr.diagonal(), 1.0)
    assert np.allclose(g.deg, [2, 2, 1])


def test_isolated_node_keeps_its_self_loop():
    g = build_graph([], 2)
    assert np.allclose(g.norm_adj.toarray(), np.eye(2))


def test_node_out_of_range():
    with raises_code(ErrorCode.RANGE):
        build_graph([(0, 3)], 3)


def test_empty_graph():
    with raises_code(ErrorCode.EMPTY):
        build_graph([], 0)


def test_spmm_matches_dense():
    edges = [(0, 1), (1, 2), (2, 3), (0, 3), (1, 3)]
    g = build_graph(edges, 5)
    h = np.random.default_rng(0).normal(size=(5, 3))
    assert np.allclose(spmm(g, h), dense_norm_adj(edges, 5) @ h)


def test_spmm_shape():
    with raises_code(ErrorCode.SHAPE):
        spmm(path_graph(3), np.ones((2, 2)))


def test_laplacian_quadratic_single_edge():
    g = build_graph([(0, 1)], 2)
    assert np.isclose(laplacian_quadratic(g, np.array([[1.0], [0.0]])), 0.5)


def test_laplacian_quadratic_is_non_negative_and_zero_on_constant_degree_vector():
    g = build_graph([(0, 1), (1, 2), (2, 0), (2, 3)], 4)
    m = np.random.default_rng(1).normal(size=(4, 6))
    assert laplacian_quadratic(g, m) >= -1e-12
    # D^1/2 · 1 spans the null space of I - Ã
    assert abs(laplacian_quadratic(g, np.sqrt(g.deg)[:, None])) < 1e-12


def test_pinv_trace_two_nodes():
    trace, gap = pinv_trace(path_graph(2))
    assert np.isclose(trace, 1.0)
    assert np.isclose(gap, 1.0)


def test_spectrum_guard():
    g = path_graph(SPECTRUM_GUARD + 1)
    with raises_code(ErrorCode.GUARD):
        g.spectrum


def _random_graph(seed: int, n: int, extra: int):
    rng = np.random.default_rng(seed)
    edges = [(i, i + 1) for i in range(n - 1)]
    edges += [(int(u), int(v)) for u, v in rng.integers(0, n, size=(extra, 2))]
    return edges, build_graph(edges, n), rng


def test_laplacian_quadratic_matches_dense_trace():
    edges, g, rng = _random_graph(7, 15, 25)
    m = rng.normal(size=(15, 4))
    expected = np.trace(m.T @ (np.eye(15) - dense_norm_adj(edges, 15)) @ m)
    assert np.isclose(laplacian_quadratic(g, m), expected, rtol=1e-10, atol=0.0)


def test_spmm_is_linear():
    _, g, rng = _random_graph(8, 10, 12)
    x, y = rng.normal(size=(10, 3)), rng.normal(size=(10, 3))
    assert np.allclose(spmm(g, 2.5 * x - 0.5 * y), 2.5 * spmm(g, x) - 0.5 * spmm(g, y))


def test_normalized_adjacency_has_unit_spectral_radius():
    _, g, rng = _random_graph(9, 12, 10)
    a = spmm(g, np.eye(12))
    v = rng.uniform(0.5, 1.0, size=12)
    for _ in range(3000):
        v = a @ v
        v /= np.linalg.norm(v)
    assert np.isclose(v @ a @ v, 1.0, atol=1e-8)
    assert np.isclose(np.abs(np.linalg.eigvalsh(a)).max(), 1.0)
