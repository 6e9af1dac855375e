import numpy as np

from qgnn.qg_data import generate_sbm
from qgnn.qg_error import ErrorCode
from qgnn.qg_graph import build_graph, laplacian_quadratic
from qgnn.qg_smp import (
    SmpConfig,
    SmpState,
    bdmm_step,
    error_bound,
    layer_smoothness,
    mean_smoothness,
    propagate,
    verify_error_bound,
)

from .utils import dense_norm_adj, edge_sum_smoothness, path_graph, raises_code

EDGES = [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2), (3, 4)]


def test_step_matches_dense_update():
    g = build_graph(EDGES, 5)
    a = dense_norm_adj(EDGES, 5)
    random = np.random.default_rng(0)
    x, h = random.normal(size=(5, 3)), random.normal(size=(5, 3))
    cfg = SmpConfig(mu=6.0, layers=1, lambda0=-0.5, eta_lambda=0.0)
    eta = 1.0 / 7.0

    hbar = (1 - 7 * eta) * h + 6 * eta * a @ h + eta * x
    expected = hbar + 2 * eta * -0.5 * (np.eye(5) - a) @ (hbar - h)
    out, state = bdmm_step(g, h, x, SmpState.initial(g, cfg), cfg)
    assert np.allclose(out, expected)
    assert state.lam == -0.5
    assert np.isclose(state.smoothness[0], laplacian_quadratic(g, out - h))


def test_zero_multiplier_reduces_to_personalized_propagation():
    g = build_graph(EDGES, 5)
    a = dense_norm_adj(EDGES, 5)
    x = np.random.default_rng(1).normal(size=(5, 2))
    cfg = SmpConfig(mu=3.0, layers=6, lambda0=0.0, eta_lambda=0.0)
    alpha = 1.0 / 4.0
    h = x
    for _ in range(6):
        h = (1 - alpha) * a @ h + alpha * x
    out, state = propagate(g, x, cfg)
    assert np.allclose(out, h)
    assert state.lambdas == [0.0] * 6


def test_multiplier_and_slack_updates():
    g = path_graph(4)
    cfg = SmpConfig(delta0=0.1, eta_lambda=0.5, eta_s=0.1, lambda0=0.0, slack0=1.0)
    state = SmpState.initial(g, cfg)
    assert np.isclose(state.delta, 0.3)

    state.advance(2.0, cfg)
    assert state.slack == 1.0
    assert np.isclose(state.constraint[0], -2.7)
    assert np.isclose(state.lam, -1.35)

    state.advance(0.0, cfg)
    assert np.isclose(state.slack, 0.73)
    assert np.isclose(state.lam, -1.35 + 0.5 * (0.3 - 0.73**2))


def test_multiplier_never_turns_positive():
    g = path_graph(4)
    cfg = SmpConfig(eta_lambda=0.5, lambda0=0.0, slack0=0.0)
    state = SmpState.initial(g, cfg)
    state.advance(0.0, cfg)
    assert state.constraint[0] > 0
    assert state.lam == 0.0


def test_trajectory_and_mean():
    g = path_graph(5)
    x = np.random.default_rng(2).normal(size=(5, 2))
    _, state = propagate(g, x, SmpConfig(layers=4), keep_trajectory=True)
    assert len(state.trajectory) == 5
    assert np.array_equal(state.trajectory[0], x)
    assert np.isclose(state.mean, np.mean(state.smoothness[1:]))


def test_zero_layers_is_identity():
    x = np.ones((3, 2))
    out, state = propagate(path_graph(3), x, SmpConfig(layers=0))
    assert np.array_equal(out, x)
    assert state.smoothness == [] and state.mean is None


def test_mean_smoothness():
    assert mean_smoothness([1.0, 2.0, 3.0]) == 2.5
    with raises_code(ErrorCode.INPUT):
        mean_smoothness([1.0])


def test_divergence_names_the_layer():
    x = np.array([[np.inf], [0.0], [0.0]])
    with raises_code(ErrorCode.DIVERGED) as info:
        propagate(path_graph(3), x, SmpConfig(layers=2))
    assert "layer 1" in info.value.msg


def test_feature_shape():
    with raises_code(ErrorCode.SHAPE):
        propagate(path_graph(3), np.ones((2, 2)), SmpConfig())


def test_config_validation():
    assert np.isclose(SmpConfig(mu=6.0).step, 1.0 / 7.0)
    assert SmpConfig(eta_h=0.05).step == 0.05
    with raises_code(ErrorCode.INPUT):
        SmpConfig(lambda0=0.1)
    with raises_code(ErrorCode.INPUT):
        SmpConfig(mu=0.0)


def test_error_bound_value():
    g = path_graph(2)
    h = np.array([[1.0], [2.0]])
    check = error_bound(g, h, h, 2, 0.5)
    assert np.isclose(check.bound, 1.0)
    assert check.holds and check.f_e == 0.0
    assert np.isclose(check.eigen_gap, 1.0)


def test_error_bound_violation_is_reported():
    g = path_graph(2)
    h = np.array([[1.0], [2.0]])
    check = error_bound(g, h, h, 0, 0.5, h + 1.0)
    assert not check.holds
    assert check.f_e == 2.0


def test_verify_covers_every_layer():
    x = np.random.default_rng(3).normal(size=(6, 3))
    checks = verify_error_bound(path_graph(6), x, SmpConfig(layers=3), 8)
    assert [c.layer for c in checks] == [0, 1, 2, 3]
    assert all(c.f_e >= 0.0 for c in checks)


def test_multiplier_overflow_names_the_layer():
    state = SmpState(-1e200, 1.0, 1.0)
    with raises_code(ErrorCode.DIVERGED) as info:
        state.advance(0.0, SmpConfig(eta_s=1.0, lambda0=-1e200), 4)
    assert "layer 4" in info.value.msg
    assert state.lam == -1e200 and state.lambdas == []


def test_aggressive_multiplier_steps_diverge_with_a_code():
    bundle = generate_sbm(0)
    for changes in ({"eta_lambda": 1e-2}, {"eta_lambda": 1.0, "delta0": 1e-4}):
        with raises_code(ErrorCode.DIVERGED) as info:
            propagate(bundle.graph, bundle.features, SmpConfig(layers=12, **changes))
        assert "layer " in info.value.msg


def test_smoothness_is_the_normalized_edge_sum():
    rng = np.random.default_rng(5)
    edges = [(int(u), int(v)) for u, v in rng.integers(0, 12, size=(30, 2))]
    g = build_graph(edges, 12)
    h_prev, h_cur = rng.normal(size=(12, 4)), rng.normal(size=(12, 4))
    expected = edge_sum_smoothness(edges, 12, h_cur - h_prev)
    assert np.isclose(layer_smoothness(g, h_cur, h_prev), expected, rtol=1e-10, atol=0.0)


def test_error_bound_holds_on_block_models():
    for seed in range(3):
        bundle = generate_sbm(seed, 2, 50, 0.2, 0.02, 8)
        for bits in (8, 4):
            checks = verify_error_bound(bundle.graph, bundle.features, SmpConfig(layers=10), bits)
            assert len(checks) == 11
            assert all(c.holds for c in checks), (seed, bits)


def test_active_constraint_lowers_smoothness():
    bundle = generate_sbm(0)
    _, active = propagate(bundle.graph, bundle.features, SmpConfig(layers=10))
    _, frozen = propagate(bundle.graph, bundle.features, SmpConfig(layers=10, eta_lambda=0.0))
    assert frozen.lambdas == [0.0] * 10
    assert min(active.lambdas) < 0.0
    # λ⁰ = 0 in both passes, so the first step is shared
    assert np.isclose(active.smoothness[0], frozen.smoothness[0])
    assert active.smoothness[1] < frozen.smoothness[1]
    assert active.mean < frozen.mean
