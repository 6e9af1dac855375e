import numpy as np

from qgnn.qg_error import ErrorCode
from qgnn.qg_optim import Param
from qgnn.qg_tape import FakeQuantAttr, Tape
from qgnn.objs.qg_quantizer import QuantConfig, QuantParams, pre_clip_codes

from .utils import numeric_grad, path_graph, raises_code

LABELS = np.array([0, 1, 1, 0])
MASK = np.array([True, True, False, True])


def _loss(build):
    """Scalar loss of a graph built on a fresh tape"""
    tape = Tape(training=False)
    return float(tape.cross_entropy(build(tape), LABELS, MASK).value[0, 0])


def _grads(build, *params):
    tape = Tape(training=False)
    for p in params:
        p.zero_grad()
    tape.backward(tape.cross_entropy(build(tape), LABELS, MASK))
    return [p.grad for p in params]


def test_matmul_gradient():
    random = np.random.default_rng(0)
    x = random.normal(size=(4, 3))
    w = Param("W", random.normal(size=(3, 2)))

    def build(tape):
        return tape.matmul(tape.constant(x), tape.leaf(w))

    (grad,) = _grads(build, w)
    assert np.allclose(grad, numeric_grad(lambda: _loss(build), w.value), atol=1e-6)


def test_graph_ops_gradient():
    random = np.random.default_rng(1)
    g = path_graph(4)
    x = random.normal(size=(4, 3))
    w1 = Param("W1", random.normal(size=(3, 5)))
    w2 = Param("W2", random.normal(size=(5, 2)))

    def build(tape):
        h = tape.relu(tape.spmm(g, tape.matmul(tape.constant(x), tape.leaf(w1))))
        skip = tape.scale(tape.matmul(tape.constant(x), tape.leaf(w1)), 0.3)
        return tape.matmul(tape.add(h, skip), tape.leaf(w2))

    g1, g2 = _grads(build, w1, w2)
    assert np.allclose(g1, numeric_grad(lambda: _loss(build), w1.value), atol=1e-6)
    assert np.allclose(g2, numeric_grad(lambda: _loss(build), w2.value), atol=1e-6)


def test_bdmm_propagate_gradient():
    random = np.random.default_rng(2)
    g = path_graph(4)
    a = Param("A", random.normal(size=(4, 2)))
    b = Param("B", random.normal(size=(4, 2)))

    def build(tape):
        return tape.bdmm_propagate(g, tape.leaf(a), tape.leaf(b), eta=0.2, lam=-0.7)

    ga, gb = _grads(build, a, b)
    assert np.allclose(ga, numeric_grad(lambda: _loss(build), a.value), atol=1e-6)
    assert np.allclose(gb, numeric_grad(lambda: _loss(build), b.value), atol=1e-6)


def test_reused_parameter_accumulates():
    random = np.random.default_rng(3)
    x = random.normal(size=(4, 3))
    w = Param("W", random.normal(size=(3, 2)))

    def once(tape):
        return tape.matmul(tape.constant(x), tape.leaf(w))

    def twice(tape):
        return tape.add(once(tape), once(tape))

    (single,) = _grads(lambda tape: tape.scale(once(tape), 2.0), w)
    (double,) = _grads(twice, w)
    assert np.allclose(single, double)


def test_fake_quantize_passes_in_range_gradient_only():
    u = Param("u", np.array([[-2.0, 0.1], [0.5, 3.0]]))
    gamma = Param("gamma", np.ones((1, 1)))
    spec = FakeQuantAttr(QuantConfig(8), -1.0, 1.0)
    tape = Tape(training=False)
    out = tape.fake_quantize(tape.leaf(u), tape.leaf(gamma), spec)
    loss = tape.cross_entropy(out, np.array([0, 1]), np.array([True, True]))
    tape.backward(loss)
    assert u.grad[0, 0] == 0.0 and u.grad[1, 1] == 0.0
    assert u.grad[0, 1] != 0.0 and u.grad[1, 0] != 0.0
    assert gamma.grad.shape == (1, 1)


def test_gamma_gradient_matches_frozen_residual_surrogate():
    # with the rounding residual held fixed, û(γ) = u + s_γ(γ)·r is linear in γ
    qc = QuantConfig(4)
    u = np.linspace(-0.9, 0.9, 11)[None, :]
    gamma0 = 1.0
    qp = QuantParams(-1.0, 1.0, gamma0)
    z = qp.zero_point(qc)
    residual = pre_clip_codes(u, qp, qc) - (u / qp.step(qc) + z)

    def surrogate(gamma):
        return u + QuantParams(-1.0, 1.0, gamma).step(qc) * residual

    eps = 1e-6
    expected = (surrogate(gamma0 + eps) - surrogate(gamma0 - eps)) / (2 * eps)

    tape = Tape(training=False)
    gamma = Param("gamma", np.full((1, 1), gamma0))
    out = tape.fake_quantize(tape.constant(u), tape.leaf(gamma), FakeQuantAttr(qc, -1.0, 1.0))
    assert np.allclose(out.attr.gamma_grad, expected, atol=1e-6)


def test_dropout_modes():
    x = np.ones((50, 4))
    eval_tape = Tape(training=False)
    assert np.array_equal(eval_tape.dropout(eval_tape.constant(x), 0.5).value, x)

    train_tape = Tape(0, training=True)
    out = train_tape.dropout(train_tape.constant(x), 0.5).value
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert 0 < np.count_nonzero(out) < out.size


def test_dropout_rate_bounds():
    tape = Tape()
    with raises_code(ErrorCode.INPUT):
        tape.dropout(tape.constant(np.ones((2, 2))), 1.0)


def test_backward_needs_scalar():
    tape = Tape()
    with raises_code(ErrorCode.SHAPE):
        tape.backward(tape.constant(np.ones((2, 2))))


def test_cross_entropy_empty_mask():
    tape = Tape()
    with raises_code(ErrorCode.EMPTY):
        tape.cross_entropy(tape.constant(np.zeros((2, 2))), np.array([0, 1]), np.array([False, False]))


def test_matmul_shape():
    tape = Tape()
    with raises_code(ErrorCode.SHAPE):
        tape.matmul(tape.constant(np.ones((2, 3))), tape.constant(np.ones((2, 3))))
