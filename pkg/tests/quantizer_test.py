import numpy as np

from qgnn.qg_error import ErrorCode
from qgnn.objs.qg_quantizer import (
    DEFAULT_GAMMAS,
    QuantConfig,
    QuantParams,
    dequantize,
    effective_codes,
    fake_quantize_array,
    gamma_gradient,
    gamma_sweep,
    mse_decomposition,
    observe_range,
    quantize,
)
from qgnn.objs.qg_truncation import TruncationSpec
from qgnn.utils import round_half_away

from .utils import raises_code

INT8 = QuantConfig(8)
UNIT = QuantParams(0.0, 255.0)


def test_round_half_away_from_zero():
    assert round_half_away([0.5, 1.5, 2.5, -2.5, -0.4]).tolist() == [1, 2, 3, -3, -0]


def test_quantize_unit_step():
    assert quantize([37.4, -5.0, 300.0], UNIT, INT8).tolist() == [37, 0, 255]


def test_gamma_shrinks_the_step():
    qp = UNIT.with_gamma(0.5)
    assert qp.step(INT8) == 0.5
    assert quantize([100.0, 200.0], qp, INT8).tolist() == [200, 255]


def test_zero_point_is_gamma_invariant():
    qp = QuantParams(-0.3, 1.7)
    for gamma in (0.25, 0.8, 1.0, 2.0):
        assert qp.with_gamma(gamma).zero_point(INT8) == qp.unscaled_zero_point(INT8)


def test_dequantize_error_is_half_a_step():
    qp = QuantParams(-2.0, 3.0)
    u = np.random.default_rng(0).uniform(-2.0, 3.0, size=1000)
    err = np.abs(dequantize(quantize(u, qp, INT8), qp, INT8) - u)
    assert err.max() <= qp.step(INT8) / 2 + 1e-12


def test_gamma_gradient_cases():
    grad = gamma_gradient([10.65, -5.0, 300.0], UNIT, INT8)
    assert np.allclose(grad, [0.35, 0.0, 255.0])


def test_observe_range():
    assert observe_range([[1.0, -2.0], [4.0, 0.0]]) == (-2.0, 4.0)
    assert observe_range([3.0, 3.0]) == (2.5, 3.5)
    with raises_code(ErrorCode.EMPTY):
        observe_range([])
    with raises_code(ErrorCode.DIVERGED):
        observe_range([1.0, np.nan])


def test_invalid_parameters():
    with raises_code(ErrorCode.INPUT):
        QuantConfig(3)
    with raises_code(ErrorCode.DEGENERATE):
        QuantParams(1.0, 1.0)
    with raises_code(ErrorCode.INPUT):
        QuantParams(0.0, 1.0, 0.0)


def test_fake_quantize_in_range_mask():
    fq = fake_quantize_array([-10.0, 10.0, 300.0], UNIT, INT8)
    assert fq.out.tolist() == [0.0, 10.0, 255.0]
    assert fq.in_range.tolist() == [False, True, False]


def test_truncated_codes_are_multiples_of_the_scale():
    u = np.random.default_rng(1).normal(size=500)
    alpha, beta = observe_range(u)
    qp = QuantParams(alpha, beta)
    spec = TruncationSpec(8, 2)
    for star in (False, True):
        codes = effective_codes(u, qp, INT8, spec, star)
        assert np.all(codes % 85 == 0)
        assert set(np.unique(codes)) <= {0, 85, 170, 255}


def test_truncation_needs_source_width():
    with raises_code(ErrorCode.INPUT):
        effective_codes([0.5], QuantParams(0.0, 1.0), QuantConfig(4), TruncationSpec(8, 2))


def test_mse_decomposition():
    u = np.linspace(-0.9, 0.9, 101)
    full = mse_decomposition(u, QuantParams(-1.0, 1.0), QuantConfig(4))
    assert full.overload == 0.0
    assert full.granular > 0.0
    narrow = mse_decomposition(u, QuantParams(-1.0, 1.0, 0.5), QuantConfig(4))
    assert narrow.overload > 0.0
    assert np.isclose(narrow.total, narrow.overload + narrow.granular)


def test_gamma_sweep_rows():
    samples = np.random.default_rng(2).normal(size=2000)
    rows = gamma_sweep(samples)
    assert len(rows) == 3 * len(DEFAULT_GAMMAS)
    for row in rows:
        assert np.isclose(row.error, row.step**2 * row.distortion)
    # finer grids have smaller error at the full range
    at_one = {row.bits: row.error for row in rows if row.gamma == 1.0}
    assert at_one[8] < at_one[4] < at_one[2]
