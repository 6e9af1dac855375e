import numpy as np

from qgnn.qg_error import ErrorCode
from qgnn.objs.qg_packing import pack, row_bytes, unpack

from .utils import raises_code


def test_two_bit_byte_layout():
    packed = pack(np.array([[1, 2, 3, 0]]), 2)
    assert packed.payload.tolist() == [[0x39]]


def test_four_bit_row_padding():
    packed = pack(np.array([[1, 15, 3]]), 4)
    assert packed.payload.tolist() == [[0xF1, 0x03]]
    assert packed.row_bytes == 2


def test_unpack_restores_codes():
    random = np.random.default_rng(0)
    for bits, cols in ((2, 7), (4, 5), (8, 3)):
        codes = random.integers(0, 2**bits, size=(6, cols))
        packed = pack(codes, bits)
        assert packed.nbytes == 6 * row_bytes(cols, bits)
        assert np.array_equal(unpack(packed), codes)


def test_row_bytes():
    assert row_bytes(64, 2) == 16
    assert row_bytes(15, 2) == 4
    assert row_bytes(15, 4) == 8
    assert row_bytes(15, 8) == 15


def test_codes_out_of_range():
    with raises_code(ErrorCode.RANGE):
        pack(np.array([[4]]), 2)
    with raises_code(ErrorCode.RANGE):
        pack(np.array([[-1]]), 8)


def test_unsupported_width_and_shape():
    with raises_code(ErrorCode.INPUT):
        pack(np.array([[1]]), 3)
    with raises_code(ErrorCode.SHAPE):
        pack(np.array([1, 2]), 2)
