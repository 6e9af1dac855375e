from dataclasses import dataclass

import numpy as np

from qgnn.qg_error import ErrorCode
from qgnn.qg_handler import handler

PACKABLE_BITS = (2, 4, 8)


@dataclass(frozen=True, eq=False)
class PackedTensor:
    """
    Bit-packed code matrix. Row-major, little-endian inside each byte (the first
    code of a byte sits in its least significant bits), rows padded to whole bytes.
    """

    bits: int
    rows: int
    cols: int
    payload: np.ndarray
    step: float = 1.0
    zero_point: int = 0

    @property
    def row_bytes(self) -> int:
        return row_bytes(self.cols, self.bits)

    @property
    def nbytes(self) -> int:
        return int(self.payload.nbytes)


def row_bytes(cols: int, bits: int) -> int:
    return -(-cols * bits // 8)


def pack(codes, bits: int, step: float = 1.0, zero_point: int = 0) -> PackedTensor:
    if bits not in PACKABLE_BITS:
        raise handler.error(f"cannot pack {bits}-bit codes")
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise handler.error(f"codes must be a matrix, got shape {codes.shape}", code=ErrorCode.SHAPE)
    if codes.size and (codes.min() < 0 or codes.max() > 2**bits - 1):
        raise handler.error(
            f"codes outside [0, {2**bits - 1}] cannot be packed at {bits} bits",
            code=ErrorCode.RANGE,
        )

    rows, cols = codes.shape
    per_byte = 8 // bits
    width = row_bytes(cols, bits)
    padded = np.zeros((rows, width * per_byte), dtype=np.uint8)
    padded[:, :cols] = codes
    shifts = (np.arange(per_byte) * bits).astype(np.uint8)
    lanes = padded.reshape(rows, width, per_byte) << shifts
    payload = np.bitwise_or.reduce(lanes, axis=2).astype(np.uint8)
    return PackedTensor(bits, rows, cols, payload, step, zero_point)


def unpack(packed: PackedTensor) -> np.ndarray:
    per_byte = 8 // packed.bits
    mask = np.uint8(2**packed.bits - 1)
    shifts = (np.arange(per_byte) * packed.bits).astype(np.uint8)
    lanes = (packed.payload[:, :, None] >> shifts) & mask
    return lanes.reshape(packed.rows, packed.row_bytes * per_byte)[:, : packed.cols].astype(np.int64)
