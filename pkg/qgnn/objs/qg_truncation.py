from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import stats

from qgnn.qg_error import ErrorCode
from qgnn.qg_handler import handler
from qgnn.utils import round_half_away


@dataclass(frozen=True)
class TruncationSpec:
    """
    Truncation of a `source_bits` code grid down to `bits` levels. `scale` is s₀,
    the number of source codes that collapse into one target level.
    """

    source_bits: int
    bits: int

    def __post_init__(self):
        if self.bits > self.source_bits:
            raise handler.error(
                f"cannot truncate {self.source_bits}-bit codes to {self.bits} bits",
                code=ErrorCode.INPUT,
            )
        if self.bits < 2:
            raise handler.error("truncation below 2 bits is not supported")

    @property
    def source_beta_q(self) -> int:
        return 2**self.source_bits - 1

    @property
    def beta_q(self) -> int:
        return 2**self.bits - 1

    @property
    def scale(self) -> float:
        return (0 - self.source_beta_q) / (0 - self.beta_q)


def truncate_codes(codes, spec: TruncationSpec, shift: float = 0.0) -> np.ndarray:
    """Target-grid codes, clipped to [0, 2^bits - 1]"""
    codes = np.asarray(codes, dtype=np.float64)
    scaled = round_half_away((codes + shift) / spec.scale)
    return np.clip(scaled, 0, spec.beta_q).astype(np.int64)


def truncate_bt(codes, spec: TruncationSpec) -> np.ndarray:
    """Keep the most significant levels: ⌊U_q / s₀⌉ · s₀ on the source grid."""
    return truncate_codes(codes, spec) * spec.scale


def truncate_bt_star(codes, spec: TruncationSpec, sk: float) -> np.ndarray:
    """
    Skewness-aware truncation: codes are shifted by the rounded skewness of the
    pre-quantization tensor before truncating, ⌊(U_q + ⌊sk⌉) / s₀⌉ · s₀.
    """

    shift = float(round_half_away(sk))
    return truncate_codes(codes, spec, shift) * spec.scale


class MomentReport(NamedTuple):
    skewness: float
    kurtosis: float
    kappa_n: float


def moments(tensor) -> MomentReport:
    """Population skewness and kurtosis (a normal sample has κ = 3), κ_N = |κ - 3|"""
    x = np.asarray(tensor, dtype=np.float64).ravel()
    if x.size < 2 or np.var(x) == 0.0:
        raise handler.error(
            "moments need at least two distinct values", code=ErrorCode.DEGENERATE
        )
    sk = float(stats.skew(x, bias=True))
    kappa = float(stats.kurtosis(x, fisher=False, bias=True))
    return MomentReport(sk, kappa, abs(kappa - 3.0))


def skewness_or_zero(tensor) -> float:
    """Skewness used by BT* inside a forward pass; constant tensors count as symmetric."""
    x = np.asarray(tensor, dtype=np.float64).ravel()
    if x.size < 2 or np.ptp(x) == 0.0:
        return 0.0
    return float(stats.skew(x, bias=True))
