from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from qgnn.qg_error import ErrorCode
from qgnn.qg_handler import handler
from qgnn.utils import round_half_away
from .qg_truncation import TruncationSpec, skewness_or_zero, truncate_bt, truncate_bt_star

SUPPORTED_BITS = (2, 4, 8)

DEFAULT_GAMMAS = tuple(round(0.05 * k, 2) for k in range(1, 21))


@dataclass(frozen=True)
class QuantConfig:
    """Unsigned code levels [0, 2^bits - 1]"""

    bits: int

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise handler.error(
                f"unsupported bit width {self.bits}, expected one of {SUPPORTED_BITS}"
            )

    @property
    def alpha_q(self) -> int:
        return 0

    @property
    def beta_q(self) -> int:
        return 2**self.bits - 1


@dataclass(frozen=True)
class QuantParams:
    """
    Per-tensor quantization state: observed range [alpha, beta] and the learnable
    range scale gamma. The effective clipping range is roughly [γα, γβ].
    """

    alpha: float
    beta: float
    gamma: float = 1.0

    def __post_init__(self):
        if not self.beta > self.alpha:
            raise handler.error(
                f"degenerate range [{self.alpha}, {self.beta}]",
                code=ErrorCode.DEGENERATE,
            )
        if not self.gamma > 0:
            raise handler.error(f"gamma must be positive, got {self.gamma}")

    def scale(self, qc: QuantConfig) -> float:
        """s, the step before γ scaling"""
        return (self.beta - self.alpha) / (qc.beta_q - qc.alpha_q)

    def step(self, qc: QuantConfig) -> float:
        """s_γ = γ (β - α) / (β_q - α_q)"""
        return self.gamma * self.scale(qc)

    def zero_point(self, qc: QuantConfig) -> int:
        """z_γ, written with γ in place; it cancels, so z_γ = z"""
        g = self.gamma
        num = g * self.beta * qc.alpha_q - g * self.alpha * qc.beta_q
        return int(round_half_away(num / (g * self.beta - g * self.alpha)))

    def unscaled_zero_point(self, qc: QuantConfig) -> int:
        num = self.beta * qc.alpha_q - self.alpha * qc.beta_q
        return int(round_half_away(num / (self.beta - self.alpha)))

    def with_gamma(self, gamma: float) -> "QuantParams":
        return QuantParams(self.alpha, self.beta, gamma)


def observe_range(tensor) -> tuple[float, float]:
    """Min / max of the tensor; a constant tensor is widened to [v - 0.5, v + 0.5]"""
    u = np.asarray(tensor, dtype=np.float64)
    if u.size == 0:
        raise handler.error("cannot observe the range of an empty tensor", code=ErrorCode.EMPTY)
    if not np.all(np.isfinite(u)):
        raise handler.error("tensor contains NaN or Inf", code=ErrorCode.DIVERGED)
    alpha, beta = float(u.min()), float(u.max())
    if alpha == beta:
        alpha, beta = alpha - 0.5, beta + 0.5
    return alpha, beta


def pre_clip_codes(u, qp: QuantParams, qc: QuantConfig) -> np.ndarray:
    """⌊u / s_γ + z_γ⌉ before clipping"""
    u = np.asarray(u, dtype=np.float64)
    return round_half_away(u / qp.step(qc) + qp.zero_point(qc))


def quantize(u, qp: QuantParams, qc: QuantConfig) -> np.ndarray:
    codes = np.clip(pre_clip_codes(u, qp, qc), qc.alpha_q, qc.beta_q)
    return codes.astype(np.int64)


def dequantize(codes, qp: QuantParams, qc: QuantConfig) -> np.ndarray:
    return qp.step(qc) * (np.asarray(codes, dtype=np.float64) - qp.zero_point(qc))


def gamma_gradient(u, qp: QuantParams, qc: QuantConfig) -> np.ndarray:
    """
    ∂û/∂γ under the straight-through estimator: α_q where the pre-clip code falls
    below α_q, β_q where it exceeds β_q, s·(code - z) - u/γ inside the range.
    """

    u = np.asarray(u, dtype=np.float64)
    code = pre_clip_codes(u, qp, qc)
    inner = qp.scale(qc) * (code - qp.zero_point(qc)) - u / qp.gamma
    return np.where(
        code < qc.alpha_q,
        float(qc.alpha_q),
        np.where(code > qc.beta_q, float(qc.beta_q), inner),
    )


class FakeQuant(NamedTuple):
    out: np.ndarray
    in_range: np.ndarray
    gamma_grad: np.ndarray


def fake_quantize_array(
    u,
    qp: QuantParams,
    qc: QuantConfig,
    truncation: Optional[TruncationSpec] = None,
    star: bool = False,
) -> FakeQuant:
    """
    Quantize then dequantize. With a truncation spec the codes are produced at the
    source width (qc.bits must equal truncation.source_bits) and snapped to the
    narrower grid with BT or BT*; the backward quantities are those of the source
    quantizer.
    """

    u = np.asarray(u, dtype=np.float64)
    code = pre_clip_codes(u, qp, qc)
    in_range = (code >= qc.alpha_q) & (code <= qc.beta_q)
    codes = effective_codes(u, qp, qc, truncation, star, code)
    out = qp.step(qc) * (codes - qp.zero_point(qc))
    return FakeQuant(out, in_range, gamma_gradient(u, qp, qc))


def effective_codes(
    u,
    qp: QuantParams,
    qc: QuantConfig,
    truncation: Optional[TruncationSpec] = None,
    star: bool = False,
    pre_clip: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Integer codes on the qc grid that `fake_quantize_array` dequantizes; after
    truncation they are multiples of s₀.
    """

    code = pre_clip_codes(u, qp, qc) if pre_clip is None else pre_clip
    clipped = np.clip(code, qc.alpha_q, qc.beta_q)
    if truncation is None:
        return clipped.astype(np.int64)
    if truncation.source_bits != qc.bits:
        raise handler.error(f"truncation expects {truncation.source_bits}-bit codes, got {qc.bits}")
    if star:
        snapped = truncate_bt_star(clipped, truncation, skewness_or_zero(u))
    else:
        snapped = truncate_bt(clipped, truncation)
    return round_half_away(snapped).astype(np.int64)


def fake_quantize(u, qp: QuantParams, qc: QuantConfig) -> np.ndarray:
    return fake_quantize_array(u, qp, qc).out


class MseSplit(NamedTuple):
    overload: float
    granular: float
    total: float


def mse_decomposition(samples, qp: QuantParams, qc: QuantConfig) -> MseSplit:
    """
    Split Σ(u - û)² into the clipped samples' share (overload distortion) and the
    in-range samples' share (granular distortion).
    """

    u = np.asarray(samples, dtype=np.float64).ravel()
    if u.size == 0:
        raise handler.error("no samples to analyse", code=ErrorCode.EMPTY)
    fq = fake_quantize_array(u, qp, qc)
    sq = (u - fq.out) ** 2
    overload = float(np.sum(sq[~fq.in_range]))
    granular = float(np.sum(sq[fq.in_range]))
    return MseSplit(overload, granular, overload + granular)


class GammaSweepRow(NamedTuple):
    bits: int
    gamma: float
    step: float
    distortion: float
    error: float


def gamma_sweep(
    samples,
    bits: Sequence[int] = SUPPORTED_BITS,
    gammas: Sequence[float] = DEFAULT_GAMMAS,
) -> list[GammaSweepRow]:
    """
    Error curves over γ: `distortion` is e_γ, the squared rounding residual in code
    units, and `error` is f_e = s_γ² e_γ = Σ(u - û)².
    """

    u = np.asarray(samples, dtype=np.float64).ravel()
    alpha, beta = observe_range(u)
    rows = []
    for b in bits:
        qc = QuantConfig(b)
        for gamma in gammas:
            qp = QuantParams(alpha, beta, gamma)
            step = qp.step(qc)
            codes = quantize(u, qp, qc)
            residual = u / step + qp.zero_point(qc) - codes
            distortion = float(np.sum(residual**2))
            rows.append(GammaSweepRow(b, gamma, step, distortion, step**2 * distortion))
    return rows
