from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from qgnn.qg_error import ErrorCode
from qgnn.qg_graph import DenseMatrix, Graph, laplacian_quadratic, pinv_trace, spmm
from qgnn.qg_handler import handler, logger
from qgnn.objs.qg_quantizer import QuantConfig, QuantParams, fake_quantize, observe_range

# quantize(kind, layer, tensor): kind is "aggregate", "denoise" or "update",
# layer counts propagation steps from 1
QuantizeHook = Callable[[str, int, DenseMatrix], DenseMatrix]


@dataclass(frozen=True)
class SmpConfig:
    mu: float = 6.0
    delta0: float = 0.1
    layers: int = 10
    eta_h: Optional[float] = None
    eta_lambda: float = 1e-5
    eta_s: float = 1e-5
    lambda0: float = 0.0
    slack0: float = 1.0

    def __post_init__(self):
        if not self.mu > 0:
            raise handler.error(f"mu must be positive, got {self.mu}")
        if not self.delta0 > 0:
            raise handler.error(f"delta0 must be positive, got {self.delta0}")
        if self.layers < 0:
            raise handler.error(f"layer count must be non-negative, got {self.layers}")
        if self.eta_h is not None and not self.eta_h > 0:
            raise handler.error(f"eta_h must be positive, got {self.eta_h}")
        if self.eta_lambda < 0 or self.eta_s < 0:
            raise handler.error("multiplier and slack step sizes must be non-negative")
        if self.lambda0 > 0:
            raise handler.error(f"lambda0 must be non-positive, got {self.lambda0}")

    @property
    def step(self) -> float:
        """η_H, defaulting to 1/(1+μ)"""
        return 1.0 / (1.0 + self.mu) if self.eta_h is None else self.eta_h

    def budget(self, g: Graph) -> float:
        """δ = δ₀|E|"""
        return self.delta0 * g.num_edges


@dataclass
class SmpState:
    """
    Multiplier and slack of one propagation pass, plus the per-layer trace.
    A fresh state is created for every pass.
    """

    lam: float
    slack: float
    delta: float
    smoothness: list[float] = field(default_factory=list)
    lambdas: list[float] = field(default_factory=list)
    constraint: list[float] = field(default_factory=list)
    trajectory: Optional[list[DenseMatrix]] = None

    @classmethod
    def initial(cls, g: Graph, cfg: SmpConfig, keep_trajectory: bool = False) -> "SmpState":
        return cls(cfg.lambda0, cfg.slack0, cfg.budget(g), trajectory=[] if keep_trajectory else None)

    def advance(self, s_l: float, cfg: SmpConfig, layer: int = 0) -> None:
        """
        Slack then multiplier, both driven by λ^l. The multiplier stays
        non-positive: with g = δ - S - s², only λ ≤ 0 penalizes S > δ - s².
        """

        lam = np.float64(self.lam)
        with np.errstate(over="ignore", invalid="ignore"):
            slack = np.float64(self.slack) + 2.0 * cfg.eta_s * lam * np.float64(self.slack)
            g_val = self.delta - np.float64(s_l) - slack * slack
            lam = np.minimum(lam + cfg.eta_lambda * g_val, 0.0)
        if not np.isfinite([slack, g_val, lam]).all():
            raise handler.error(
                f"multiplier update diverged (slack {slack:.3g}, g {g_val:.3g}, lambda {lam:.3g})",
                f"layer {layer}",
                ErrorCode.DIVERGED,
            )
        self.slack, self.lam = float(slack), float(lam)
        self.smoothness.append(float(s_l))
        self.lambdas.append(self.lam)
        self.constraint.append(float(g_val))

    @property
    def mean(self) -> Optional[float]:
        return mean_smoothness(self.smoothness) if len(self.smoothness) >= 2 else None


def layer_smoothness(g: Graph, h_cur: DenseMatrix, h_prev: DenseMatrix) -> float:
    """S_l = tr(Mᵀ (I - Ã) M) with M = H^l - H^{l-1}"""
    h_cur, h_prev = np.asarray(h_cur, dtype=np.float64), np.asarray(h_prev, dtype=np.float64)
    if h_cur.shape != h_prev.shape:
        raise handler.error(
            f"layer shapes differ: {h_cur.shape} vs {h_prev.shape}", code=ErrorCode.SHAPE
        )
    return laplacian_quadratic(g, h_cur - h_prev)


def _identity(kind: str, layer: int, tensor: DenseMatrix) -> DenseMatrix:
    return tensor


def bdmm_step(
    g: Graph,
    h_prev: DenseMatrix,
    x: DenseMatrix,
    state: SmpState,
    cfg: SmpConfig,
    layer: int = 1,
    quantize: Optional[QuantizeHook] = None,
) -> tuple[DenseMatrix, SmpState]:
    """
    One denoising step with the smoothness correction:

        H̄ = (1 - (1+μ)η) H + μη ÃH + ηX
        H' = H̄ + 2ηλ (I - Ã)(H̄ - H)

    followed by the slack and multiplier updates.
    """

    hook = quantize or _identity
    eta, mu = cfg.step, cfg.mu
    h_prev = np.asarray(h_prev, dtype=np.float64)
    agg = hook("aggregate", layer, spmm(g, h_prev))
    hbar = (1.0 - (1.0 + mu) * eta) * h_prev + mu * eta * agg + eta * x
    hbar = hook("denoise", layer, hbar)
    d = hbar - h_prev
    h_next = hbar + 2.0 * eta * state.lam * (d - spmm(g, d))
    h_next = hook("update", layer, h_next)

    if not np.all(np.isfinite(h_next)):
        raise handler.error("propagation produced NaN or Inf", f"layer {layer}", ErrorCode.DIVERGED)
    state.advance(layer_smoothness(g, h_next, h_prev), cfg, layer)
    if state.trajectory is not None:
        state.trajectory.append(h_next)
    return h_next, state


def propagate(
    g: Graph,
    x: DenseMatrix,
    cfg: SmpConfig,
    quantize: Optional[QuantizeHook] = None,
    keep_trajectory: bool = False,
) -> tuple[DenseMatrix, SmpState]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != g.n:
        raise handler.error(f"features must have {g.n} rows, got shape {x.shape}", code=ErrorCode.SHAPE)
    state = SmpState.initial(g, cfg, keep_trajectory)
    if state.trajectory is not None:
        state.trajectory.append(x)
    h = x
    for layer in range(1, cfg.layers + 1):
        h, state = bdmm_step(g, h, x, state, cfg, layer, quantize)
    return h, state


def mean_smoothness(trace: Sequence[float]) -> float:
    """S̄ over layers 2..L"""
    if len(trace) < 2:
        raise handler.error(
            f"mean smoothness needs at least two layers, got {len(trace)}", code=ErrorCode.INPUT
        )
    return float(np.mean(trace[1:]))


class ErrorBoundCheck(NamedTuple):
    layer: int
    bound: float
    holds: bool
    f_e: float
    eigen_gap: float


def error_bound(
    g: Graph,
    h_l: DenseMatrix,
    x_q: DenseMatrix,
    l: int,
    delta: float,
    h_lq: Optional[DenseMatrix] = None,
) -> ErrorBoundCheck:
    """
    Compare the measured error ‖H^l - H^{l,q}‖² with l·δ·tr(Λ⁺) + ‖H^l - X^q‖²,
    where tr(Λ⁺) sums reciprocals of the non-zero Laplacian eigenvalues.
    """

    h_l = np.asarray(h_l, dtype=np.float64)
    h_lq = h_l if h_lq is None else np.asarray(h_lq, dtype=np.float64)
    trace, gap = pinv_trace(g)
    bound = l * delta * trace + float(np.sum((h_l - x_q) ** 2))
    f_e = float(np.sum((h_l - h_lq) ** 2))
    holds = f_e <= bound * (1.0 + 1e-12) + 1e-12
    if not holds:
        logger.warning(f"layer {l}: quantization error {f_e:.6g} exceeds bound {bound:.6g} (eigen-gap {gap:.3g})")
    return ErrorBoundCheck(l, bound, holds, f_e, gap)


def fake_quantize_observed(tensor: DenseMatrix, bits: int) -> DenseMatrix:
    """Fake-quantize with the tensor's own min/max range and γ = 1."""
    alpha, beta = observe_range(tensor)
    return fake_quantize(tensor, QuantParams(alpha, beta), QuantConfig(bits))


def verify_error_bound(g: Graph, x: DenseMatrix, cfg: SmpConfig, bits: int) -> list[ErrorBoundCheck]:
    """
    Run full-precision and quantized propagation from the same input and check
    the error bound at every layer, the input layer included.
    """

    x = np.asarray(x, dtype=np.float64)
    x_q = fake_quantize_observed(x, bits)

    def quantize(kind: str, layer: int, tensor: DenseMatrix) -> DenseMatrix:
        return fake_quantize_observed(tensor, bits)

    _, fp = propagate(g, x, cfg, keep_trajectory=True)
    _, q = propagate(g, x_q, cfg, quantize=quantize, keep_trajectory=True)
    delta = cfg.budget(g)
    return [
        error_bound(g, h, x_q, l, delta, hq)
        for l, (h, hq) in enumerate(zip(fp.trajectory, q.trajectory))
    ]
