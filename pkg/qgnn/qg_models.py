from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Optional, Union

import numpy as np

from qgnn.qg_env import ELEMENT_CLASSES, ExperimentConfig
from qgnn.qg_error import ErrorCode, QGError
from qgnn.qg_graph import Graph
from qgnn.qg_handler import handler
from qgnn.qg_optim import Param
from qgnn.qg_smp import SmpConfig, SmpState, layer_smoothness
from qgnn.qg_tape import FakeQuantAttr, Tape, TapeNode
from qgnn.objs.qg_quantizer import QuantConfig, observe_range
from qgnn.objs.qg_truncation import MomentReport, TruncationSpec, moments
from qgnn.utils import rng

# element class of each tag suffix
SUFFIX_CLASS = {
    "input": "input",
    "weight": "weight",
    "message": "message",
    "aggregate": "aggregate",
    "denoise": "update",
    "update": "update",
}


@dataclass(frozen=True)
class QuantMode:
    """
    fp: no quantization. qat: fake-quantize every hook at `bits`.
    qat-bt: fake-quantize at `source_bits` and truncate to `bits` (BT, or BT*
    when `star`) for the element classes in `bt_classes`; the other classes
    are quantized at `bits` directly.
    """

    kind: str = "fp"
    bits: Optional[int] = None
    source_bits: int = 8
    star: bool = False
    bt_classes: tuple[str, ...] = ELEMENT_CLASSES

    @classmethod
    def fp(cls) -> "QuantMode":
        return cls()

    @classmethod
    def qat(cls, bits: int) -> "QuantMode":
        QuantConfig(bits)
        return cls("qat", bits)

    @classmethod
    def qat_bt(
        cls,
        bits: int,
        source_bits: int = 8,
        star: bool = False,
        bt_classes: tuple[str, ...] = ELEMENT_CLASSES,
    ) -> "QuantMode":
        TruncationSpec(source_bits, bits)
        return cls("qat-bt", bits, source_bits, star, tuple(bt_classes))

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "QuantMode":
        if cfg.quant_bits is None:
            return cls.fp()
        if cfg.bt == "off":
            return cls.qat(cfg.quant_bits)
        return cls.qat_bt(cfg.quant_bits, cfg.bt_source_bits, cfg.bt == "bt-star", cfg.bt_classes)

    @property
    def is_fp(self) -> bool:
        return self.kind == "fp"

    def resolve(self, element: str) -> tuple[QuantConfig, Optional[TruncationSpec]]:
        if self.kind == "qat-bt" and element in self.bt_classes:
            return QuantConfig(self.source_bits), TruncationSpec(self.source_bits, self.bits)
        return QuantConfig(self.bits), None

    def label(self) -> str:
        match self.kind:
            case "fp":
                return "FP"
            case "qat":
                return f"INT{self.bits}"
            case _:
                return f"INT{self.bits}-{self.source_bits}{'*' if self.star else ''}"


@dataclass(eq=False)
class QuantHook:
    """
    Quantization state of one tensor. Until frozen, the range is re-observed on
    every pass; `last_input` keeps the latest pre-quantization tensor for
    diagnostics.
    """

    tag: str
    gamma: Param
    alpha: Optional[float] = None
    beta: Optional[float] = None
    frozen: bool = False
    last_input: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def element(self) -> str:
        return SUFFIX_CLASS[self.tag.rsplit(".", 1)[1]]

    @property
    def range_width(self) -> Optional[float]:
        return None if self.alpha is None else self.beta - self.alpha

    def observe(self, value: np.ndarray) -> None:
        self.last_input = value
        if not self.frozen:
            try:
                self.alpha, self.beta = observe_range(value)
            except QGError as e:
                raise handler.within(e, self.tag) from e

    def apply(self, tape: Tape, node: TapeNode, mode: QuantMode) -> TapeNode:
        self.observe(node.value)
        if mode.is_fp:
            return node
        if self.alpha is None:
            raise handler.error("range was never observed", self.tag, ErrorCode.STATE)
        qc, truncation = mode.resolve(self.element)
        spec = FakeQuantAttr(qc, self.alpha, self.beta, truncation, mode.star)
        return tape.fake_quantize(node, tape.leaf(self.gamma), spec)

    def freeze(self) -> None:
        if self.alpha is None:
            raise handler.error("cannot freeze a range that was never observed", self.tag, ErrorCode.STATE)
        self.frozen = True

    def moments(self) -> Optional[MomentReport]:
        if self.last_input is None:
            return None
        try:
            return moments(self.last_input)
        except QGError:
            return None


class QuantHookSet:
    """Hooks of one model, keyed by tag, in creation order."""

    def __init__(self, tags: list[str], gamma0: float = 1.0):
        self.hooks: dict[str, QuantHook] = {
            tag: QuantHook(tag, Param(f"gamma/{tag}", np.full((1, 1), float(gamma0)))) for tag in tags
        }

    def __getitem__(self, tag: str) -> QuantHook:
        try:
            return self.hooks[tag]
        except KeyError:
            raise handler.error(f"no quantization hook '{tag}'", code=ErrorCode.STATE)

    def __iter__(self) -> Iterator[QuantHook]:
        return iter(self.hooks.values())

    def __len__(self) -> int:
        return len(self.hooks)

    def gammas(self) -> list[Param]:
        return [hook.gamma for hook in self]

    def freeze(self) -> None:
        for hook in self:
            hook.freeze()

    def unfreeze(self) -> None:
        for hook in self:
            hook.frozen = False

    @property
    def frozen(self) -> bool:
        return all(hook.frozen for hook in self)


def glorot(random: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return random.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass(eq=False)
class GcnModel:
    weights: list[Param]
    hooks: QuantHookSet
    mode: QuantMode = field(default_factory=QuantMode.fp)
    dropout: float = 0.5

    kind = "gcn"

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].value.shape[0]] + [w.value.shape[1] for w in self.weights]

    @property
    def layers(self) -> int:
        return len(self.weights)

    @staticmethod
    def tags(layers: int) -> list[str]:
        tags = []
        for l in range(layers):
            tags += [f"layer{l}.input", f"layer{l}.weight", f"layer{l}.message"]
            if l < layers - 1:
                tags += [f"layer{l}.aggregate", f"layer{l}.update"]
        return tags


@dataclass(eq=False)
class SmpModel:
    w1: Param
    w2: Param
    cfg: SmpConfig
    hooks: QuantHookSet
    mode: QuantMode = field(default_factory=QuantMode.fp)
    dropout: float = 0.5

    kind = "smp"

    @property
    def weights(self) -> list[Param]:
        return [self.w1, self.w2]

    @property
    def dims(self) -> list[int]:
        return [self.w1.value.shape[0], self.w1.value.shape[1], self.w2.value.shape[1]]

    @property
    def layers(self) -> int:
        return self.cfg.layers

    @staticmethod
    def tags(layers: int) -> list[str]:
        tags = ["mlp1.input", "mlp1.weight", "mlp1.update", "mlp2.input", "mlp2.weight"]
        if layers > 0:
            tags.append("mlp2.message")
        for l in range(1, layers + 1):
            tags += [f"prop{l}.aggregate", f"prop{l}.denoise"]
            if l < layers:
                tags.append(f"prop{l}.update")
        return tags


Model = Union[GcnModel, SmpModel]


def build_gcn(dims: list[int], seed: int = 0, gamma0: float = 1.0, dropout: float = 0.5, mode=None) -> GcnModel:
    if len(dims) < 2:
        raise handler.error("a GCN needs input and output dimensions")
    random = rng(seed, 0)
    weights = [Param(f"W{l}", glorot(random, dims[l], dims[l + 1])) for l in range(len(dims) - 1)]
    hooks = QuantHookSet(GcnModel.tags(len(weights)), gamma0)
    return GcnModel(weights, hooks, mode or QuantMode.fp(), dropout)


def build_smp(
    d_in: int, hidden: int, classes: int, cfg: SmpConfig, seed: int = 0, gamma0: float = 1.0, dropout: float = 0.5, mode=None
) -> SmpModel:
    random = rng(seed, 0)
    w1 = Param("W1", glorot(random, d_in, hidden))
    w2 = Param("W2", glorot(random, hidden, classes))
    return SmpModel(w1, w2, cfg, QuantHookSet(SmpModel.tags(cfg.layers), gamma0), mode or QuantMode.fp(), dropout)


def smp_config(cfg: ExperimentConfig) -> SmpConfig:
    return SmpConfig(
        mu=cfg.mu,
        delta0=cfg.delta0,
        layers=cfg.layers,
        eta_h=cfg.eta_h,
        eta_lambda=cfg.eta_lambda,
        eta_s=cfg.eta_s,
        lambda0=cfg.lambda0,
        slack0=cfg.slack0,
    )


def build_model(cfg: ExperimentConfig, d_in: int, classes: int) -> Model:
    mode = QuantMode.from_config(cfg)
    if cfg.model == "gcn":
        dims = [d_in] + [cfg.hidden] * (cfg.layers - 1) + [classes]
        return build_gcn(dims, cfg.seed, cfg.gamma0, cfg.dropout, mode)
    return build_smp(d_in, cfg.hidden, classes, smp_config(cfg), cfg.seed, cfg.gamma0, cfg.dropout, mode)


class Forward(NamedTuple):
    logits: TapeNode
    tape: Tape
    smoothness: list[float]
    state: Optional[SmpState] = None

    @property
    def mean_smoothness(self) -> Optional[float]:
        if self.state is not None:
            return self.state.mean
        return float(np.mean(self.smoothness)) if self.smoothness else None


def _check_features(model: Model, g: Graph, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != g.n:
        raise handler.error(f"features must have {g.n} rows, got shape {features.shape}", code=ErrorCode.SHAPE)
    if features.shape[1] != model.dims[0]:
        raise handler.error(
            f"model expects {model.dims[0]} input features, got {features.shape[1]}", code=ErrorCode.SHAPE
        )
    return features


def gcn_forward(
    model: GcnModel, g: Graph, features, mode: Optional[QuantMode] = None, tape: Optional[Tape] = None
) -> Forward:
    mode = mode or model.mode
    tape = tape or Tape(training=False)
    features = _check_features(model, g, features)
    hooks = model.hooks

    h = tape.constant(features)
    hidden: list[np.ndarray] = []
    for l, w in enumerate(model.weights):
        last = l == model.layers - 1
        h = tape.dropout(h, model.dropout)
        h = hooks[f"layer{l}.input"].apply(tape, h, mode)
        wq = hooks[f"layer{l}.weight"].apply(tape, tape.leaf(w), mode)
        m = hooks[f"layer{l}.message"].apply(tape, tape.matmul(h, wq), mode)
        h = tape.spmm(g, m)
        if not last:
            h = hooks[f"layer{l}.aggregate"].apply(tape, h, mode)
            h = hooks[f"layer{l}.update"].apply(tape, tape.relu(h), mode)
            hidden.append(h.value)

    smoothness = [
        layer_smoothness(g, cur, prev) for prev, cur in zip(hidden, hidden[1:]) if cur.shape == prev.shape
    ]
    return Forward(h, tape, smoothness)


def smp_forward(
    model: SmpModel, g: Graph, features, mode: Optional[QuantMode] = None, tape: Optional[Tape] = None
) -> Forward:
    mode = mode or model.mode
    tape = tape or Tape(training=False)
    features = _check_features(model, g, features)
    hooks, cfg = model.hooks, model.cfg

    h = tape.dropout(tape.constant(features), model.dropout)
    h = hooks["mlp1.input"].apply(tape, h, mode)
    w1 = hooks["mlp1.weight"].apply(tape, tape.leaf(model.w1), mode)
    h = hooks["mlp1.update"].apply(tape, tape.relu(tape.matmul(h, w1)), mode)
    h = tape.dropout(h, model.dropout)
    h = hooks["mlp2.input"].apply(tape, h, mode)
    w2 = hooks["mlp2.weight"].apply(tape, tape.leaf(model.w2), mode)
    x = tape.matmul(h, w2)
    if cfg.layers == 0:
        return Forward(x, tape, [], SmpState.initial(g, cfg))
    x = hooks["mlp2.message"].apply(tape, x, mode)

    eta, mu = cfg.step, cfg.mu
    state = SmpState.initial(g, cfg)
    h = x
    for l in range(1, cfg.layers + 1):
        agg = hooks[f"prop{l}.aggregate"].apply(tape, tape.spmm(g, h), mode)
        hbar = tape.add(
            tape.add(tape.scale(h, 1.0 - (1.0 + mu) * eta), tape.scale(agg, mu * eta)),
            tape.scale(x, eta),
        )
        hbar = hooks[f"prop{l}.denoise"].apply(tape, hbar, mode)
        nxt = tape.bdmm_propagate(g, hbar, h, eta, state.lam)
        if l < cfg.layers:
            nxt = hooks[f"prop{l}.update"].apply(tape, nxt, mode)
        if not np.all(np.isfinite(nxt.value)):
            raise handler.error("propagation produced NaN or Inf", f"layer {l}", ErrorCode.DIVERGED)
        state.advance(layer_smoothness(g, nxt.value, h.value), cfg, l)
        h = nxt
    return Forward(h, tape, list(state.smoothness), state)


def forward(model: Model, g: Graph, features, mode: Optional[QuantMode] = None, tape: Optional[Tape] = None) -> Forward:
    match model:
        case GcnModel():
            return gcn_forward(model, g, features, mode, tape)
        case SmpModel():
            return smp_forward(model, g, features, mode, tape)
    raise handler.error(f"unknown model type {type(model).__name__}")


def predict_logits(model: Model, g: Graph, features, mode: Optional[QuantMode] = None) -> np.ndarray:
    return forward(model, g, features, mode).logits.value


def calibrate(model: Model, g: Graph, features, mode: Optional[QuantMode] = None) -> Model:
    """
    Observe every range on one deterministic pass, then freeze the hooks. Passing
    a quantized `mode` turns a full-precision model into a post-training
    quantized one.
    """

    if mode is not None:
        model.mode = mode
    model.hooks.unfreeze()
    forward(model, g, features)
    model.hooks.freeze()
    return model


def model_state(model: Model) -> dict[str, np.ndarray]:
    state = {f"weight/{w.name}": w.value for w in model.weights}
    for hook in model.hooks:
        state[f"gamma/{hook.tag}"] = hook.gamma.value
        if hook.alpha is not None:
            state[f"range/{hook.tag}"] = np.array([hook.alpha, hook.beta])
        state[f"frozen/{hook.tag}"] = np.array(hook.frozen)
    return state


def load_state(model: Model, state: dict[str, np.ndarray]) -> Model:
    for w in model.weights:
        key = f"weight/{w.name}"
        if key not in state:
            raise handler.error(f"checkpoint is missing '{key}'", code=ErrorCode.FORMAT)
        if state[key].shape != w.value.shape:
            raise handler.error(f"'{key}' has shape {state[key].shape}, expected {w.value.shape}", code=ErrorCode.SHAPE)
        w.value = np.array(state[key], dtype=np.float64)
    for hook in model.hooks:
        if (key := f"gamma/{hook.tag}") in state:
            hook.gamma.value = np.array(state[key], dtype=np.float64).reshape(1, 1)
        if (key := f"range/{hook.tag}") in state:
            hook.alpha, hook.beta = (float(v) for v in state[key])
        else:
            hook.alpha = hook.beta = None
        hook.frozen = bool(state.get(f"frozen/{hook.tag}", False))
    return model
