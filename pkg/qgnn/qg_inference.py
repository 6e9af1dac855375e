import statistics
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from qgnn.qg_error import ErrorCode
from qgnn.qg_graph import Graph, spmm
from qgnn.qg_handler import handler, logger
from qgnn.qg_models import GcnModel, Model, SmpModel
from qgnn.qg_smp import SmpConfig, propagate
from qgnn.objs.qg_packing import PackedTensor, pack, row_bytes, unpack
from qgnn.objs.qg_quantizer import QuantConfig, QuantParams, effective_codes
from qgnn.objs.qg_truncation import TruncationSpec
from qgnn.objs.qg_ureg import ureg

MAGIC = b"QGNN"
VERSION = 1
FP_BITS = 32

FLAG_BT = 0b01
FLAG_BT_STAR = 0b10

HEADER = struct.Struct("<4sHBBBBHH")
SMP_PARAMS = struct.Struct("<7d")
BLOCK = struct.Struct("<BBBddddiIII")


class ModelKind(Enum):
    GCN = 0
    SMP = 1


class BlockKind(Enum):
    ACTIVATION = 0
    PACKED_WEIGHT = 1
    FLOAT_WEIGHT = 2


@dataclass(frozen=True, eq=False)
class Block:
    """
    One tensor of an exported model. Activation blocks carry only quantization
    parameters; weight blocks carry codes packed at `bits`, which dequantize as
    step · (s₀ · code - zero_point) with s₀ the truncation scale from
    `source_bits` to `bits` (1 without truncation).
    """

    tag: str
    kind: BlockKind
    bits: int
    source_bits: int
    alpha: float
    beta: float
    gamma: float
    step: float
    zero_point: int
    rows: int = 0
    cols: int = 0
    payload: bytes = b""

    @property
    def truncation(self) -> Optional[TruncationSpec]:
        return TruncationSpec(self.source_bits, self.bits) if self.source_bits != self.bits else None

    @property
    def qp(self) -> QuantParams:
        return QuantParams(self.alpha, self.beta, self.gamma)

    @property
    def qc(self) -> QuantConfig:
        return QuantConfig(self.source_bits)

    def expected_payload(self) -> int:
        match self.kind:
            case BlockKind.ACTIVATION:
                return 0
            case BlockKind.PACKED_WEIGHT:
                return self.rows * row_bytes(self.cols, self.bits)
            case BlockKind.FLOAT_WEIGHT:
                return self.rows * self.cols * 4

    def to_bytes(self) -> bytes:
        tag = self.tag.encode("utf-8")
        return (
            struct.pack("<H", len(tag))
            + tag
            + BLOCK.pack(
                self.kind.value,
                self.bits,
                self.source_bits,
                self.alpha,
                self.beta,
                self.gamma,
                self.step,
                self.zero_point,
                self.rows,
                self.cols,
                len(self.payload),
            )
            + self.payload
        )

    def weight_codes(self) -> np.ndarray:
        """Codes on the `source_bits` grid"""
        packed = PackedTensor(
            self.bits,
            self.rows,
            self.cols,
            np.frombuffer(self.payload, dtype=np.uint8).reshape(self.rows, row_bytes(self.cols, self.bits)),
        )
        codes = unpack(packed)
        if (spec := self.truncation) is not None:
            codes = codes * int(round(spec.scale))
        return codes

    def float_weight(self) -> np.ndarray:
        return np.frombuffer(self.payload, dtype="<f4").reshape(self.rows, self.cols).astype(np.float64)


@dataclass(frozen=True, eq=False)
class QuantizedModel:
    kind: ModelKind
    bits: int
    source_bits: int
    flags: int
    dims: tuple[int, ...]
    layers: int
    blocks: dict[str, Block] = field(default_factory=dict)
    smp: Optional[SmpConfig] = None

    @property
    def is_fp(self) -> bool:
        return self.bits == FP_BITS

    @property
    def star(self) -> bool:
        return bool(self.flags & FLAG_BT_STAR)

    @property
    def weight_bytes(self) -> int:
        return sum(len(b.payload) for b in self.blocks.values() if b.kind is not BlockKind.ACTIVATION)

    @cached_property
    def raw(self) -> bytes:
        return self.to_bytes()

    @property
    def nbytes(self) -> int:
        return len(self.raw)

    @cached_property
    def weights(self) -> dict[str, tuple[np.ndarray, float, int]]:
        """tag -> (integer codes or float matrix, step, zero point)"""
        out = {}
        for tag, b in self.blocks.items():
            match b.kind:
                case BlockKind.PACKED_WEIGHT:
                    out[tag] = (b.weight_codes(), b.step, b.zero_point)
                case BlockKind.FLOAT_WEIGHT:
                    out[tag] = (b.float_weight(), 1.0, 0)
        return out

    def to_bytes(self) -> bytes:
        parts = [
            HEADER.pack(MAGIC, VERSION, self.kind.value, self.flags, self.bits, self.source_bits, self.layers, len(self.dims)),
            struct.pack(f"<{len(self.dims)}I", *self.dims),
        ]
        if self.kind is ModelKind.SMP:
            c = self.smp
            parts.append(SMP_PARAMS.pack(c.mu, c.step, c.eta_lambda, c.eta_s, c.delta0, c.lambda0, c.slack0))
        parts.append(struct.pack("<I", len(self.blocks)))
        parts += [b.to_bytes() for b in self.blocks.values()]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "QuantizedModel":
        reader = _Reader(raw)
        magic, version, kind, flags, bits, source_bits, layers, n_dims = reader.unpack(HEADER)
        if magic != MAGIC:
            raise handler.error(f"bad magic {magic!r}", code=ErrorCode.FORMAT)
        if version != VERSION:
            raise handler.error(f"unsupported format version {version}", code=ErrorCode.FORMAT)
        try:
            kind = ModelKind(kind)
        except ValueError:
            raise handler.error(f"unknown model kind {kind}", code=ErrorCode.FORMAT)
        dims = reader.unpack(struct.Struct(f"<{n_dims}I"))
        smp = None
        if kind is ModelKind.SMP:
            mu, eta_h, eta_lambda, eta_s, delta0, lambda0, slack0 = reader.unpack(SMP_PARAMS)
            smp = SmpConfig(mu, delta0, layers, eta_h, eta_lambda, eta_s, lambda0, slack0)

        blocks: dict[str, Block] = {}
        (count,) = reader.unpack(struct.Struct("<I"))
        for _ in range(count):
            (tag_len,) = reader.unpack(struct.Struct("<H"))
            tag = reader.take(tag_len).decode("utf-8")
            bkind, bbits, bsrc, alpha, beta, gamma, step, zp, rows, cols, length = reader.unpack(BLOCK)
            try:
                bkind = BlockKind(bkind)
            except ValueError:
                raise handler.error(f"unknown block kind {bkind}", tag, ErrorCode.FORMAT)
            block = Block(tag, bkind, bbits, bsrc, alpha, beta, gamma, step, zp, rows, cols, reader.take(length))
            if length != block.expected_payload():
                raise handler.error(
                    f"payload of {length} bytes, expected {block.expected_payload()}", tag, ErrorCode.FORMAT
                )
            blocks[tag] = block
        if reader.remaining:
            raise handler.error(f"{reader.remaining} trailing bytes", code=ErrorCode.FORMAT)
        return cls(kind, bits, source_bits, flags, tuple(dims), layers, blocks, smp)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    @property
    def remaining(self) -> int:
        return len(self.raw) - self.pos

    def take(self, size: int) -> bytes:
        if size > self.remaining:
            raise handler.error(
                f"file truncated: need {size} bytes at offset {self.pos}, {self.remaining} left",
                code=ErrorCode.FORMAT,
            )
        chunk = self.raw[self.pos : self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: struct.Struct) -> tuple:
        return fmt.unpack(self.take(fmt.size))


# export


def _weight_param(model: Model, tag: str) -> np.ndarray:
    match model:
        case GcnModel():
            return model.weights[int(tag.removeprefix("layer").split(".")[0])].value
        case SmpModel():
            return model.w1.value if tag.startswith("mlp1") else model.w2.value


def _weight_tags(model: Model) -> list[str]:
    match model:
        case GcnModel():
            return [f"layer{l}.weight" for l in range(model.layers)]
        case SmpModel():
            return ["mlp1.weight", "mlp2.weight"]


def export(model: Model) -> QuantizedModel:
    """
    Freeze a model into its deployable form. Quantized models must be calibrated
    (all ranges frozen); weights are stored as packed codes, activations as
    quantization parameters.
    """

    mode = model.mode
    kind = ModelKind.GCN if isinstance(model, GcnModel) else ModelKind.SMP
    smp = model.cfg if isinstance(model, SmpModel) else None
    blocks: dict[str, Block] = {}

    if mode.is_fp:
        for tag in _weight_tags(model):
            w = _weight_param(model, tag)
            payload = w.astype("<f4").tobytes()
            blocks[tag] = Block(tag, BlockKind.FLOAT_WEIGHT, FP_BITS, FP_BITS, 0.0, 0.0, 1.0, 1.0, 0, *w.shape, payload)
        return QuantizedModel(kind, FP_BITS, FP_BITS, 0, tuple(model.dims), model.layers, blocks, smp)

    if not model.hooks.frozen:
        raise handler.error("quantization ranges are not frozen; calibrate the model first", code=ErrorCode.STATE)

    flags = 0
    if mode.kind == "qat-bt":
        flags = FLAG_BT_STAR if mode.star else FLAG_BT
    for hook in model.hooks:
        qc, truncation = mode.resolve(hook.element)
        qp = QuantParams(hook.alpha, hook.beta, float(hook.gamma.value.reshape(-1)[0]))
        bits = truncation.bits if truncation else qc.bits
        params = (bits, qc.bits, hook.alpha, hook.beta, qp.gamma, qp.step(qc), qp.zero_point(qc))
        if hook.element != "weight":
            blocks[hook.tag] = Block(hook.tag, BlockKind.ACTIVATION, *params)
            continue
        w = _weight_param(model, hook.tag)
        codes = effective_codes(w, qp, qc, truncation, mode.star)
        if truncation is not None:
            codes = codes // int(round(truncation.scale))
        packed = pack(codes, bits)
        blocks[hook.tag] = Block(
            hook.tag, BlockKind.PACKED_WEIGHT, *params, packed.rows, packed.cols, packed.payload.tobytes()
        )

    source_bits = mode.source_bits if mode.kind == "qat-bt" else mode.bits
    qm = QuantizedModel(kind, mode.bits, source_bits, flags, tuple(model.dims), model.layers, blocks, smp)
    logger.debug(f"exported {mode.label()} model: {qm.nbytes} bytes, {qm.weight_bytes} weight payload")
    return qm


def write(qm: QuantizedModel, path: str | Path) -> int:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(qm.raw)
    except OSError as e:
        raise handler.error(f"cannot write {path}: {e.strerror}", code=ErrorCode.IO)
    return qm.nbytes


def load(path: str | Path) -> QuantizedModel:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise handler.error(f"cannot read {path}: {e.strerror}", code=ErrorCode.IO)
    return QuantizedModel.from_bytes(raw)


# inference


def _activation(qm: QuantizedModel, tag: str, u: np.ndarray) -> tuple[np.ndarray, np.ndarray, float, int]:
    """(dequantized values, codes, step, zero point) of an activation"""
    b = qm.blocks[tag]
    codes = effective_codes(u, b.qp, b.qc, b.truncation, qm.star)
    return b.step * (codes - b.zero_point), codes, b.step, b.zero_point


def _fq(qm: QuantizedModel, tag: str, u: np.ndarray) -> np.ndarray:
    if qm.is_fp or tag not in qm.blocks:
        return u
    return _activation(qm, tag, u)[0]


def integer_matmul(qa: np.ndarray, sa: float, za: int, qw: np.ndarray, sw: float, zw: int) -> np.ndarray:
    """
    s_a·s_w·(Qa·Qw - z_w·rowsum(Qa) - z_a·colsum(Qw) + K·z_a·z_w), equal to
    dequantize(Qa) @ dequantize(Qw).
    """

    k = qa.shape[1]
    wide = k * int(max(qa.max(initial=0), 1)) * int(max(qw.max(initial=0), 1)) >= 2**31
    acc_type = np.int64 if wide else np.int32
    acc = (qa.astype(acc_type) @ qw.astype(acc_type)).astype(np.int64)
    acc -= zw * qa.sum(axis=1, dtype=np.int64)[:, None]
    acc -= za * qw.sum(axis=0, dtype=np.int64)[None, :]
    acc += k * za * zw
    return sa * sw * acc.astype(np.float64)


def _linear(qm: QuantizedModel, input_tag: str, weight_tag: str, h: np.ndarray) -> np.ndarray:
    w, sw, zw = qm.weights[weight_tag]
    if qm.is_fp:
        return h @ w
    _, qa, sa, za = _activation(qm, input_tag, h)
    return integer_matmul(qa, sa, za, w, sw, zw)


def infer_logits(qm: QuantizedModel, g: Graph, features) -> np.ndarray:
    h = np.asarray(features, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] != g.n:
        raise handler.error(f"features must have {g.n} rows, got shape {h.shape}", code=ErrorCode.SHAPE)
    if h.shape[1] != qm.dims[0]:
        raise handler.error(f"model expects {qm.dims[0]} features, got {h.shape[1]}", code=ErrorCode.SHAPE)

    if qm.kind is ModelKind.GCN:
        for l in range(qm.layers):
            m = _fq(qm, f"layer{l}.message", _linear(qm, f"layer{l}.input", f"layer{l}.weight", h))
            h = spmm(g, m)
            if l < qm.layers - 1:
                h = _fq(qm, f"layer{l}.aggregate", h)
                h = _fq(qm, f"layer{l}.update", np.maximum(h, 0.0))
        return h

    h = _fq(qm, "mlp1.update", np.maximum(_linear(qm, "mlp1.input", "mlp1.weight", h), 0.0))
    x = _linear(qm, "mlp2.input", "mlp2.weight", h)
    if qm.layers == 0:
        return x
    x = _fq(qm, "mlp2.message", x)

    def quantize(kind: str, layer: int, tensor: np.ndarray) -> np.ndarray:
        return _fq(qm, f"prop{layer}.{kind}", tensor)

    out, _ = propagate(g, x, qm.smp, quantize=quantize)
    return out


def infer(qm: QuantizedModel, g: Graph, features) -> np.ndarray:
    """Predicted class per node, lowest index on ties"""
    return np.argmax(infer_logits(qm, g, features), axis=1)


# benchmarking


class BenchReport(NamedTuple):
    bits: int
    latency: ureg.Quantity
    throughput: ureg.Quantity
    model_size: ureg.Quantity
    weight_size: ureg.Quantity

    def row(self) -> dict[str, float | int]:
        return {
            "bits": self.bits,
            "latency_ms": self.latency.to(ureg.millisecond).magnitude,
            "nodes_per_s": self.throughput.to(ureg.node / ureg.second).magnitude,
            "model_bytes": int(self.model_size.to(ureg.byte).magnitude),
            "weight_bytes": int(self.weight_size.to(ureg.byte).magnitude),
        }


def benchmark(
    qm: QuantizedModel, g: Graph, features, repeats: int = 10, warmup: int = 1, threads: int = 1
) -> BenchReport:
    """
    Median latency of `repeats` timed inference calls after `warmup` discarded
    ones. With threads > 1 the calls run concurrently and throughput counts
    all nodes processed over the wall time.
    """

    if repeats < 1:
        raise handler.error(f"repeats must be at least 1, got {repeats}")
    for _ in range(warmup):
        infer(qm, g, features)

    def timed(_=None) -> float:
        start = time.perf_counter()
        infer(qm, g, features)
        return time.perf_counter() - start

    wall = time.perf_counter()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            samples = list(pool.map(timed, range(repeats)))
    else:
        samples = [timed() for _ in range(repeats)]
    wall = time.perf_counter() - wall

    median = statistics.median(samples)
    per_second = g.n * repeats / wall if threads > 1 else g.n / median
    return BenchReport(
        qm.bits,
        ureg.Quantity(median, ureg.second).to(ureg.millisecond),
        ureg.Quantity(per_second, ureg.node / ureg.second),
        ureg.Quantity(qm.nbytes, ureg.byte),
        ureg.Quantity(qm.weight_bytes, ureg.byte),
    )


class SizeReport(NamedTuple):
    label: str
    total: ureg.Quantity
    weights: ureg.Quantity

    @property
    def megabytes(self) -> float:
        return self.total.to(ureg.megabyte).magnitude


def size_report(qm: QuantizedModel) -> SizeReport:
    label = "FP" if qm.is_fp else f"INT{qm.bits}"
    return SizeReport(label, ureg.Quantity(qm.nbytes, ureg.byte), ureg.Quantity(qm.weight_bytes, ureg.byte))
