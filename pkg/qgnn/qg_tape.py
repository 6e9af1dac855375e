from dataclasses import dataclass
from enum import Enum
from typing import Any, Optional, Sequence

import numpy as np

from qgnn.qg_error import ErrorCode
from qgnn.qg_graph import Graph
from qgnn.qg_handler import handler
from qgnn.qg_optim import Param
from qgnn.objs.qg_quantizer import QuantConfig, QuantParams, fake_quantize_array
from qgnn.objs.qg_truncation import TruncationSpec


class OpKind(Enum):
    LEAF = "leaf"
    CONST = "const"
    MATMUL = "matmul"
    SPMM = "spmm"
    ADD = "add"
    SCALE = "scale"
    RELU = "relu"
    DROPOUT = "dropout"
    FAKE_QUANTIZE = "fake-quantize"
    CROSS_ENTROPY = "cross-entropy"
    BDMM_PROPAGATE = "bdmm-propagate"


ARITY = {
    OpKind.MATMUL: 2,
    OpKind.SPMM: 1,
    OpKind.ADD: 2,
    OpKind.SCALE: 1,
    OpKind.RELU: 1,
    OpKind.DROPOUT: 1,
    OpKind.FAKE_QUANTIZE: 2,
    OpKind.CROSS_ENTROPY: 1,
    OpKind.BDMM_PROPAGATE: 2,
}


@dataclass(eq=False)
class TapeNode:
    id: int
    kind: OpKind
    value: np.ndarray
    parents: tuple[int, ...] = ()
    attr: Any = None
    grad: Optional[np.ndarray] = None
    param: Optional[Param] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


@dataclass(frozen=True)
class FakeQuantAttr:
    qc: QuantConfig
    alpha: float
    beta: float
    truncation: Optional[TruncationSpec] = None
    star: bool = False


class Tape:
    """
    Reverse-mode record of matrix operations. Nodes are appended in execution
    order, so the list itself is a topological order. A tape belongs to one
    training step and is discarded after `backward`.
    """

    def __init__(self, random: np.random.Generator | int = 0, training: bool = True):
        self.nodes: list[TapeNode] = []
        self.training = training
        self.random = random if isinstance(random, np.random.Generator) else np.random.default_rng(random)

    def __getitem__(self, idx: int) -> TapeNode:
        return self.nodes[idx]

    def _record(self, kind, value, parents=(), attr=None, param=None) -> TapeNode:
        node = TapeNode(len(self.nodes), kind, value, tuple(p.id for p in parents), attr, None, param)
        self.nodes.append(node)
        return node

    def leaf(self, param: Param) -> TapeNode:
        return self._record(OpKind.LEAF, param.value, param=param)

    def constant(self, value) -> TapeNode:
        return self._record(OpKind.CONST, np.asarray(value, dtype=np.float64))

    # forward

    def forward_op(self, kind: OpKind, inputs: Sequence[TapeNode], **attr) -> TapeNode:
        if kind not in ARITY:
            raise handler.error(f"unknown tape op '{kind}'")
        if len(inputs) != ARITY[kind]:
            raise handler.error(f"{kind.value} takes {ARITY[kind]} inputs, got {len(inputs)}")
        vals = [n.value for n in inputs]

        match kind:
            case OpKind.MATMUL:
                a, b = vals
                if a.shape[1] != b.shape[0]:
                    raise self._shape(kind, a, b)
                out = a @ b
                return self._record(kind, out, inputs)
            case OpKind.SPMM:
                g: Graph = attr["graph"]
                if vals[0].shape[0] != g.n:
                    raise self._shape(kind, vals[0])
                return self._record(kind, np.asarray(g.norm_adj @ vals[0]), inputs, g)
            case OpKind.ADD:
                a, b = vals
                if a.shape != b.shape:
                    raise self._shape(kind, a, b)
                return self._record(kind, a + b, inputs)
            case OpKind.SCALE:
                c = float(attr["factor"])
                return self._record(kind, c * vals[0], inputs, c)
            case OpKind.RELU:
                return self._record(kind, np.maximum(vals[0], 0.0), inputs)
            case OpKind.DROPOUT:
                p = float(attr.get("p", 0.0))
                if not 0.0 <= p < 1.0:
                    raise handler.error(f"dropout rate must be in [0, 1), got {p}")
                if not self.training or p == 0.0:
                    return self._record(kind, vals[0], inputs, None)
                keep = (self.random.random(vals[0].shape) >= p) / (1.0 - p)
                return self._record(kind, vals[0] * keep, inputs, keep)
            case OpKind.FAKE_QUANTIZE:
                u, gamma = vals
                spec: FakeQuantAttr = attr["spec"]
                qp = QuantParams(spec.alpha, spec.beta, float(gamma.reshape(-1)[0]))
                fq = fake_quantize_array(u, qp, spec.qc, spec.truncation, spec.star)
                return self._record(kind, fq.out, inputs, fq)
            case OpKind.CROSS_ENTROPY:
                return self._cross_entropy(inputs[0], attr["labels"], attr["mask"])
            case OpKind.BDMM_PROPAGATE:
                hbar, h = vals
                if hbar.shape != h.shape:
                    raise self._shape(kind, hbar, h)
                g = attr["graph"]
                k = 2.0 * float(attr["eta"]) * float(attr["lam"])
                d = hbar - h
                out = hbar + k * (d - np.asarray(g.norm_adj @ d))
                return self._record(kind, out, inputs, (g, k))

    def _cross_entropy(self, logits: TapeNode, labels, mask) -> TapeNode:
        z = logits.value
        labels = np.asarray(labels)
        mask = np.asarray(mask, dtype=bool)
        count = int(mask.sum())
        if count == 0:
            raise handler.error("cross-entropy over an empty mask", code=ErrorCode.EMPTY)
        shifted = z - z.max(axis=1, keepdims=True)
        log_prob = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        rows = np.flatnonzero(mask)
        loss = -log_prob[rows, labels[rows]].sum() / count
        return self._record(
            OpKind.CROSS_ENTROPY, np.array([[loss]]), (logits,), (np.exp(log_prob), labels, rows, count)
        )

    @staticmethod
    def _shape(kind: OpKind, *vals):
        shapes = ", ".join(str(v.shape) for v in vals)
        return handler.error(f"{kind.value}: incompatible shapes {shapes}", code=ErrorCode.SHAPE)

    # convenience wrappers

    def matmul(self, a, b):
        return self.forward_op(OpKind.MATMUL, (a, b))

    def spmm(self, g: Graph, h):
        return self.forward_op(OpKind.SPMM, (h,), graph=g)

    def add(self, a, b):
        return self.forward_op(OpKind.ADD, (a, b))

    def scale(self, a, factor: float):
        return self.forward_op(OpKind.SCALE, (a,), factor=factor)

    def relu(self, a):
        return self.forward_op(OpKind.RELU, (a,))

    def dropout(self, a, p: float):
        return self.forward_op(OpKind.DROPOUT, (a,), p=p)

    def fake_quantize(self, u, gamma, spec: FakeQuantAttr):
        return self.forward_op(OpKind.FAKE_QUANTIZE, (u, gamma), spec=spec)

    def cross_entropy(self, logits, labels, mask):
        return self.forward_op(OpKind.CROSS_ENTROPY, (logits,), labels=labels, mask=mask)

    def bdmm_propagate(self, g: Graph, hbar, h, eta: float, lam: float):
        return self.forward_op(OpKind.BDMM_PROPAGATE, (hbar, h), graph=g, eta=eta, lam=lam)

    # backward

    def backward(self, loss: TapeNode) -> dict[str, np.ndarray]:
        """
        Populate `grad` on every node that `loss` depends on and accumulate the
        gradients of parameter leaves into `Param.grad`.
        """

        if loss.value.shape != (1, 1):
            raise handler.error(
                f"backward needs a scalar loss, got shape {loss.value.shape}",
                code=ErrorCode.SHAPE,
            )
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones((1, 1))

        for node in reversed(self.nodes[: loss.id + 1]):
            if node.grad is None or not node.parents:
                continue
            for pid, grad in zip(node.parents, self._vjp(node)):
                if grad is None:
                    continue
                parent = self.nodes[pid]
                parent.grad = grad if parent.grad is None else parent.grad + grad

        grads: dict[str, np.ndarray] = {}
        for node in self.nodes:
            if node.param is not None and node.grad is not None:
                node.param.grad = node.grad if node.param.grad is None else node.param.grad + node.grad
                grads[node.param.name] = node.param.grad
        return grads

    def _vjp(self, node: TapeNode) -> tuple[Optional[np.ndarray], ...]:
        g = node.grad
        parents = [self.nodes[p] for p in node.parents]
        match node.kind:
            case OpKind.MATMUL:
                a, b = parents
                return g @ b.value.T, a.value.T @ g
            case OpKind.SPMM:
                return (np.asarray(node.attr.norm_adj.T @ g),)
            case OpKind.ADD:
                return g, g
            case OpKind.SCALE:
                return (node.attr * g,)
            case OpKind.RELU:
                return (g * (parents[0].value > 0.0),)
            case OpKind.DROPOUT:
                return (g if node.attr is None else g * node.attr,)
            case OpKind.FAKE_QUANTIZE:
                fq = node.attr
                return g * fq.in_range, np.array([[np.sum(g * fq.gamma_grad)]])
            case OpKind.CROSS_ENTROPY:
                prob, labels, rows, count = node.attr
                d = np.zeros_like(prob)
                d[rows] = prob[rows]
                d[rows, labels[rows]] -= 1.0
                return (g[0, 0] * d / count,)
            case OpKind.BDMM_PROPAGATE:
                graph, k = node.attr
                smooth = g - np.asarray(graph.norm_adj.T @ g)
                return g + k * smooth, -k * smooth
        return ()
