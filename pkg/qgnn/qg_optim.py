from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from qgnn.qg_error import ErrorCode
from qgnn.qg_handler import handler


@dataclass(eq=False)
class Param:
    """A trainable leaf. `value` is replaced (never mutated in place) by the optimizer."""

    name: str
    value: np.ndarray
    grad: Optional[np.ndarray] = None

    def zero_grad(self) -> None:
        self.grad = None


@dataclass(eq=False)
class ParamGroup:
    params: list[Param]
    lr: float
    wd: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clamp: Optional[tuple[float, float]] = None
    t: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


class Adam:
    """
    Adam with decoupled weight decay over independent parameter groups. Model
    weights and range scales live in different groups so each gets its own
    learning rate and decay.
    """

    def __init__(self, groups: Iterable[ParamGroup]):
        self.groups = list(groups)
        seen: set[int] = set()
        for group in self.groups:
            for p in group.params:
                if id(p) in seen:
                    raise handler.error(f"parameter '{p.name}' belongs to more than one group")
                seen.add(id(p))

    def zero_grad(self) -> None:
        for group in self.groups:
            for p in group.params:
                p.zero_grad()

    def step(self) -> None:
        adam_step(self.groups)


def adam_step(groups: Iterable[ParamGroup]) -> None:
    for group in groups:
        for p in group.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise handler.error(f"non-finite gradient for '{p.name}'", code=ErrorCode.DIVERGED)
        group.t += 1
        t = group.t
        for i, p in enumerate(group.params):
            grad = np.zeros_like(p.value) if p.grad is None else p.grad
            m = group.m.get(i, np.zeros_like(p.value))
            v = group.v.get(i, np.zeros_like(p.value))
            m = group.beta1 * m + (1.0 - group.beta1) * grad
            v = group.beta2 * v + (1.0 - group.beta2) * grad * grad
            group.m[i], group.v[i] = m, v
            m_hat = m / (1.0 - group.beta1**t)
            v_hat = v / (1.0 - group.beta2**t)
            value = p.value - group.lr * group.wd * p.value
            value = value - group.lr * m_hat / (np.sqrt(v_hat) + group.eps)
            if group.clamp is not None:
                value = np.clip(value, *group.clamp)
            p.value = value
