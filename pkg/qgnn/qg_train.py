from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from qgnn.qg_data import GraphBundle
from qgnn.qg_env import ExperimentConfig
from qgnn.qg_error import ErrorCode, QGError
from qgnn.qg_handler import handler, logger
from qgnn.qg_models import Model, QuantMode, forward, load_state, model_state
from qgnn.qg_optim import Adam, ParamGroup
from qgnn.qg_tape import Tape
from qgnn.objs.qg_truncation import MomentReport
from qgnn.utils import rng

GAMMA_BOUNDS = (1e-3, 10.0)


@dataclass(frozen=True)
class TrainSettings:
    lr: float = 0.01
    wd: float = 5e-4
    lr_gamma: float = 0.001
    wd_gamma: float = 1e-4
    epochs: int = 200
    seed: int = 0
    log_every: int = 20

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "TrainSettings":
        return cls(cfg.lr, cfg.wd, cfg.lr_gamma, cfg.wd_gamma, cfg.epochs, cfg.seed, cfg.log_every)


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    train_acc: float
    val_acc: float
    test_acc: float
    mean_smoothness: Optional[float] = None
    lam: Optional[float] = None
    smoothness: list[float] = field(default_factory=list)
    lambdas: list[float] = field(default_factory=list)
    constraint: list[float] = field(default_factory=list)
    ranges: dict[str, float] = field(default_factory=dict)
    moments: dict[str, MomentReport] = field(default_factory=dict)


@dataclass
class TrainResult:
    model: Model
    history: list[EpochMetrics]
    best_epoch: Optional[int]

    @property
    def best(self) -> Optional[EpochMetrics]:
        if self.best_epoch is None:
            return None
        return next(m for m in self.history if m.epoch == self.best_epoch)


def accuracy(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise handler.error("accuracy over an empty mask", code=ErrorCode.EMPTY)
    pred = np.argmax(logits, axis=1)
    return float(np.mean(pred[mask] == np.asarray(labels)[mask]))


def evaluate(model: Model, bundle: GraphBundle, mask: np.ndarray, mode: Optional[QuantMode] = None) -> float:
    """Accuracy over `mask`; deterministic, dropout off"""
    logits = forward(model, bundle.graph, bundle.features, mode).logits.value
    return accuracy(logits, bundle.labels, mask)


def optimizer_for(model: Model, settings: TrainSettings) -> Adam:
    groups = [ParamGroup(list(model.weights), settings.lr, settings.wd)]
    if not model.mode.is_fp:
        groups.append(ParamGroup(model.hooks.gammas(), settings.lr_gamma, settings.wd_gamma, clamp=GAMMA_BOUNDS))
    return Adam(groups)


def _snapshot(model: Model) -> dict[str, np.ndarray]:
    return {key: np.array(value) for key, value in model_state(model).items()}


def _epoch_metrics(model: Model, bundle: GraphBundle, epoch: int, loss: float) -> EpochMetrics:
    fwd = forward(model, bundle.graph, bundle.features)
    logits, s = fwd.logits.value, bundle.splits
    metrics = EpochMetrics(
        epoch,
        loss,
        accuracy(logits, bundle.labels, s.train),
        accuracy(logits, bundle.labels, s.val),
        accuracy(logits, bundle.labels, s.test),
        fwd.mean_smoothness,
        smoothness=list(fwd.smoothness),
    )
    if fwd.state is not None:
        metrics.lam = fwd.state.lam
        metrics.lambdas = list(fwd.state.lambdas)
        metrics.constraint = list(fwd.state.constraint)
    for hook in model.hooks:
        if hook.range_width is not None:
            metrics.ranges[hook.tag] = hook.range_width
        if (report := hook.moments()) is not None:
            metrics.moments[hook.tag] = report
    return metrics


def train(model: Model, bundle: GraphBundle, settings: TrainSettings = TrainSettings()) -> TrainResult:
    """
    Full-batch training with masked cross-entropy. Weights and range scales are
    updated by separate Adam groups; the returned model holds the parameters of
    the epoch with the best validation accuracy (earliest on ties).
    """

    if bundle.splits is None:
        raise handler.error(f"bundle {bundle.name} has no splits", code=ErrorCode.STATE)
    bundle.splits.check_nonempty()
    g, features, labels = bundle.graph, bundle.features, bundle.labels

    optimizer = optimizer_for(model, settings)
    history: list[EpochMetrics] = []
    best_val, best_epoch, best_state = -1.0, None, None

    for epoch in range(1, settings.epochs + 1):
        tape = Tape(rng(settings.seed, 3, epoch), training=True)
        fwd = forward(model, g, features, tape=tape)
        loss = tape.cross_entropy(fwd.logits, labels, bundle.splits.train)
        loss_value = float(loss.value[0, 0])
        if not np.isfinite(loss_value):
            raise handler.error("loss is not finite", f"epoch {epoch}", ErrorCode.DIVERGED)

        optimizer.zero_grad()
        tape.backward(loss)
        try:
            optimizer.step()
        except QGError as e:
            raise handler.within(e, f"epoch {epoch}") from e

        metrics = _epoch_metrics(model, bundle, epoch, loss_value)
        history.append(metrics)
        if metrics.val_acc > best_val:
            best_val, best_epoch, best_state = metrics.val_acc, epoch, _snapshot(model)

        if settings.log_every and (epoch % settings.log_every == 0 or epoch == 1):
            logger.info(
                f"epoch {epoch:03d} | loss {loss_value:.4f} | train {metrics.train_acc:.3f} | "
                f"val {metrics.val_acc:.3f} | test {metrics.test_acc:.3f}"
            )

    if best_state is not None:
        load_state(model, best_state)
        logger.info(f"best epoch {best_epoch} | val {best_val:.3f}")
    return TrainResult(model, history, best_epoch)


def save_checkpoint(path: str | Path, model: Model, config_text: str) -> Path:
    path = Path(path)
    arrays = dict(model_state(model))
    arrays["meta/kind"] = np.array(model.kind)
    arrays["meta/config"] = np.array(config_text)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            np.savez(f, **arrays)
    except OSError as e:
        raise handler.error(f"cannot write checkpoint {path}: {e.strerror}", code=ErrorCode.IO)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], str]:
    """State arrays and the config text of a checkpoint."""
    path = Path(path)
    if not path.exists():
        raise handler.error(f"checkpoint {path} does not exist", code=ErrorCode.STATE)
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {key: data[key] for key in data.files}
    except (OSError, ValueError) as e:
        raise handler.error(f"cannot read checkpoint {path}: {e}", code=ErrorCode.FORMAT)
    if "meta/config" not in arrays:
        raise handler.error(f"{path} is not a qgnn checkpoint", code=ErrorCode.FORMAT)
    config = str(arrays.pop("meta/config"))
    arrays.pop("meta/kind", None)
    return arrays, config
