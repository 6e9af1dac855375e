from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, TypeVar

import numpy as np

from qgnn.qg_data import GraphBundle, convert_planetoid, load_or_generate, write_bundle
from qgnn.qg_env import BITS_CHOICES, ExperimentConfig
from qgnn.qg_error import ErrorCode
from qgnn.qg_handler import handler, logger
from qgnn.qg_inference import BenchReport, QuantizedModel, benchmark, export, infer, load, size_report, write
from qgnn.qg_metrics import write_dicts, write_manifest, write_metrics, write_moments, write_rows, write_smoothness
from qgnn.qg_models import Model, build_model, calibrate, forward, load_state
from qgnn.qg_train import TrainResult, TrainSettings, accuracy, evaluate, load_checkpoint, save_checkpoint, train
from qgnn.objs.qg_quantizer import DEFAULT_GAMMAS, SUPPORTED_BITS, GammaSweepRow, gamma_sweep

T = TypeVar("T")
R = TypeVar("R")

CHECKPOINT = "checkpoint.npz"


def _parallel(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> list[R]:
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def run_training(cfg: ExperimentConfig, bundle: Optional[GraphBundle] = None) -> tuple[TrainResult, GraphBundle]:
    bundle = bundle or load_or_generate(cfg)
    model = build_model(cfg, bundle.dim, bundle.classes)
    return train(model, bundle, TrainSettings.from_config(cfg)), bundle


def restore(cfg: ExperimentConfig, checkpoint: str | Path) -> tuple[Model, GraphBundle]:
    """Rebuild a model from a checkpoint using `cfg` for architecture and data."""
    state, _ = load_checkpoint(checkpoint)
    bundle = load_or_generate(cfg)
    return load_state(build_model(cfg, bundle.dim, bundle.classes), state), bundle


# train / eval / export / bench / gen


def cmd_train(cfg: ExperimentConfig, out_dir: str | Path) -> TrainResult:
    out = Path(out_dir)
    result, _ = run_training(cfg)
    text = cfg.to_text()
    save_checkpoint(out / CHECKPOINT, result.model, text)
    write_metrics(out / "metrics.csv", result.history)
    write_moments(out / "moments.csv", result.history)
    write_smoothness(out / "smoothness.csv", result.history)
    (out / "config.txt").write_text(text)
    write_manifest(out / "manifest.txt", text, cfg.seed, cfg.data_path)
    if (best := result.best) is not None:
        logger.info(f"test accuracy {best.test_acc:.4f} at epoch {best.epoch}")
    return result


@dataclass(frozen=True)
class EvalReport:
    label: str
    train: float
    val: float
    test: float


def cmd_eval(cfg: ExperimentConfig, checkpoint: Optional[str | Path] = None, model_file: Optional[str | Path] = None) -> EvalReport:
    bundle = load_or_generate(cfg)
    s = bundle.splits
    if model_file is not None:
        qm = load(model_file)
        pred = infer(qm, bundle.graph, bundle.features)
        onehot = np.eye(bundle.classes)[pred]
        label = size_report(qm).label
        return EvalReport(label, *(accuracy(onehot, bundle.labels, m) for m in (s.train, s.val, s.test)))
    if checkpoint is None:
        raise handler.error("eval needs a checkpoint or a model file", code=ErrorCode.STATE)
    model, bundle = restore(cfg, checkpoint)
    return EvalReport(model.mode.label(), *(evaluate(model, bundle, m) for m in (s.train, s.val, s.test)))


def cmd_export(cfg: ExperimentConfig, checkpoint: str | Path, out_file: str | Path) -> QuantizedModel:
    """Calibrate the restored model at the configured bit width and write it out."""
    model, bundle = restore(cfg, checkpoint)
    calibrate(model, bundle.graph, bundle.features)
    qm = export(model)
    write(qm, out_file)
    report = size_report(qm)
    logger.info(f"{report.label}: {report.total.to('megabyte'):.4f} ({report.weights} of weights)")
    return qm


def cmd_bench(
    cfg: ExperimentConfig,
    model_file: str | Path,
    repeats: int = 10,
    warmup: int = 1,
    threads: int = 1,
    csv_path: Optional[str | Path] = None,
) -> BenchReport:
    bundle = load_or_generate(cfg)
    report = benchmark(load(model_file), bundle.graph, bundle.features, repeats, warmup, threads)
    if csv_path is not None:
        write_dicts(csv_path, [report.row()])
    return report


def cmd_gen(cfg: ExperimentConfig, out_dir: str | Path) -> GraphBundle:
    bundle = load_or_generate(cfg.replace(data=""))
    write_bundle(bundle, out_dir)
    logger.info(f"wrote {bundle.name} to {out_dir}: {bundle.stats()}")
    return bundle


def cmd_convert(raw_dir: str | Path, name: str, out_dir: str | Path) -> GraphBundle:
    return convert_planetoid(raw_dir, name, out_dir)


# sweeps


def parse_grid(text: str, cast=int) -> list:
    try:
        items = [cast(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise handler.error(f"invalid grid '{text}'", code=ErrorCode.INPUT)
    if not items:
        raise handler.error("empty sweep grid", code=ErrorCode.INPUT)
    return items


def cmd_sweep_layers(
    cfg: ExperimentConfig,
    layers: Sequence[int],
    bits: Sequence[str],
    threads: int = 1,
    csv_path: Optional[str | Path] = None,
) -> list[dict]:
    """Best-checkpoint accuracy for every (layers, bits) cell"""
    for b in bits:
        if b not in BITS_CHOICES:
            raise handler.error(f"invalid bit width '{b}' in sweep grid", code=ErrorCode.INPUT)
    cells = [cfg.replace(layers=l, bits=b) for l in layers for b in bits]

    def run(cell: ExperimentConfig) -> dict:
        result, _ = run_training(cell)
        best = result.best
        return {
            "model": cell.model,
            "layers": cell.layers,
            "bits": cell.bits,
            "best_epoch": result.best_epoch,
            "val_acc": best and best.val_acc,
            "test_acc": best and best.test_acc,
            "mean_smoothness": best and best.mean_smoothness,
        }

    rows = _parallel(run, cells, threads)
    if csv_path is not None:
        write_dicts(csv_path, rows)
    return rows


def cmd_sweep_gamma(
    cfg: ExperimentConfig,
    checkpoint: str | Path,
    tag: Optional[str] = None,
    bits: Sequence[int] = SUPPORTED_BITS,
    gammas: Sequence[float] = DEFAULT_GAMMAS,
    csv_path: Optional[str | Path] = None,
) -> list[GammaSweepRow]:
    """Error curves over γ on one tensor of a trained model, by default its first aggregate output."""
    model, bundle = restore(cfg, checkpoint)
    forward(model, bundle.graph, bundle.features)
    if tag is None:
        tag = next((h.tag for h in model.hooks if h.element == "aggregate"), None)
        if tag is None:
            raise handler.error("model has no aggregate tensor to sweep", code=ErrorCode.INPUT)
    samples = model.hooks[tag].last_input
    rows = gamma_sweep(samples, bits, gammas)
    if csv_path is not None:
        write_rows(csv_path, ["tag", *GammaSweepRow._fields], ((tag, *r) for r in rows))
    return rows


# report tables


def report_stats(cfg: ExperimentConfig) -> list[dict]:
    bundle = load_or_generate(cfg)
    return [{"name": bundle.name, **bundle.stats()}]


def report_accuracy(cfg: ExperimentConfig, repeats: int = 10, bits: Sequence[str] = ("fp", "8", "4", "2"), threads: int = 1) -> list[dict]:
    """Mean and standard deviation of test accuracy over `repeats` seeded splits per bit width."""
    if cfg.epochs < 1:
        raise handler.error("epochs: the accuracy report needs at least one training epoch", code=ErrorCode.CONFIG)
    if repeats < 1:
        raise handler.error(f"repeats must be at least 1, got {repeats}", code=ErrorCode.INPUT)
    cells = [
        (b, cfg.replace(bits=b, bt=cfg.bt if b != "fp" else "off", seed=cfg.seed + r))
        for b in bits
        for r in range(repeats)
    ]
    scores = _parallel(lambda cell: run_training(cell[1])[0].best.test_acc, cells, threads)
    rows = []
    for b in bits:
        acc = np.array([s for (cb, _), s in zip(cells, scores) if cb == b]) * 100
        rows.append({"model": cfg.model, "layers": cfg.layers, "bits": b, "bt": cfg.bt, "repeats": repeats,
                     "mean": float(acc.mean()), "std": float(acc.std())})
    return rows


def report_smoothness(cfg: ExperimentConfig, threads: int = 1) -> list[dict]:
    """Final-epoch S̄ of SMP against a plain GCN of the same depth."""
    cells = [cfg.replace(model="smp"), cfg.replace(model="gcn")]

    def run(cell: ExperimentConfig) -> dict:
        result, _ = run_training(cell)
        last = result.history[-1] if result.history else None
        return {"model": cell.model, "layers": cell.layers, "bits": cell.bits,
                "mean_smoothness": last and last.mean_smoothness}

    return _parallel(run, cells, threads)


def report_normality(cfg: ExperimentConfig, window: int = 50, threads: int = 1) -> list[dict]:
    """Mean κ_N over the last `window` epochs, plain INT2 against BT*."""
    cells = [cfg.replace(bits="2", bt="off"), cfg.replace(bits="2", bt="bt-star")]

    def run(cell: ExperimentConfig) -> dict:
        result, _ = run_training(cell)
        tail = result.history[-window:]
        values = [r.kappa_n for m in tail for r in m.moments.values()]
        return {"bt": cell.bt, "epochs": len(tail), "mean_kappa_n": float(np.mean(values)) if values else None}

    return _parallel(run, cells, threads)


def report_size(cfg: ExperimentConfig, bits: Sequence[str] = ("fp", "8", "4", "2")) -> list[dict]:
    """Exported size of an untrained model at each bit width."""
    bundle = load_or_generate(cfg)
    rows, fp_weights = [], None
    for b in bits:
        cell = cfg.replace(bits=b, bt="off")
        model = calibrate(build_model(cell, bundle.dim, bundle.classes), bundle.graph, bundle.features)
        report = size_report(export(model))
        weights = int(report.weights.magnitude)
        fp_weights = fp_weights or (weights if b == "fp" else None)
        rows.append({"bits": b, "bytes": int(report.total.magnitude), "megabytes": report.megabytes,
                     "weight_bytes": weights, "reduction": fp_weights / weights if fp_weights else None})
    return rows


REPORTS = {
    "stats": report_stats,
    "accuracy": report_accuracy,
    "smoothness": report_smoothness,
    "normality": report_normality,
    "size": report_size,
}


def cmd_report(cfg: ExperimentConfig, kind: str, csv_path: Optional[str | Path] = None, **options) -> list[dict]:
    if kind not in REPORTS:
        raise handler.error(f"unknown report '{kind}', expected one of {', '.join(REPORTS)}", code=ErrorCode.INPUT)
    rows = REPORTS[kind](cfg, **options)
    if csv_path is not None:
        write_dicts(csv_path, rows)
    return rows
