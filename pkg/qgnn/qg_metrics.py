import csv
import hashlib
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from qgnn.qg_error import ErrorCode
from qgnn.qg_handler import handler
from qgnn.qg_train import EpochMetrics


def _cell(value) -> str:
    match value:
        case None:
            return ""
        case float():
            return repr(value)
        case _:
            return str(value)


def write_rows(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for row in rows:
                writer.writerow([_cell(v) for v in row])
    except OSError as e:
        raise handler.error(f"cannot write {path}: {e.strerror}", code=ErrorCode.IO)
    return path


def write_dicts(path: str | Path, rows: Sequence[Mapping]) -> Path:
    header = list(rows[0].keys()) if rows else []
    return write_rows(path, header, ([row[k] for k in header] for row in rows))


def _tags(history: Sequence[EpochMetrics]) -> list[str]:
    tags: dict[str, None] = {}
    for m in history:
        tags.update(dict.fromkeys(m.ranges))
    return list(tags)


def write_metrics(path: str | Path, history: Sequence[EpochMetrics]) -> Path:
    """One row per epoch: losses, accuracies, S̄, λ and per-tensor range, sk, κ_N."""
    tags = _tags(history)
    header = ["epoch", "loss", "train_acc", "val_acc", "test_acc", "mean_smoothness", "lambda"]
    for tag in tags:
        header += [f"range:{tag}", f"sk:{tag}", f"kappa_n:{tag}"]

    def row(m: EpochMetrics):
        out = [m.epoch, m.loss, m.train_acc, m.val_acc, m.test_acc, m.mean_smoothness, m.lam]
        for tag in tags:
            report = m.moments.get(tag)
            out += [m.ranges.get(tag), report and report.skewness, report and report.kappa_n]
        return out

    return write_rows(path, header, (row(m) for m in history))


def write_moments(path: str | Path, history: Sequence[EpochMetrics]) -> Path:
    rows = (
        (m.epoch, tag, r.skewness, r.kurtosis, r.kappa_n)
        for m in history
        for tag, r in m.moments.items()
    )
    return write_rows(path, ["epoch", "tag", "sk", "kurtosis", "kappa_n"], rows)


def write_smoothness(path: str | Path, history: Sequence[EpochMetrics]) -> Path:
    def rows():
        for m in history:
            for layer, s_l in enumerate(m.smoothness, start=1):
                lam = m.lambdas[layer - 1] if layer <= len(m.lambdas) else None
                g = m.constraint[layer - 1] if layer <= len(m.constraint) else None
                yield m.epoch, layer, s_l, lam, g, m.mean_smoothness

    return write_rows(path, ["epoch", "layer", "S_l", "lambda", "g", "mean_smoothness"], rows())


def content_hash(*sources: bytes | str | Path) -> str:
    """sha256 over files (directories recursively, in path order) and raw strings"""
    digest = hashlib.sha256()
    for src in sources:
        match src:
            case Path() if src.is_dir():
                for file in sorted(p for p in src.rglob("*") if p.is_file()):
                    digest.update(file.relative_to(src).as_posix().encode())
                    digest.update(file.read_bytes())
            case Path():
                digest.update(src.read_bytes())
            case str():
                digest.update(src.encode())
            case _:
                digest.update(src)
    return digest.hexdigest()


def write_manifest(path: str | Path, config_text: str, seed: int, data: Optional[Path]) -> Path:
    inputs = content_hash(config_text, *([data] if data is not None else []))
    text = f"# qgnn run manifest\n# seed: {seed}\n# inputs-sha256: {inputs}\n\n{config_text}"
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as e:
        raise handler.error(f"cannot write {path}: {e.strerror}", code=ErrorCode.IO)
    return path
