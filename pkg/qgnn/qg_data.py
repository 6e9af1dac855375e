import pickle
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
import regex
from scipy import sparse

from qgnn.qg_error import ErrorCode, QGError
from qgnn.qg_graph import Graph, build_graph
from qgnn.qg_handler import handler, logger
from qgnn.utils import rng

EDGES = "edges.txt"
FEATURES = "features.bin"
LABELS = "labels.txt"
SPLITS = "splits.txt"

FEATURE_HEADER = struct.Struct("<II")
EDGE_LINE = regex.compile(r"^\s*(?P<u>\d+)\s+(?P<v>\d+)\s*(?:#.*)?$")
BLANK = regex.compile(r"^\s*(?:#.*)?$")
CLASSES_HEADER = regex.compile(r"^\s*#\s*classes\s*:\s*(?P<k>\d+)\s*$")
SPLIT_NAMES = ("train", "val", "test", "-")


@dataclass(frozen=True, eq=False)
class Splits:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        if ((self.train & self.val) | (self.train & self.test) | (self.val & self.test)).any():
            raise handler.error("train, val and test masks overlap")

    def check_nonempty(self) -> None:
        for name in ("train", "val", "test"):
            if not getattr(self, name).any():
                raise handler.error(f"{name} mask is empty", code=ErrorCode.EMPTY)


@dataclass(frozen=True, eq=False)
class GraphBundle:
    name: str
    graph: Graph
    features: np.ndarray
    labels: np.ndarray
    classes: int
    splits: Optional[Splits] = None

    def __post_init__(self):
        n = self.graph.n
        if self.features.shape[0] != n:
            raise handler.error(f"features have {self.features.shape[0]} rows for {n} nodes", code=ErrorCode.SHAPE)
        if len(self.labels) != n:
            raise handler.error(f"{len(self.labels)} labels for {n} nodes", code=ErrorCode.SHAPE)
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise handler.error(f"labels must lie in [0, {self.classes})", code=ErrorCode.RANGE)

    @property
    def n(self) -> int:
        return self.graph.n

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def with_splits(self, splits: Splits) -> "GraphBundle":
        return replace(self, splits=splits)

    def stats(self) -> dict[str, int]:
        return {"nodes": self.n, "edges": self.graph.num_edges, "features": self.dim, "classes": self.classes}


# reading


def _read_text(path: Path) -> str:
    try:
        return path.read_text(encoding="ascii")
    except OSError as e:
        raise handler.error(f"cannot read {path}: {e.strerror}", code=ErrorCode.IO)
    except UnicodeDecodeError:
        raise handler.error(f"{path} is not ASCII", code=ErrorCode.FORMAT)


def read_features(path: Path) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise handler.error(f"cannot read {path}: {e.strerror}", code=ErrorCode.IO)
    if len(raw) < FEATURE_HEADER.size:
        raise handler.error(f"{path.name}: truncated header", code=ErrorCode.FORMAT)
    n, d = FEATURE_HEADER.unpack_from(raw)
    expected = FEATURE_HEADER.size + 4 * n * d
    if len(raw) != expected:
        raise handler.error(
            f"{path.name}: header declares {n}x{d} floats ({expected} bytes), file has {len(raw)}",
            code=ErrorCode.FORMAT,
        )
    data = np.frombuffer(raw, dtype="<f4", offset=FEATURE_HEADER.size)
    return data.reshape(n, d).astype(np.float64)


def read_edges(path: Path) -> np.ndarray:
    pairs = []
    for lineno, line in enumerate(_read_text(path).splitlines(), start=1):
        if BLANK.match(line):
            continue
        if not (m := EDGE_LINE.match(line)):
            raise handler.error(f"malformed edge '{line.strip()}'", f"{path.name} line {lineno}", ErrorCode.FORMAT)
        pairs.append((int(m.group("u")), int(m.group("v"))))
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def read_labels(path: Path) -> tuple[np.ndarray, Optional[int]]:
    labels, classes = [], None
    for lineno, line in enumerate(_read_text(path).splitlines(), start=1):
        if m := CLASSES_HEADER.match(line):
            classes = int(m.group("k"))
            continue
        if BLANK.match(line):
            continue
        try:
            labels.append(int(line.strip()))
        except ValueError:
            raise handler.error(f"malformed label '{line.strip()}'", f"{path.name} line {lineno}", ErrorCode.FORMAT)
    return np.array(labels, dtype=np.int64), classes


def read_splits(path: Path, n: int) -> Splits:
    names = [line.strip() for line in _read_text(path).splitlines() if not BLANK.match(line)]
    if len(names) != n:
        raise handler.error(f"{path.name}: {len(names)} entries for {n} nodes", code=ErrorCode.FORMAT)
    for lineno, name in enumerate(names, start=1):
        if name not in SPLIT_NAMES:
            raise handler.error(f"unknown split '{name}'", f"{path.name} line {lineno}", ErrorCode.FORMAT)
    arr = np.array(names)
    return Splits(arr == "train", arr == "val", arr == "test")


def load_bundle(directory: str | Path) -> GraphBundle:
    """
    Read a bundle directory: edges.txt, features.bin, labels.txt and an
    optional splits.txt.
    """

    directory = Path(directory)
    if not directory.is_dir():
        raise handler.error(f"bundle directory {directory} does not exist", code=ErrorCode.IO)
    features = read_features(directory / FEATURES)
    n = features.shape[0]
    edges = read_edges(directory / EDGES)
    try:
        graph = build_graph(edges, n)
    except QGError as e:
        raise handler.within(e, EDGES) from e

    labels, classes = read_labels(directory / LABELS)
    if len(labels) != n:
        raise handler.error(f"{LABELS}: {len(labels)} labels for {n} nodes", code=ErrorCode.FORMAT)
    if len(labels) and labels.min() < 0:
        raise handler.error(f"{LABELS}: negative label {labels.min()}", code=ErrorCode.RANGE)
    inferred = int(labels.max()) + 1 if len(labels) else 0
    if classes is None:
        classes = inferred
    elif inferred > classes:
        raise handler.error(f"{LABELS}: label {inferred - 1} outside [0, {classes})", code=ErrorCode.RANGE)

    splits = read_splits(directory / SPLITS, n) if (directory / SPLITS).exists() else None
    bundle = GraphBundle(directory.name, graph, features, labels, classes, splits)
    logger.debug(f"loaded {bundle.name}: {bundle.stats()}")
    return bundle


# writing


def write_bundle(bundle: GraphBundle, directory: str | Path, with_splits: bool = True) -> Path:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        edges = "".join(f"{u} {v}\n" for u, v in bundle.graph.edges)
        (directory / EDGES).write_text(edges, encoding="ascii")
        header = FEATURE_HEADER.pack(bundle.n, bundle.dim)
        (directory / FEATURES).write_bytes(header + bundle.features.astype("<f4").tobytes())
        labels = f"# classes: {bundle.classes}\n" + "".join(f"{y}\n" for y in bundle.labels)
        (directory / LABELS).write_text(labels, encoding="ascii")
        if with_splits and bundle.splits is not None:
            s = bundle.splits
            names = np.where(s.train, "train", np.where(s.val, "val", np.where(s.test, "test", "-")))
            (directory / SPLITS).write_text("".join(f"{name}\n" for name in names), encoding="ascii")
    except OSError as e:
        raise handler.error(f"cannot write bundle to {directory}: {e.strerror}", code=ErrorCode.IO)
    return directory


# splits


def make_splits(
    labels: np.ndarray,
    classes: int,
    seed: int = 0,
    per_class: int = 20,
    val_size: int = 500,
) -> Splits:
    """
    `per_class` training nodes per class, `val_size` validation nodes drawn from
    the rest, everything else is test.
    """

    labels = np.asarray(labels)
    n = len(labels)
    random = rng(seed, 2)
    train = np.zeros(n, dtype=bool)
    for c in range(classes):
        members = np.flatnonzero(labels == c)
        if len(members) < per_class:
            raise handler.error(
                f"class {c} has {len(members)} nodes, {per_class} needed for training",
                code=ErrorCode.INPUT,
            )
        train[random.choice(members, per_class, replace=False)] = True

    rest = random.permutation(np.flatnonzero(~train))
    if len(rest) < val_size:
        raise handler.error(
            f"only {len(rest)} nodes left for a validation set of {val_size}", code=ErrorCode.INPUT
        )
    val = np.zeros(n, dtype=bool)
    val[rest[:val_size]] = True
    return Splits(train, val, ~(train | val))


# synthetic graphs


def _block_edges(random, lo_a, size_a, lo_b, size_b, p, same: bool) -> np.ndarray:
    """
    Include every node pair independently with probability p: draw the count,
    then the positions. Within a block only the upper triangle is kept, which
    preserves the per-pair probability.
    """

    population = size_a * size_b
    count = random.binomial(population, p)
    if count == 0:
        return np.empty((0, 2), dtype=np.int64)
    flat = random.choice(population, size=count, replace=False)
    i, j = np.divmod(flat, size_b)
    if same:
        keep = i < j
        i, j = i[keep], j[keep]
    return np.stack([lo_a + i, lo_b + j], axis=1)


def generate_sbm(
    seed: int = 0,
    blocks: int = 2,
    n: int = 200,
    p_in: float = 0.05,
    p_out: float = 0.005,
    dim: int = 16,
    separation: float = 1.0,
) -> GraphBundle:
    """
    Stochastic block model with Gaussian class-conditional features. Nodes of a
    block are contiguous; feature dimension j is shifted by +separation/2 for
    class j mod blocks and by -separation/2 for the others, plus N(0, 1) noise.
    """

    if not (0.0 <= p_out < p_in <= 1.0):
        raise handler.error(f"need 0 <= p_out < p_in <= 1, got p_in={p_in}, p_out={p_out}")
    if blocks < 1 or n < blocks:
        raise handler.error(f"cannot split {n} nodes into {blocks} blocks")
    if dim < 1:
        raise handler.error("feature dimension must be positive")

    random = rng(seed, 1)
    sizes = np.full(blocks, n // blocks)
    sizes[: n % blocks] += 1
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    labels = np.repeat(np.arange(blocks), sizes)

    parts = []
    for a in range(blocks):
        for b in range(a, blocks):
            p = p_in if a == b else p_out
            parts.append(_block_edges(random, starts[a], sizes[a], starts[b], sizes[b], p, a == b))
    graph = build_graph(np.concatenate(parts), n)

    means = np.where(np.arange(dim)[None, :] % blocks == np.arange(blocks)[:, None], 0.5, -0.5) * separation
    features = (means[labels] + random.standard_normal((n, dim))).astype(np.float32).astype(np.float64)
    return GraphBundle(f"sbm-{blocks}x{n}-s{seed}", graph, features, labels, blocks)


# planetoid dumps


def _load_pickle(path: Path):
    try:
        with open(path, "rb") as f:
            return pickle.load(f, encoding="latin1")
    except OSError as e:
        raise handler.error(f"cannot read {path}: {e.strerror}", code=ErrorCode.IO)
    except (pickle.UnpicklingError, EOFError) as e:
        raise handler.error(f"{path.name}: {e}", code=ErrorCode.FORMAT)


def convert_planetoid(raw_dir: str | Path, name: str, out_dir: str | Path) -> GraphBundle:
    """
    Convert the `ind.<name>.*` dumps of the public citation datasets into a
    bundle, keeping the public split. Test indices that are missing from the
    dump (isolated nodes) get zero features and label 0.
    """

    raw_dir = Path(raw_dir)
    parts = {key: _load_pickle(raw_dir / f"ind.{name}.{key}") for key in ("x", "y", "tx", "ty", "allx", "ally", "graph")}
    test_index = np.array(
        [int(line) for line in _read_text(raw_dir / f"ind.{name}.test.index").split()], dtype=np.int64
    )
    test_sorted = np.sort(test_index)

    tx, ty = sparse.lil_matrix(parts["tx"]), np.asarray(parts["ty"])
    full = np.arange(test_sorted.min(), test_sorted.max() + 1)
    if len(full) != len(test_sorted):
        tx_full = sparse.lil_matrix((len(full), tx.shape[1]))
        tx_full[test_sorted - test_sorted.min(), :] = tx
        ty_full = np.zeros((len(full), ty.shape[1]))
        ty_full[test_sorted - test_sorted.min(), :] = ty
        tx, ty = tx_full, ty_full

    features = sparse.vstack([sparse.lil_matrix(parts["allx"]), tx]).tolil()
    features[test_index, :] = features[test_sorted, :]
    onehot = np.vstack([np.asarray(parts["ally"]), ty])
    onehot[test_index, :] = onehot[test_sorted, :]
    labels = np.argmax(onehot, axis=1)

    n = features.shape[0]
    adjacency: dict = parts["graph"]
    edges = np.array([(u, v) for u, nbrs in adjacency.items() for v in nbrs if u < n and v < n], dtype=np.int64)
    graph = build_graph(edges, n)

    n_train = np.asarray(parts["y"]).shape[0]
    train = np.zeros(n, dtype=bool)
    train[:n_train] = True
    val = np.zeros(n, dtype=bool)
    val[n_train : n_train + 500] = True
    test = np.zeros(n, dtype=bool)
    test[test_index] = True
    test &= ~(train | val)

    dense = np.asarray(features.todense(), dtype=np.float32).astype(np.float64)
    bundle = GraphBundle(name, graph, dense, labels, onehot.shape[1], Splits(train, val, test))
    write_bundle(bundle, out_dir)
    logger.info(f"converted {name}: {bundle.stats()}")
    return bundle


def load_or_generate(cfg) -> GraphBundle:
    """The configured bundle, or an SBM graph when no data path is set; splits follow `cfg.split`."""
    if (path := cfg.data_path) is not None:
        bundle = load_bundle(path)
    else:
        bundle = generate_sbm(
            cfg.seed, cfg.synth_blocks, cfg.synth_nodes, cfg.synth_p_in, cfg.synth_p_out, cfg.synth_dim, cfg.synth_sep
        )
    if cfg.split == "public":
        if bundle.splits is None:
            raise handler.error(f"bundle {bundle.name} has no public split", code=ErrorCode.CONFIG)
        return bundle
    return bundle.with_splits(make_splits(bundle.labels, bundle.classes, cfg.seed, cfg.train_per_class, cfg.val_size))
