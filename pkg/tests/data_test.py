import pickle

import numpy as np
from scipy import sparse

from qgnn.qg_data import (
    EDGES,
    FEATURES,
    LABELS,
    GraphBundle,
    Splits,
    convert_planetoid,
    generate_sbm,
    load_bundle,
    load_or_generate,
    make_splits,
    write_bundle,
)
from qgnn.qg_error import ErrorCode

from .utils import raises_code, sbm_bundle, small_config


def test_bundle_round_trip(tmp_path):
    bundle = sbm_bundle(n=60, val_size=10, dim=5)
    loaded = load_bundle(write_bundle(bundle, tmp_path / "sbm"))
    assert loaded.name == "sbm"
    assert np.array_equal(loaded.graph.edges, bundle.graph.edges)
    assert np.array_equal(loaded.features, bundle.features)
    assert np.array_equal(loaded.labels, bundle.labels)
    assert loaded.classes == 2
    for name in ("train", "val", "test"):
        assert np.array_equal(getattr(loaded.splits, name), getattr(bundle.splits, name))


def test_bundle_without_splits(tmp_path):
    bundle = generate_sbm(n=20, dim=3)
    loaded = load_bundle(write_bundle(bundle, tmp_path / "bare"))
    assert loaded.splits is None


def test_malformed_edge_line(tmp_path):
    path = write_bundle(generate_sbm(n=20, dim=3), tmp_path / "b")
    (path / EDGES).write_text("0 1\n# comment\n2 x\n")
    with raises_code(ErrorCode.FORMAT) as info:
        load_bundle(path)
    assert "edges.txt line 3" in info.value.msg


def test_edge_outside_the_graph(tmp_path, capsys):
    path = write_bundle(generate_sbm(n=20, dim=3), tmp_path / "b")
    (path / EDGES).write_text("0 25\n")
    capsys.readouterr()
    with raises_code(ErrorCode.RANGE) as info:
        load_bundle(path)
    assert info.value.msg.startswith("edges.txt: ")
    assert capsys.readouterr().err.count("ERROR") == 1


def test_truncated_features(tmp_path):
    path = write_bundle(generate_sbm(n=20, dim=3), tmp_path / "b")
    raw = (path / FEATURES).read_bytes()
    (path / FEATURES).write_bytes(raw[:-4])
    with raises_code(ErrorCode.FORMAT):
        load_bundle(path)


def test_label_outside_declared_classes(tmp_path):
    path = write_bundle(generate_sbm(n=4, blocks=2, dim=3), tmp_path / "b")
    (path / LABELS).write_text("# classes: 2\n0\n1\n2\n0\n")
    with raises_code(ErrorCode.RANGE):
        load_bundle(path)


def test_missing_directory(tmp_path):
    with raises_code(ErrorCode.IO):
        load_bundle(tmp_path / "nowhere")


def test_splits_per_class_and_validation_size():
    bundle = generate_sbm(n=200)
    splits = make_splits(bundle.labels, 2, seed=1, per_class=20, val_size=60)
    for c in range(2):
        assert np.sum(splits.train & (bundle.labels == c)) == 20
    assert splits.val.sum() == 60
    assert splits.test.sum() == 200 - 40 - 60
    again = make_splits(bundle.labels, 2, seed=1, per_class=20, val_size=60)
    assert np.array_equal(splits.train, again.train)


def test_splits_need_enough_nodes():
    labels = np.array([0] * 10 + [1] * 30)
    with raises_code(ErrorCode.INPUT):
        make_splits(labels, 2, per_class=20)
    with raises_code(ErrorCode.INPUT):
        make_splits(labels, 2, per_class=5, val_size=100)


def test_overlapping_splits():
    mask = np.array([True, False])
    with raises_code(ErrorCode.INPUT):
        Splits(mask, mask, ~mask)


def test_sbm_is_seeded():
    a, b = generate_sbm(seed=4, n=100), generate_sbm(seed=4, n=100)
    assert a.name == "sbm-2x100-s4"
    assert np.array_equal(a.graph.edges, b.graph.edges)
    assert np.array_equal(a.features, b.features)
    assert not np.array_equal(a.features, generate_sbm(seed=5, n=100).features)


def test_sbm_blocks_are_denser_inside():
    bundle = generate_sbm(n=400, p_in=0.1, p_out=0.01)
    e = bundle.graph.edges
    same = bundle.labels[e[:, 0]] == bundle.labels[e[:, 1]]
    assert same.sum() > 5 * (~same).sum()


def test_sbm_probabilities():
    with raises_code(ErrorCode.INPUT):
        generate_sbm(p_in=0.01, p_out=0.05)


def test_bundle_shape_checks():
    bundle = generate_sbm(n=20, dim=3)
    with raises_code(ErrorCode.SHAPE):
        GraphBundle("x", bundle.graph, bundle.features[:5], bundle.labels, 2)
    with raises_code(ErrorCode.RANGE):
        GraphBundle("x", bundle.graph, bundle.features, bundle.labels + 5, 2)


def test_public_split_needs_a_bundle_split():
    with raises_code(ErrorCode.CONFIG):
        load_or_generate(small_config(split="public"))


def test_load_from_configured_directory(tmp_path, monkeypatch):
    write_bundle(sbm_bundle(n=60, val_size=10, dim=5), tmp_path / "toy")
    monkeypatch.setenv("QGNN_DATA_DIR", str(tmp_path))
    bundle = load_or_generate(small_config(data="toy", split="public"))
    assert bundle.name == "toy" and bundle.n == 60


def _dump(path, obj):
    with open(path, "wb") as f:
        pickle.dump(obj, f)


def test_convert_planetoid(tmp_path):
    raw = tmp_path / "raw"
    raw.mkdir()
    onehot = np.eye(2)
    allx = sparse.csr_matrix(np.arange(12, dtype=float).reshape(4, 3))
    tx = sparse.csr_matrix(np.array([[100.0, 0.0, 0.0], [200.0, 0.0, 0.0]]))
    parts = {
        "x": allx[:2],
        "y": onehot[[0, 1]],
        "allx": allx,
        "ally": onehot[[0, 1, 1, 0]],
        "tx": tx,
        "ty": onehot[[1, 0]],
        "graph": {0: [1], 1: [0, 2], 2: [1, 3], 3: [2, 4], 4: [3, 5], 5: [4]},
    }
    for key, value in parts.items():
        _dump(raw / f"ind.toy.{key}", value)
    # test rows are listed in file order, not node order
    (raw / "ind.toy.test.index").write_text("5\n4\n")

    bundle = convert_planetoid(raw, "toy", tmp_path / "toy")
    assert bundle.n == 6 and bundle.classes == 2
    assert bundle.labels.tolist() == [0, 1, 1, 0, 0, 1]
    assert bundle.features[5, 0] == 100.0 and bundle.features[4, 0] == 200.0
    assert bundle.splits.train.tolist() == [True, True, False, False, False, False]
    assert bundle.graph.num_edges == 5
    assert load_bundle(tmp_path / "toy").n == 6
