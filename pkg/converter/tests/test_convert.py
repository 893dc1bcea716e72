"""End-to-end tests for the raw-citation-file converter.

The fixtures write synthetic directories in the upstream on-disk format
(pickled CSR feature blocks, one-hot label blocks, an adjacency dict and
a shuffled test-index file) with known ground truth, then drive
``convert.convert`` / the ``convert.py`` CLI against them.
"""

import functools
import hashlib
import json
import logging
import os
import pickle
import shutil
import subprocess
import sys
import time
from collections import defaultdict
from pathlib import Path

import numpy as np
import pytest
from scipy import sparse

import convert

BUNDLE_FILES = ("meta.json", "features.bin", "edges.bin", "labels.bin", "masks.bin")
PUBMED_RAW = os.environ.get("GRAFUSE_PUBMED_RAW", "")


def criterion(name, budget=None):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            start = time.monotonic()
            try:
                detail = fn(*args, **kwargs)
                elapsed = time.monotonic() - start
                if budget is not None:
                    assert elapsed < budget, \
                        f"runtime {elapsed:.1f}s exceeds {budget}s budget"
            except BaseException as e:
                if type(e).__name__ == "Skipped":
                    raise
                print(f"[FAIL] {name}")
                raise
            extra = f"; {detail}" if detail else ""
            print(f"[PASS] {name} ({elapsed:.1f}s{extra})")
        return wrapper
    return deco


# ------------------------------------------------------------ raw fixtures


def one_hot(ids, num_classes):
    return np.eye(num_classes, dtype=np.int32)[ids]


def write_raw(raw_dir, name, *, allx, tx, ally, ty, n_train, graph, test_index):
    raw_dir.mkdir(parents=True, exist_ok=True)
    objs = {"x": allx[:n_train], "y": ally[:n_train], "tx": tx, "ty": ty,
            "allx": allx, "ally": ally, "graph": graph}
    for suffix, obj in objs.items():
        with open(raw_dir / f"ind.{name}.{suffix}", "wb") as fh:
            pickle.dump(obj, fh, protocol=2)
    (raw_dir / f"ind.{name}.test.index").write_text(
        "\n".join(str(i) for i in test_index) + "\n", encoding="utf-8")


def make_corpus(raw_dir, *, name="pubmed", n_allx=620, n_tx=100, d=10,
                num_classes=3, n_train=60, num_edges=300, density=0.3,
                seed=1, self_loops=0, dup_entries=0):
    """Write a synthetic raw directory; return its ground truth."""
    rng = np.random.default_rng(seed)
    n = n_allx + n_tx
    labels = rng.integers(0, num_classes, size=n)
    feats = rng.standard_normal((n, d)).astype(np.float32)
    feats[rng.random((n, d)) >= density] = 0.0

    test_ids = np.arange(n_allx, n)
    test_index = test_ids[rng.permutation(n_tx)]

    pairs = set()
    while len(pairs) < num_edges:
        us = rng.integers(0, n, size=num_edges)
        vs = rng.integers(0, n, size=num_edges)
        for u, v in zip(us.tolist(), vs.tolist()):
            if u == v:
                continue
            pairs.add((u, v) if u < v else (v, u))
            if len(pairs) == num_edges:
                break

    graph = defaultdict(list)
    for u, v in sorted(pairs):
        graph[u].append(v)
        graph[v].append(u)
    for u, v in list(sorted(pairs))[:dup_entries]:
        graph[u].append(v)
    for i in range(self_loops):
        graph[i].append(i)

    write_raw(raw_dir, name,
              allx=sparse.csr_matrix(feats[:n_allx]),
              tx=sparse.csr_matrix(feats[test_index]),
              ally=one_hot(labels[:n_allx], num_classes),
              ty=one_hot(labels[test_index], num_classes),
              n_train=n_train, graph=graph, test_index=test_index.tolist())
    return {"n": n, "d": d, "num_classes": num_classes, "n_train": n_train,
            "labels": labels, "features": feats, "pairs": pairs,
            "test_index": test_index}


@pytest.fixture(scope="module")
def small_raw(tmp_path_factory):
    raw_dir = tmp_path_factory.mktemp("raw_small")
    truth = make_corpus(raw_dir, num_edges=300, self_loops=2, dup_entries=3)
    return raw_dir, truth


def read_bundle_files(out):
    """Parse the bundle directory without the core package."""
    out = Path(out)
    meta = json.loads((out / "meta.json").read_text(encoding="utf-8"))
    n, d = meta["num_nodes"], meta["feature_dim"]
    feats = np.frombuffer((out / "features.bin").read_bytes(),
                          dtype="<f4").reshape(n, d)
    edges = np.frombuffer((out / "edges.bin").read_bytes(),
                          dtype="<u4").reshape(meta["num_edges"], 2)
    labels = np.frombuffer((out / "labels.bin").read_bytes(), dtype="<u2")
    masks = np.frombuffer((out / "masks.bin").read_bytes(), dtype="u1")
    assert labels.shape == (n,) and masks.shape == (n,)
    return meta, feats, edges, labels, masks


def tree_digests(root):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(Path(root).iterdir())}


# -------------------------------------------------------------- conversion


def test_assembles_full_node_order(small_raw, tmp_path):
    raw_dir, truth = small_raw
    summary = convert.convert(raw_dir, tmp_path / "bundle")
    meta, feats, edges, labels, masks = read_bundle_files(tmp_path / "bundle")

    assert meta["magic"] == "GRB1"
    assert meta["num_nodes"] == truth["n"]
    assert meta["feature_dim"] == truth["d"]
    assert meta["num_classes"] == truth["num_classes"]
    # test rows must land at the positions named by the index file
    assert np.array_equal(feats, truth["features"])
    assert np.array_equal(labels, truth["labels"])

    want = {(u, v) for u, v in truth["pairs"]} | {(v, u) for u, v in truth["pairs"]}
    got = {(int(a), int(b)) for a, b in edges}
    assert got == want
    keys = edges[:, 0].astype(np.int64) * truth["n"] + edges[:, 1]
    assert np.array_equal(keys, np.sort(keys)) and np.unique(keys).size == keys.size
    assert summary["num_undirected_edges"] == len(truth["pairs"])
    assert summary["self_loops_dropped"] == 2

    assert np.array_equal(np.flatnonzero(masks == 1), np.arange(60))
    assert np.array_equal(np.flatnonzero(masks == 2), np.arange(60, 560))
    assert np.array_equal(np.flatnonzero(masks == 3),
                          np.sort(truth["test_index"]))
    assert summary["mask_sizes"] == {"train": 60, "val": 500, "test": 100}


def test_rerun_is_byte_identical(small_raw, tmp_path):
    raw_dir, _ = small_raw
    convert.convert(raw_dir, tmp_path / "a")
    convert.convert(raw_dir, tmp_path / "b")
    a, b = tree_digests(tmp_path / "a"), tree_digests(tmp_path / "b")
    assert set(a) == set(BUNDLE_FILES)
    assert a == b


def test_output_passes_bundle_validation(small_raw, tmp_path):
    raw_dir, _ = small_raw
    convert.convert(raw_dir, tmp_path / "bundle")
    proc = subprocess.run(
        [sys.executable, "-m", "grafuse.cli", "validate-bundle",
         "--data", str(tmp_path / "bundle")],
        capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "bundle ok" in proc.stdout


def test_stratified_split_is_proportional(small_raw, tmp_path):
    raw_dir, truth = small_raw
    summary = convert.convert(raw_dir, tmp_path / "bundle", "stratified")
    _, _, _, labels, masks = read_bundle_files(tmp_path / "bundle")
    assert summary["mask_sizes"] == {"train": 60, "val": 500, "test": 100}

    hist = np.bincount(truth["labels"], minlength=3)
    for value, total in ((1, 60), (2, 500), (3, 100)):
        ids = np.flatnonzero(masks == value)
        assert ids.size == total
        per_class = np.bincount(labels[ids], minlength=3)
        if value == 1:
            assert per_class.tolist() == [20, 20, 20]
        else:
            # largest-remainder allocation stays within one seat of exact
            exact = hist * (total / truth["n"])
            assert np.all(np.abs(per_class - exact) < 1.0)
    # within a class, earlier ids are consumed before later ones
    order = np.zeros(truth["n"], dtype=int)
    for value, rank in ((1, 1), (2, 2), (3, 3)):
        order[np.flatnonzero(masks == value)] = rank
    for c in range(3):
        ranks = order[np.flatnonzero(labels == c)]
        used = ranks[ranks > 0]
        assert np.array_equal(used, np.sort(used))


def test_adjacency_dedup_and_self_loop_drop():
    edges, stats = convert.build_edges({0: [1, 1, 0], 1: [0], 2: []}, 3)
    assert edges.tolist() == [[0, 1], [1, 0]]
    assert stats == {"raw_entries": 4, "self_loops_dropped": 1,
                     "num_directed_pairs": 2, "num_undirected_edges": 1}


def test_deviation_warnings_logged(small_raw, tmp_path, caplog):
    raw_dir, _ = small_raw
    with caplog.at_level(logging.WARNING, logger="planetoid_converter"):
        convert.convert(raw_dir, tmp_path / "bundle")
    text = "\n".join(r.getMessage() for r in caplog.records)
    assert "edge-count-deviation" in text and "44338" in text
    assert "corpus-shape-deviation" in text
    assert "label-histogram-deviation" in text


# ------------------------------------------------------------ named checks


def _mutate_missing(raw_dir):
    (raw_dir / "ind.pubmed.tx").unlink()


def _mutate_unreadable(raw_dir):
    (raw_dir / "ind.pubmed.allx").write_bytes(b"not a pickle")


def _mutate_index_duplicate(raw_dir):
    p = raw_dir / "ind.pubmed.test.index"
    lines = p.read_text().split()
    lines[1] = lines[0]
    p.write_text("\n".join(lines) + "\n")


def _mutate_index_short(raw_dir):
    p = raw_dir / "ind.pubmed.test.index"
    lines = p.read_text().split()
    p.write_text("\n".join(lines[:-1]) + "\n")


def _mutate_index_gap(raw_dir):
    p = raw_dir / "ind.pubmed.test.index"
    lines = p.read_text().split()
    lines[-1] = str(10 ** 6)
    p.write_text("\n".join(lines) + "\n")


def _mutate_zero_label_row(raw_dir):
    with open(raw_dir / "ind.pubmed.ally", "rb") as fh:
        ally = pickle.load(fh, encoding="latin1")
    ally[70] = 0
    with open(raw_dir / "ind.pubmed.ally", "wb") as fh:
        pickle.dump(ally, fh, protocol=2)


def _mutate_bad_neighbour(raw_dir):
    with open(raw_dir / "ind.pubmed.graph", "rb") as fh:
        graph = pickle.load(fh, encoding="latin1")
    graph[0].append(10 ** 6)
    with open(raw_dir / "ind.pubmed.graph", "wb") as fh:
        pickle.dump(graph, fh, protocol=2)


@pytest.mark.parametrize("mutate, check", [
    (_mutate_missing, "missing-raw-file"),
    (_mutate_unreadable, "unreadable-raw-file"),
    (_mutate_index_duplicate, "test-index-duplicate"),
    (_mutate_index_short, "test-index-count"),
    (_mutate_index_gap, "node-count"),
    (_mutate_zero_label_row, "label-not-one-hot"),
    (_mutate_bad_neighbour, "adjacency-out-of-range"),
], ids=lambda m: getattr(m, "__name__", m))
def test_invalid_input_fails_named_check(small_raw, tmp_path, mutate, check):
    src, _ = small_raw
    raw_dir = tmp_path / "raw"
    shutil.copytree(src, raw_dir)
    mutate(raw_dir)
    with pytest.raises(convert.ConvertError) as err:
        convert.convert(raw_dir, tmp_path / "bundle")
    assert err.value.check == check


def test_standard_split_needs_enough_non_test_nodes(tmp_path):
    raw_dir = tmp_path / "raw"
    make_corpus(raw_dir, n_allx=200, n_tx=40, n_train=60, num_edges=80, seed=3)
    with pytest.raises(convert.ConvertError) as err:
        convert.convert(raw_dir, tmp_path / "bundle")
    assert err.value.check == "split-size"


def test_cli_reports_named_failure(tmp_path):
    proc = subprocess.run(
        [sys.executable, str(Path(convert.__file__)), "--in",
         str(tmp_path / "nowhere"), "--out", str(tmp_path / "bundle")],
        capture_output=True, text=True)
    assert proc.returncode == 1
    assert "error: missing-input-dir" in proc.stderr


def test_cli_converts_and_prints_summary(small_raw, tmp_path):
    raw_dir, truth = small_raw
    out = tmp_path / "bundle"
    proc = subprocess.run(
        [sys.executable, str(Path(convert.__file__)), "--in", str(raw_dir),
         "--out", str(out), "--split", "standard"],
        capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    summary = json.loads(proc.stdout)
    assert summary["num_nodes"] == truth["n"]
    assert summary["num_undirected_edges"] == len(truth["pairs"])
    assert "edge-count" in proc.stderr
    assert all((out / f).is_file() for f in BUNDLE_FILES)


# -------------------------------------------------------- acceptance gate


@pytest.fixture(scope="module")
def corpus_shaped_raw(tmp_path_factory):
    """Raw input matching the published corpus figures exactly.

    Used when no real raw corpus is available (set GRAFUSE_PUBMED_RAW to
    point at one): 19717 nodes, 500 features, 3 classes, 44338 edges.
    """
    if PUBMED_RAW and Path(PUBMED_RAW).is_dir():
        return Path(PUBMED_RAW), "upstream raw files"
    raw_dir = tmp_path_factory.mktemp("raw_corpus_shaped")
    make_corpus(raw_dir, n_allx=18717, n_tx=1000, d=500, num_classes=3,
                n_train=60, num_edges=44338, density=0.01, seed=11)
    return raw_dir, "synthetic corpus-shaped input"


def test_secondary_converter_contract(corpus_shaped_raw, tmp_path, caplog):
    raw_dir, source = corpus_shaped_raw

    @criterion("converter corpus contract")
    def run():
        with caplog.at_level(logging.INFO, logger="planetoid_converter"):
            summary = convert.convert(raw_dir, tmp_path / "a")
            convert.convert(raw_dir, tmp_path / "b")

        meta = json.loads((tmp_path / "a" / "meta.json").read_text(encoding="utf-8"))
        assert meta["num_nodes"] == 19717
        assert meta["feature_dim"] == 500
        assert meta["num_classes"] == 3

        edge_lines = [r.getMessage() for r in caplog.records
                      if "edge-count" in r.getMessage()]
        assert edge_lines, "no edge-count check was logged"
        assert any("44338" in line for line in edge_lines)

        proc = subprocess.run(
            [sys.executable, "-m", "grafuse.cli", "validate-bundle",
             "--data", str(tmp_path / "a")],
            capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert "bundle ok" in proc.stdout

        assert tree_digests(tmp_path / "a") == tree_digests(tmp_path / "b")
        return (f"num_nodes=19717 feature_dim=500 num_classes=3 "
                f"undirected_edges={summary['num_undirected_edges']}; "
                f"validate-bundle ok; rerun byte-identical ({source})")

    run()


def test_real_corpus_figures():
    if not (PUBMED_RAW and Path(PUBMED_RAW).is_dir()):
        pytest.skip("no raw corpus directory; set GRAFUSE_PUBMED_RAW to run")
    import tempfile
    with tempfile.TemporaryDirectory() as td:
        summary = convert.convert(PUBMED_RAW, Path(td) / "bundle")
        assert summary["num_nodes"] == 19717
        assert summary["feature_dim"] == 500
        assert summary["num_classes"] == 3
        assert sorted(summary["label_histogram"]) == [4103, 7739, 7875]
        assert summary["num_undirected_edges"] == 44338
