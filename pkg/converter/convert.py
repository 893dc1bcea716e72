#!/usr/bin/env python3
"""Convert raw Planetoid-format citation files into a graph-bundle directory.

The input directory must hold the eight upstream files for one dataset:
``ind.<name>.x``, ``ind.<name>.y``, ``ind.<name>.tx``, ``ind.<name>.ty``,
``ind.<name>.allx``, ``ind.<name>.ally``, ``ind.<name>.graph`` and
``ind.<name>.test.index``.  The first seven are Python pickles (the
feature blocks are scipy CSR matrices, the label blocks one-hot integer
matrices, the graph a node -> neighbour-list dict); the index file lists
the graph positions of the ``tx``/``ty`` rows, one integer per line.

The tool reassembles the full node ordering (test rows are placed at the
positions named in ``test.index``), turns one-hot label rows into class
ids, symmetrizes and deduplicates the adjacency dict (self-loop entries
are dropped; isolated nodes keep no edges), builds train/val/test masks,
and writes the bundle directory format: ``meta.json`` plus little-endian
``features.bin`` (f32), ``edges.bin`` (u32 directed pairs sorted by
(src, dst)), ``labels.bin`` (u16) and ``masks.bin`` (u8, 0=none 1=train
2=val 3=test).

Split modes
    standard    train = the first ``len(y)`` nodes, val = the next 500,
                test = the nodes listed in ``test.index``.
    stratified  same three sizes, but composed per class: the train
                quota is spread uniformly over classes and the val/test
                quotas proportionally to the label histogram (largest
                remainder, ties to the lower class id); within each
                class nodes are taken in ascending id order.

Every ordering is deterministic, so converting the same input twice
yields byte-identical output.  Validation failures exit nonzero with a
named check on stderr.  Published corpus figures (node/feature/class
counts, class distribution, and the undirected edge count) are compared
when the dataset name has known values; differences are logged as named
deviation warnings, not failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import pickle
import sys
from pathlib import Path
from typing import Any

import numpy as np
from scipy import sparse

BUNDLE_MAGIC = "GRB1"
RAW_SUFFIXES = ("x", "y", "tx", "ty", "allx", "ally", "graph", "test.index")
STANDARD_VAL_SIZE = 500

# Published figures for corpora this tool is routinely pointed at.
KNOWN_CORPORA = {
    "pubmed": {
        "num_nodes": 19717,
        "feature_dim": 500,
        "num_classes": 3,
        "undirected_edges": 44338,
        "label_histogram": [4103, 7739, 7875],
    },
}

log = logging.getLogger("planetoid_converter")


class ConvertError(Exception):
    """A named validation failure; ``check`` is the machine-readable name."""

    def __init__(self, check: str, detail: str):
        super().__init__(f"{check}: {detail}")
        self.check = check


@dataclasses.dataclass
class PlanetoidRaw:
    """The eight upstream files for one dataset, loaded into memory."""

    name: str
    x: Any
    y: Any
    tx: Any
    ty: Any
    allx: Any
    ally: Any
    graph: Any
    test_index: list[int]


# ------------------------------------------------------------------ loading


def discover_dataset(in_dir: Path) -> str:
    """Return the single ``<name>`` for which ``ind.<name>.x`` exists."""
    names = sorted({p.name.split(".")[1]
                    for p in in_dir.glob("ind.*.x") if p.name.count(".") >= 2})
    if not names:
        raise ConvertError("missing-raw-file", f"no ind.<name>.x file under {in_dir}")
    if len(names) > 1:
        raise ConvertError("ambiguous-input",
                           f"multiple datasets present: {', '.join(names)}")
    return names[0]


def _load_pickle(path: Path) -> Any:
    try:
        with open(path, "rb") as fh:
            # latin1 decodes byte strings from the upstream Python 2 pickles
            return pickle.load(fh, encoding="latin1")
    except Exception as err:
        raise ConvertError("unreadable-raw-file", f"{path.name}: {err}") from err


def _load_test_index(path: Path) -> list[int]:
    out = []
    for ln, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            out.append(int(line))
        except ValueError:
            raise ConvertError("unreadable-raw-file",
                               f"{path.name}: line {ln} is not an integer") from None
    return out


def load_raw(input_dir) -> PlanetoidRaw:
    in_dir = Path(input_dir)
    if not in_dir.is_dir():
        raise ConvertError("missing-input-dir", str(in_dir))
    name = discover_dataset(in_dir)
    paths = {}
    for suffix in RAW_SUFFIXES:
        p = in_dir / f"ind.{name}.{suffix}"
        if not p.is_file():
            raise ConvertError("missing-raw-file", p.name)
        paths[suffix] = p
    objs = {s: _load_pickle(paths[s]) for s in RAW_SUFFIXES if s != "test.index"}
    return PlanetoidRaw(name=name, test_index=_load_test_index(paths["test.index"]),
                        **objs)


# ----------------------------------------------------------------- assembly


def _dense(mat: Any, name: str) -> np.ndarray:
    arr = mat.toarray() if sparse.issparse(mat) else np.asarray(mat)
    if arr.ndim != 2:
        raise ConvertError("raw-shape", f"{name}: expected a 2-d matrix, got shape {arr.shape}")
    return arr


def onehot_to_ids(rows: np.ndarray, name: str) -> np.ndarray:
    """Strict one-hot rows -> class ids; anything else is a named failure."""
    if rows.size == 0:
        raise ConvertError("label-not-one-hot", f"{name}: empty label matrix")
    if not np.isin(np.unique(rows), (0, 1)).all():
        raise ConvertError("label-not-one-hot", f"{name}: entries outside {{0, 1}}")
    row_sums = rows.sum(axis=1)
    if not (row_sums == 1).all():
        bad = int(np.flatnonzero(row_sums != 1)[0])
        raise ConvertError("label-not-one-hot",
                           f"{name}: row {bad} does not have exactly one 1")
    return rows.argmax(axis=1).astype(np.int64)


def build_edges(graph: Any, num_nodes: int) -> tuple[np.ndarray, dict]:
    """Adjacency dict -> sorted, deduplicated, symmetric directed pair list."""
    if not isinstance(graph, dict):
        raise ConvertError("adjacency-format",
                           f"graph: expected a dict, got {type(graph).__name__}")
    pairs = set()
    raw_entries = 0
    self_loops = 0
    for u, nbrs in graph.items():
        try:
            u = int(u)
        except (TypeError, ValueError):
            raise ConvertError("adjacency-format",
                               f"graph: key {u!r} is not an integer") from None
        if not 0 <= u < num_nodes:
            raise ConvertError("adjacency-out-of-range",
                               f"graph: node {u} outside [0, {num_nodes})")
        for v in nbrs:
            try:
                v = int(v)
            except (TypeError, ValueError):
                raise ConvertError("adjacency-format",
                                   f"graph: neighbour {v!r} of {u} is not an integer") from None
            raw_entries += 1
            if not 0 <= v < num_nodes:
                raise ConvertError("adjacency-out-of-range",
                                   f"graph: neighbour {v} of {u} outside [0, {num_nodes})")
            if u == v:
                self_loops += 1
                continue
            pairs.add((u, v))
            pairs.add((v, u))
    edges = (np.array(sorted(pairs), dtype=np.int64) if pairs
             else np.zeros((0, 2), dtype=np.int64))
    stats = {
        "raw_entries": raw_entries,
        "self_loops_dropped": self_loops,
        "num_directed_pairs": int(edges.shape[0]),
        "num_undirected_edges": int(edges.shape[0]) // 2,
    }
    return edges, stats


def assemble(raw: PlanetoidRaw) -> tuple[np.ndarray, np.ndarray, int, np.ndarray, dict]:
    """Raw blocks -> (features f32, labels, num_classes, edges, edge stats)."""
    x, allx, tx = (_dense(m, n) for m, n in
                   ((raw.x, "x"), (raw.allx, "allx"), (raw.tx, "tx")))
    y, ally, ty = (_dense(m, n) for m, n in
                   ((raw.y, "y"), (raw.ally, "ally"), (raw.ty, "ty")))

    d = allx.shape[1]
    if tx.shape[1] != d or x.shape[1] != d:
        raise ConvertError("feature-dim-mismatch",
                           f"x/tx/allx widths {x.shape[1]}/{tx.shape[1]}/{d} differ")
    if ally.shape[0] != allx.shape[0] or ty.shape[0] != tx.shape[0] \
            or y.shape[0] != x.shape[0]:
        raise ConvertError(
            "feature-label-mismatch",
            f"label rows (y/ty/ally {y.shape[0]}/{ty.shape[0]}/{ally.shape[0]}) do not "
            f"match feature rows (x/tx/allx {x.shape[0]}/{tx.shape[0]}/{allx.shape[0]})")
    num_classes = ally.shape[1]
    if ty.shape[1] != num_classes or y.shape[1] != num_classes:
        raise ConvertError("class-count-mismatch",
                           f"y/ty/ally widths {y.shape[1]}/{ty.shape[1]}/{num_classes} differ")

    n_allx, n_tx = allx.shape[0], tx.shape[0]
    num_nodes = n_allx + n_tx
    if num_nodes > 0xFFFFFFFF:
        raise ConvertError("node-count", f"{num_nodes} nodes exceed the u32 edge format")
    index = raw.test_index
    if len(index) != n_tx:
        raise ConvertError("test-index-count",
                           f"{len(index)} index entries != {n_tx} tx rows")
    ordered = sorted(set(index))
    if len(ordered) != len(index):
        raise ConvertError("test-index-duplicate", "duplicate entries present")
    if ordered != list(range(n_allx, num_nodes)):
        raise ConvertError(
            "node-count",
            f"test.index must cover exactly [{n_allx}, {num_nodes}); "
            f"got {len(ordered)} values in [{ordered[0]}, {ordered[-1]}]")

    placement = np.asarray(index, dtype=np.int64)
    features = np.zeros((num_nodes, d), dtype=np.float32)
    features[:n_allx] = allx.astype(np.float32)
    features[placement] = tx.astype(np.float32)

    labels = np.zeros(num_nodes, dtype=np.int64)
    labels[:n_allx] = onehot_to_ids(ally, "ally")
    labels[placement] = onehot_to_ids(ty, "ty")

    # The train blocks duplicate the head of the all-node blocks upstream;
    # drift means the standard split would train on the wrong rows.
    if not np.array_equal(x.astype(np.float32), features[:x.shape[0]]):
        log.warning("train-prefix-deviation: x rows differ from the first %d allx rows",
                    x.shape[0])
    if not np.array_equal(onehot_to_ids(y, "y"), labels[:y.shape[0]]):
        log.warning("train-prefix-deviation: y rows differ from the first %d ally rows",
                    y.shape[0])

    hist = np.bincount(labels, minlength=num_classes)
    raw_hist = (ally.sum(axis=0) + ty.sum(axis=0)).astype(np.int64)
    if not np.array_equal(hist, raw_hist):
        raise ConvertError("label-histogram",
                           f"assembled histogram {hist.tolist()} != raw "
                           f"one-hot column sums {raw_hist.tolist()}")

    edges, stats = build_edges(raw.graph, num_nodes)
    return features, labels, num_classes, edges, stats


# ------------------------------------------------------------------- splits


def standard_split(n_train: int, n_allx: int,
                   test_ids: list[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if n_train + STANDARD_VAL_SIZE > n_allx:
        raise ConvertError(
            "split-size",
            f"standard split needs {n_train}+{STANDARD_VAL_SIZE} non-test nodes, "
            f"have {n_allx}")
    train = np.arange(n_train, dtype=np.int64)
    val = np.arange(n_train, n_train + STANDARD_VAL_SIZE, dtype=np.int64)
    test = np.sort(np.asarray(test_ids, dtype=np.int64))
    return train, val, test


def largest_remainder(counts: np.ndarray, total: int) -> np.ndarray:
    """Allocate ``total`` seats proportionally to ``counts``; ties to low ids."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.sum() <= 0:
        raise ConvertError("split-size", "no labelled nodes to allocate")
    quota = counts * (total / counts.sum())
    base = np.floor(quota).astype(np.int64)
    leftover = total - int(base.sum())
    order = np.lexsort((np.arange(counts.size), -(quota - base)))
    base[order[:leftover]] += 1
    return base


def stratified_split(labels: np.ndarray, num_classes: int, train_total: int,
                     val_total: int, test_total: int
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    hist = np.bincount(labels, minlength=num_classes)
    train_quota = np.full(num_classes, train_total // num_classes, dtype=np.int64)
    train_quota[:train_total % num_classes] += 1
    val_quota = largest_remainder(hist, val_total)
    test_quota = largest_remainder(hist, test_total)
    need = train_quota + val_quota + test_quota
    if np.any(need > hist):
        c = int(np.flatnonzero(need > hist)[0])
        raise ConvertError("split-size",
                           f"class {c} needs {int(need[c])} nodes for the stratified "
                           f"split but has only {int(hist[c])}")
    train, val, test = [], [], []
    for c in range(num_classes):
        ids = np.flatnonzero(labels == c)
        a = int(train_quota[c])
        b = a + int(val_quota[c])
        e = b + int(test_quota[c])
        train.append(ids[:a])
        val.append(ids[a:b])
        test.append(ids[b:e])
    return tuple(np.sort(np.concatenate(parts)) for parts in (train, val, test))


# ------------------------------------------------------------------ writing


def write_bundle(out_dir, features: np.ndarray, labels: np.ndarray,
                 num_classes: int, edges: np.ndarray, train: np.ndarray,
                 val: np.ndarray, test: np.ndarray) -> None:
    num_nodes = features.shape[0]
    assigned = np.concatenate([train, val, test])
    overlap = np.bincount(assigned, minlength=num_nodes) > 1
    if overlap.any():
        raise ConvertError("split-overlap",
                           f"node {int(np.flatnonzero(overlap)[0])} in multiple masks")
    masks = np.zeros(num_nodes, dtype=np.uint8)
    masks[train] = 1
    masks[val] = 2
    masks[test] = 3
    meta = {
        "magic": BUNDLE_MAGIC,
        "num_nodes": int(num_nodes),
        "num_classes": int(num_classes),
        "feature_dim": int(features.shape[1]),
        "num_edges": int(edges.shape[0]),
    }
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                   encoding="utf-8")
    (out / "features.bin").write_bytes(
        np.ascontiguousarray(features, dtype="<f4").tobytes())
    (out / "edges.bin").write_bytes(np.ascontiguousarray(edges, dtype="<u4").tobytes())
    (out / "labels.bin").write_bytes(np.ascontiguousarray(labels, dtype="<u2").tobytes())
    (out / "masks.bin").write_bytes(masks.tobytes())


# ------------------------------------------------------------ corpus checks


def corpus_checks(name: str, num_nodes: int, feature_dim: int, num_classes: int,
                  hist: np.ndarray, undirected: int) -> None:
    """Compare against published figures; differences warn, never fail."""
    known = KNOWN_CORPORA.get(name)
    if known is None:
        log.info("edge-count check: %d undirected edges "
                 "(no published figure for dataset '%s')", undirected, name)
        return
    for field, got, want in (("num_nodes", num_nodes, known["num_nodes"]),
                             ("feature_dim", feature_dim, known["feature_dim"]),
                             ("num_classes", num_classes, known["num_classes"])):
        if got != want:
            log.warning("corpus-shape-deviation: %s=%d differs from published %d "
                        "for '%s'", field, got, want, name)
    if undirected == known["undirected_edges"]:
        log.info("edge-count check: %d undirected edges "
                 "(matches the published figure for '%s')", undirected, name)
    else:
        log.warning("edge-count-deviation: expected %d undirected edges for '%s', "
                    "found %d", known["undirected_edges"], name, undirected)
    if sorted(hist.tolist()) != sorted(known["label_histogram"]):
        log.warning("label-histogram-deviation: class counts %s differ from "
                    "published %s for '%s'", hist.tolist(),
                    sorted(known["label_histogram"]), name)


# ------------------------------------------------------------------ driving


def convert(input_dir, output_dir, split_mode: str = "standard") -> dict:
    """Convert one raw dataset directory into a bundle directory.

    Returns a summary dict mirroring what gets printed by the CLI.
    """
    if split_mode not in ("standard", "stratified"):
        raise ConvertError("split-mode", f"unknown split mode '{split_mode}'")
    raw = load_raw(input_dir)
    features, labels, num_classes, edges, stats = assemble(raw)
    num_nodes, feature_dim = features.shape
    n_train = _dense(raw.y, "y").shape[0]
    if split_mode == "standard":
        train, val, test = standard_split(n_train, num_nodes - len(raw.test_index),
                                          raw.test_index)
    else:
        train, val, test = stratified_split(labels, num_classes, n_train,
                                            STANDARD_VAL_SIZE, len(raw.test_index))

    hist = np.bincount(labels, minlength=num_classes)
    if stats["self_loops_dropped"]:
        log.info("dropped %d self-loop adjacency entries", stats["self_loops_dropped"])
    log.info("adjacency: %d raw entries -> %d directed pairs (%d undirected edges)",
             stats["raw_entries"], stats["num_directed_pairs"],
             stats["num_undirected_edges"])
    corpus_checks(raw.name, num_nodes, feature_dim, num_classes, hist,
                  stats["num_undirected_edges"])

    write_bundle(output_dir, features, labels, num_classes, edges, train, val, test)
    return {
        "dataset": raw.name,
        "split_mode": split_mode,
        "num_nodes": int(num_nodes),
        "feature_dim": int(feature_dim),
        "num_classes": int(num_classes),
        "num_directed_pairs": stats["num_directed_pairs"],
        "num_undirected_edges": stats["num_undirected_edges"],
        "self_loops_dropped": stats["self_loops_dropped"],
        "label_histogram": hist.tolist(),
        "mask_sizes": {"train": int(train.size), "val": int(val.size),
                       "test": int(test.size)},
        "out": str(Path(output_dir)),
    }


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="convert.py",
        description="Convert raw Planetoid-format citation files into a "
                    "graph-bundle directory.")
    parser.add_argument("--in", dest="in_dir", required=True, metavar="DIR",
                        help="directory holding the eight ind.<name>.* files")
    parser.add_argument("--out", dest="out_dir", required=True, metavar="DIR",
                        help="bundle directory to write")
    parser.add_argument("--split", choices=("standard", "stratified"),
                        default="standard",
                        help="mask layout (default: standard)")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        summary = convert(args.in_dir, args.out_dir, args.split)
    except ConvertError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
