"""Graph data model: CSR sparse matrices, normalized adjacency, exact-k-hop
structure, the on-disk graph-bundle format, and a stochastic-block-model
generator used as a desk-scale fixture.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import BundleError, ConfigError, DegenerateRowError, ShapeError
from .tensor import FLOAT, Tensor, _make, as_tensor

BUNDLE_MAGIC = "GRB1"


def _segment_sum(per_entry: np.ndarray, indptr: np.ndarray, n_rows: int) -> np.ndarray:
    """Sum consecutive CSR segments; empty rows yield zero rows."""
    out = np.zeros((n_rows,) + per_entry.shape[1:], dtype=per_entry.dtype)
    counts = np.diff(indptr)
    valid = counts > 0
    if per_entry.shape[0]:
        # reduceat over only the non-empty starts still segments correctly:
        # empty rows contribute no entries between consecutive valid starts.
        out[valid] = np.add.reduceat(per_entry, indptr[:-1][valid], axis=0)
    return out


class SparseMatrix:
    """Immutable CSR matrix with float64 values.

    Column indices are sorted and unique within each row; values are finite.
    """

    __slots__ = ("indptr", "indices", "values", "shape", "_transpose", "_row_ids")

    def __init__(self, indptr, indices, values, shape):
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.values = np.asarray(values, dtype=FLOAT)
        self.shape = (int(shape[0]), int(shape[1]))
        if self.indptr.shape != (self.shape[0] + 1,):
            raise ShapeError("SparseMatrix: indptr length must be rows + 1")
        if self.indices.shape != self.values.shape:
            raise ShapeError("SparseMatrix: indices/values length mismatch")
        if not np.all(np.isfinite(self.values)):
            raise ShapeError("SparseMatrix: non-finite values")
        self._transpose: Optional["SparseMatrix"] = None
        self._row_ids: Optional[np.ndarray] = None

    @classmethod
    def from_coo(cls, rows, cols, vals, shape) -> "SparseMatrix":
        """Build from triplets; duplicate (row, col) entries are summed."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=FLOAT)
        if rows.size:
            order = np.lexsort((cols, rows))
            rows, cols, vals = rows[order], cols[order], vals[order]
            first = np.ones(rows.size, dtype=bool)
            first[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
            starts = np.flatnonzero(first)
            vals = np.add.reduceat(vals, starts)
            rows, cols = rows[starts], cols[starts]
        indptr = np.zeros(shape[0] + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        np.cumsum(indptr, out=indptr)
        return cls(indptr, cols, vals, shape)

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        return cls(np.arange(n + 1), np.arange(n), np.ones(n), (n, n))

    @classmethod
    def from_dense(cls, dense) -> "SparseMatrix":
        dense = np.asarray(dense, dtype=FLOAT)
        rows, cols = np.nonzero(dense)
        return cls.from_coo(rows, cols, dense[rows, cols], dense.shape)

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    @property
    def row_ids(self) -> np.ndarray:
        """Row id of every stored entry, aligned with indices/values."""
        if self._row_ids is None:
            self._row_ids = np.repeat(np.arange(self.shape[0]), np.diff(self.indptr))
        return self._row_ids

    def transpose(self) -> "SparseMatrix":
        if self._transpose is None:
            order = np.lexsort((self.row_ids, self.indices))
            indptr = np.zeros(self.shape[1] + 1, dtype=np.int64)
            np.add.at(indptr, self.indices + 1, 1)
            np.cumsum(indptr, out=indptr)
            self._transpose = SparseMatrix(indptr, self.row_ids[order],
                                           self.values[order],
                                           (self.shape[1], self.shape[0]))
        return self._transpose

    def matmul_dense(self, x: np.ndarray) -> np.ndarray:
        if x.shape[0] != self.shape[1]:
            raise ShapeError(f"spmm: {self.shape} @ {x.shape} inner dims disagree")
        contrib = self.values[:, None] * x[self.indices]
        return _segment_sum(contrib, self.indptr, self.shape[0])

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=FLOAT)
        out[self.row_ids, self.indices] = self.values
        return out


def spmm(m: SparseMatrix, x: Tensor) -> Tensor:
    """Sparse-dense product; the matrix is constant, gradients flow to x."""
    x = as_tensor(x)
    out = m.matmul_dense(x.data)

    def backward(g):
        return (m.transpose().matmul_dense(g),)

    return _make(out, "spmm", (x,), backward)


def segment_softmax(scores: Tensor, m: SparseMatrix) -> Tensor:
    """Softmax of per-entry scores within each CSR row of ``m``.

    ``scores`` is an (nnz, 1) tensor aligned with ``m``'s stored entries;
    rows with no entries are an error (callers insert self-loops first).
    """
    scores = as_tensor(scores)
    if scores.data.shape != (m.nnz, 1):
        raise ShapeError(f"segment_softmax: scores shape {scores.data.shape} "
                         f"!= ({m.nnz}, 1)")
    counts = np.diff(m.indptr)
    if np.any(counts == 0):
        raise DegenerateRowError(
            f"segment_softmax: row {int(np.argmax(counts == 0))} has no entries")
    s = scores.data[:, 0]
    seg_max = np.maximum.reduceat(s, m.indptr[:-1])
    e = np.exp(s - np.repeat(seg_max, counts))
    denom = np.add.reduceat(e, m.indptr[:-1])
    out = (e / np.repeat(denom, counts))[:, None]

    def backward(g):
        ga = g[:, 0] * out[:, 0]
        inner = np.add.reduceat(ga, m.indptr[:-1])
        return ((ga - out[:, 0] * np.repeat(inner, counts))[:, None],)

    return _make(out, "segment_softmax", (scores,), backward)


def attention_aggregate(alpha: Tensor, h: Tensor, m: SparseMatrix) -> Tensor:
    """out[i] = sum over stored entries (i, j) of alpha_entry * h[j]."""
    alpha, h = as_tensor(alpha), as_tensor(h)
    if alpha.data.shape != (m.nnz, 1):
        raise ShapeError(f"attention_aggregate: alpha shape {alpha.data.shape} "
                         f"!= ({m.nnz}, 1)")
    if h.data.shape[0] != m.shape[1]:
        raise ShapeError(f"attention_aggregate: h rows {h.data.shape[0]} "
                         f"!= matrix cols {m.shape[1]}")
    contrib = alpha.data * h.data[m.indices]
    out = _segment_sum(contrib, m.indptr, m.shape[0])

    def backward(g):
        g_rows = g[m.row_ids]
        g_alpha = (g_rows * h.data[m.indices]).sum(axis=1, keepdims=True)
        g_h = np.zeros_like(h.data)
        np.add.at(g_h, m.indices, alpha.data * g_rows)
        return g_alpha, g_h

    return _make(out, "attention_aggregate", (alpha, h), backward)


# ------------------------------------------------------------ adjacency


def _canonical_pairs(edges, num_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Symmetrize + dedup an edge list into sorted directed (src, dst) pairs."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= num_nodes):
        raise BundleError(f"edges: node id out of range [0, {num_nodes})")
    src = np.concatenate([e[:, 0], e[:, 1]])
    dst = np.concatenate([e[:, 1], e[:, 0]])
    key = src * num_nodes + dst
    key = np.unique(key)
    return key // num_nodes, key % num_nodes


def normalize_adjacency(edges, num_nodes: int) -> SparseMatrix:
    """Symmetric normalization with self-loops: D^{-1/2} (A + I) D^{-1/2}.

    The union with the identity is taken binarily, so a pre-existing
    self-loop does not double a node's diagonal.
    """
    src, dst = _canonical_pairs(edges, num_nodes)
    loop = np.arange(num_nodes, dtype=np.int64)
    keep = src != dst
    src = np.concatenate([src[keep], loop])
    dst = np.concatenate([dst[keep], loop])
    deg = np.bincount(src, minlength=num_nodes).astype(FLOAT)
    vals = 1.0 / np.sqrt(deg[src] * deg[dst])
    return SparseMatrix.from_coo(src, dst, vals, (num_nodes, num_nodes))


@dataclass
class HopSet:
    """Per-hop normalized adjacency: hops[k-1] holds exactly-k-hop structure.

    Hop 1 equals the normalized self-looped adjacency. Higher hops contain
    (i, j) only when the shortest-path distance is exactly k, truncated per
    row to the configured neighbor budget, plus self-loops; a level with no
    k-hop pairs anywhere stays truly empty (nnz = 0).
    """

    hops: list[SparseMatrix]
    empty_levels: list[int] = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.hops)

    def hop(self, k: int) -> SparseMatrix:
        return self.hops[k - 1]


def _neighbor_lists(src: np.ndarray, dst: np.ndarray, num_nodes: int):
    indptr = np.zeros(num_nodes + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    np.cumsum(indptr, out=indptr)
    return indptr, dst


def _normalize_binary(src, dst, num_nodes) -> SparseMatrix:
    deg = np.bincount(src, minlength=num_nodes).astype(FLOAT)
    vals = 1.0 / np.sqrt(deg[src] * deg[dst])
    return SparseMatrix.from_coo(src, dst, vals, (num_nodes, num_nodes))


def build_hopset(edges, num_nodes: int, K: int, max_neighbors_per_hop: int = 64) -> HopSet:
    """Exactly-k-hop adjacencies for k = 1..K via per-source BFS.

    Rows of hops beyond the first are truncated to the lowest
    ``max_neighbors_per_hop`` node ids, then re-symmetrized by intersection
    so each level stays symmetric before normalization.
    """
    if K < 1:
        raise ConfigError(f"build_hopset: K must be >= 1, got {K}")
    if max_neighbors_per_hop < 1:
        raise ConfigError("build_hopset: max_neighbors_per_hop must be >= 1")
    src, dst = _canonical_pairs(edges, num_nodes)
    keep = src != dst
    src, dst = src[keep], dst[keep]
    indptr, nbrs = _neighbor_lists(src, dst, num_nodes)

    hops: list[SparseMatrix] = [normalize_adjacency(edges, num_nodes)]
    per_hop_pairs: list[tuple[list, list]] = [([], []) for _ in range(K)]
    dist = np.full(num_nodes, -1, dtype=np.int64)
    for source in range(num_nodes):
        # BFS out to depth K; dist array reset lazily via the visited list.
        visited = [source]
        dist[source] = 0
        frontier = [source]
        for depth in range(1, K + 1):
            nxt = []
            for u in frontier:
                for v in nbrs[indptr[u]:indptr[u + 1]]:
                    if dist[v] < 0:
                        dist[v] = depth
                        visited.append(v)
                        nxt.append(v)
            if depth >= 2 and nxt:
                rs, cs = per_hop_pairs[depth - 1]
                rs.extend([source] * len(nxt))
                cs.extend(sorted(int(v) for v in nxt))
            frontier = nxt
        dist[visited] = -1

    empty_levels = []
    for k in range(2, K + 1):
        rs, cs = per_hop_pairs[k - 1]
        rows = np.asarray(rs, dtype=np.int64)
        cols = np.asarray(cs, dtype=np.int64)
        if rows.size == 0:
            hops.append(SparseMatrix.from_coo([], [], [], (num_nodes, num_nodes)))
            empty_levels.append(k)
            continue
        if max_neighbors_per_hop:
            # Keep each row's lowest column ids, then intersect with the
            # transpose so truncation cannot break symmetry.
            order = np.lexsort((cols, rows))
            rows, cols = rows[order], cols[order]
            starts = np.flatnonzero(np.r_[True, rows[1:] != rows[:-1]])
            offsets = np.arange(rows.size) - np.repeat(starts, np.diff(np.r_[starts, rows.size]))
            keep = offsets < max_neighbors_per_hop
            rows, cols = rows[keep], cols[keep]
            fwd = set(zip(rows.tolist(), cols.tolist()))
            both = [(r, c) for r, c in fwd if (c, r) in fwd]
            rows = np.array([r for r, _ in both], dtype=np.int64)
            cols = np.array([c for _, c in both], dtype=np.int64)
        loop = np.arange(num_nodes, dtype=np.int64)
        rows = np.concatenate([rows, loop])
        cols = np.concatenate([cols, loop])
        hops.append(_normalize_binary(rows, cols, num_nodes))
    return HopSet(hops=hops[:K], empty_levels=empty_levels)


# ------------------------------------------------------------- bundle


@dataclass
class GraphBundle:
    """In-memory dataset: features, undirected edges, labels, split masks."""

    num_nodes: int
    num_classes: int
    features: Tensor
    edges: np.ndarray          # (E, 2) directed pairs, symmetrized + sorted
    labels: np.ndarray         # (n,) int64 class ids
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def feature_dim(self) -> int:
        return self.features.data.shape[1]

    @property
    def num_undirected_edges(self) -> int:
        return int(np.sum(self.edges[:, 0] <= self.edges[:, 1]))

    def validate(self) -> None:
        n, c = self.num_nodes, self.num_classes
        if self.features.data.shape[0] != n:
            raise BundleError(f"features: {self.features.data.shape[0]} rows != num_nodes {n}")
        if self.labels.shape != (n,):
            raise BundleError(f"labels: shape {self.labels.shape} != ({n},)")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= c):
            raise BundleError(f"labels: id outside [0, {c})")
        if self.edges.size:
            if self.edges.min() < 0 or self.edges.max() >= n:
                raise BundleError(f"edges: node id outside [0, {n})")
            key = self.edges[:, 0].astype(np.int64) * n + self.edges[:, 1]
            if np.unique(key).size != key.size:
                raise BundleError("edges: duplicate pairs present")
            if not np.array_equal(key, np.sort(key)):
                raise BundleError("edges: pairs not sorted by (src, dst)")
            rev = self.edges[:, 1].astype(np.int64) * n + self.edges[:, 0]
            if not np.array_equal(np.sort(rev), key):
                raise BundleError("edges: list is not symmetrized")
        seen = np.zeros(n, dtype=np.int8)
        for name, idx in (("train", self.train_idx), ("val", self.val_idx),
                          ("test", self.test_idx)):
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise BundleError(f"masks: {name} id outside [0, {n})")
            if np.any(seen[idx]):
                raise BundleError(f"masks: {name} overlaps another mask")
            seen[idx] = 1

    def mask_bytes(self) -> np.ndarray:
        m = np.zeros(self.num_nodes, dtype=np.uint8)
        m[self.train_idx] = 1
        m[self.val_idx] = 2
        m[self.test_idx] = 3
        return m


def generate_sbm(block_sizes: Sequence[int], p_in: float, p_out: float,
                 feature_dim: int, class_signal: float, seed: int) -> GraphBundle:
    """Stochastic-block-model fixture with class-informative features.

    Features are a per-class mean direction of norm ``class_signal`` plus
    unit Gaussian noise, quantized through f32 so bundle round-trips are
    lossless. Masks are a 60/20/20 stratified split. Deterministic per seed.
    """
    block_sizes = list(block_sizes)
    if not block_sizes or any(int(b) < 3 for b in block_sizes):
        raise ConfigError("generate_sbm: every block needs >= 3 nodes")
    if not (0.0 <= p_in <= 1.0 and 0.0 <= p_out <= 1.0):
        raise ConfigError("generate_sbm: probabilities must lie in [0, 1]")
    if feature_dim < 1:
        raise ConfigError("generate_sbm: feature_dim must be >= 1")
    rng = np.random.default_rng(seed)
    n = int(sum(block_sizes))
    num_classes = len(block_sizes)
    labels = np.repeat(np.arange(num_classes), block_sizes).astype(np.int64)

    prob = np.where(labels[:, None] == labels[None, :], p_in, p_out)
    draw = rng.random((n, n))
    upper = np.triu(draw < prob, k=1)
    si, di = np.nonzero(upper)
    edges = np.concatenate([np.stack([si, di], axis=1),
                            np.stack([di, si], axis=1)]).astype(np.int64)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    edges = edges[order]

    means = rng.standard_normal((num_classes, feature_dim))
    means *= class_signal / np.linalg.norm(means, axis=1, keepdims=True)
    feats = means[labels] + rng.standard_normal((n, feature_dim))
    feats = feats.astype(np.float32).astype(FLOAT)

    train, val, test = [], [], []
    for c in range(num_classes):
        ids = rng.permutation(np.flatnonzero(labels == c))
        m = ids.size
        n_tr = max(1, int(round(m * 0.6)))
        n_va = max(1, int(round(m * 0.2)))
        n_tr = min(n_tr, m - 2)
        train.extend(ids[:n_tr])
        val.extend(ids[n_tr:n_tr + n_va])
        test.extend(ids[n_tr + n_va:])
    bundle = GraphBundle(
        num_nodes=n, num_classes=num_classes, features=Tensor(feats),
        edges=edges, labels=labels,
        train_idx=np.sort(np.asarray(train, dtype=np.int64)),
        val_idx=np.sort(np.asarray(val, dtype=np.int64)),
        test_idx=np.sort(np.asarray(test, dtype=np.int64)))
    bundle.validate()
    return bundle


# --------------------------------------------------------------- file I/O


def write_bundle(bundle: GraphBundle, path) -> None:
    """Write the bit-exact bundle directory format."""
    bundle.validate()
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "magic": BUNDLE_MAGIC,
        "num_nodes": bundle.num_nodes,
        "num_classes": bundle.num_classes,
        "feature_dim": bundle.feature_dim,
        "num_edges": int(bundle.edges.shape[0]),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                   encoding="utf-8")
    (out / "features.bin").write_bytes(
        np.ascontiguousarray(bundle.features.data, dtype="<f4").tobytes())
    (out / "edges.bin").write_bytes(
        np.ascontiguousarray(bundle.edges, dtype="<u4").tobytes())
    (out / "labels.bin").write_bytes(
        np.ascontiguousarray(bundle.labels, dtype="<u2").tobytes())
    (out / "masks.bin").write_bytes(bundle.mask_bytes().tobytes())


def _read_exact(path: Path, dtype, count: int, what: str) -> np.ndarray:
    if not path.is_file():
        raise BundleError(f"{path.name}: file missing")
    raw = path.read_bytes()
    want = count * np.dtype(dtype).itemsize
    if len(raw) != want:
        raise BundleError(f"{path.name}: expected {want} bytes for {what}, got {len(raw)}")
    return np.frombuffer(raw, dtype=dtype)


def read_bundle(path) -> GraphBundle:
    """Read and fully validate a bundle directory; errors name the field."""
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise BundleError(f"meta.json: missing under {root}")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise BundleError(f"meta.json: invalid JSON ({err})") from err
    for key in ("magic", "num_nodes", "num_classes", "feature_dim", "num_edges"):
        if key not in meta:
            raise BundleError(f"meta.json: missing key '{key}'")
    if meta["magic"] != BUNDLE_MAGIC:
        raise BundleError(f"meta.json: magic '{meta['magic']}' != '{BUNDLE_MAGIC}'")
    n, c = int(meta["num_nodes"]), int(meta["num_classes"])
    d, e = int(meta["feature_dim"]), int(meta["num_edges"])
    if min(n, c, d) < 1 or e < 0:
        raise BundleError("meta.json: non-positive dimension")

    feats = _read_exact(root / "features.bin", "<f4", n * d,
                        f"{n}x{d} f32 features").astype(FLOAT).reshape(n, d)
    edges = _read_exact(root / "edges.bin", "<u4", e * 2,
                        f"{e} u32 edge pairs").astype(np.int64).reshape(e, 2)
    labels = _read_exact(root / "labels.bin", "<u2", n,
                         f"{n} u16 labels").astype(np.int64)
    masks = _read_exact(root / "masks.bin", "u1", n, f"{n} mask bytes")
    if masks.size and masks.max() > 3:
        raise BundleError(f"masks.bin: value {int(masks.max())} outside 0..3")
    bundle = GraphBundle(
        num_nodes=n, num_classes=c, features=Tensor(feats), edges=edges,
        labels=labels,
        train_idx=np.flatnonzero(masks == 1).astype(np.int64),
        val_idx=np.flatnonzero(masks == 2).astype(np.int64),
        test_idx=np.flatnonzero(masks == 3).astype(np.int64))
    bundle.validate()
    return bundle


def bundle_summary(bundle: GraphBundle) -> dict:
    """Human/JSON summary used by the validate-bundle command."""
    deg = np.bincount(bundle.edges[:, 0], minlength=bundle.num_nodes) if bundle.edges.size \
        else np.zeros(bundle.num_nodes, dtype=np.int64)
    return {
        "num_nodes": bundle.num_nodes,
        "num_classes": bundle.num_classes,
        "feature_dim": bundle.feature_dim,
        "num_directed_pairs": int(bundle.edges.shape[0]),
        "num_undirected_edges": bundle.num_undirected_edges,
        "isolated_nodes": int(np.sum(deg == 0)),
        "label_histogram": np.bincount(bundle.labels, minlength=bundle.num_classes).tolist(),
        "mask_sizes": {"train": int(bundle.train_idx.size),
                       "val": int(bundle.val_idx.size),
                       "test": int(bundle.test_idx.size)},
    }
