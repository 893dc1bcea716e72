"""The three node classifiers: a plain two-layer GCN, a residual/layer-norm
variant, and a multi-hop GAT with learnable hop mixing. All share a
checkpoint format of meta.json + params.bin (little-endian f64, declaration
order)."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import DataError, ShapeError
from .graph import (
    GraphBundle,
    HopSet,
    SparseMatrix,
    attention_aggregate,
    build_hopset,
    normalize_adjacency,
    segment_softmax,
    spmm,
)
from .tensor import FLOAT, Tensor


def glorot(rng: np.random.Generator, rows: int, cols: int) -> Tensor:
    limit = np.sqrt(6.0 / (rows + cols))
    return Tensor(rng.uniform(-limit, limit, size=(rows, cols)), requires_grad=True)


def _ones(cols: int) -> Tensor:
    return Tensor(np.ones((1, cols)), requires_grad=True)


def _zeros(rows: int, cols: int) -> Tensor:
    return Tensor(np.zeros((rows, cols)), requires_grad=True)


class GcnModel:
    """Two-layer graph convolution: logits = A·relu(A·dropout(X)·W0)·W1."""

    kind = "gcn"

    def __init__(self, feature_dim: int, num_classes: int, hidden: int = 16,
                 dropout: float = 0.5, seed: int = 0):
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        self.hidden = hidden
        self.dropout = dropout
        self.seed = seed
        self.epoch = 0
        rng = np.random.default_rng(seed)
        self.w0 = glorot(rng, feature_dim, hidden)
        self.w1 = glorot(rng, hidden, num_classes)

    def params(self) -> list[tuple[str, Tensor]]:
        return [("w0", self.w0), ("w1", self.w1)]

    def _hidden_layer(self, x: Tensor, adj: SparseMatrix, train: bool, epoch: int) -> Tensor:
        x = T.dropout(x, self.dropout, train, key=(self.seed, epoch, 0))
        return T.relu(spmm(adj, T.matmul(x, self.w0)))

    def forward(self, x: Tensor, adj: SparseMatrix, train: bool = False,
                epoch: int = 0) -> Tensor:
        h = self._hidden_layer(x, adj, train, epoch)
        return spmm(adj, T.matmul(h, self.w1))

    def embed(self, x: Tensor, adj: SparseMatrix) -> Tensor:
        return self._hidden_layer(x, adj, train=False, epoch=0)

    def to_meta(self) -> dict:
        return {"kind": self.kind, "feature_dim": self.feature_dim,
                "num_classes": self.num_classes, "hidden": self.hidden,
                "dropout": self.dropout, "seed": self.seed, "epoch": self.epoch}

    @classmethod
    def from_meta(cls, meta: dict) -> "GcnModel":
        return cls(meta["feature_dim"], meta["num_classes"], meta["hidden"],
                   meta["dropout"], meta["seed"])


class ResidualGnnModel:
    """Two GCN layers, each followed by layer norm, with projected residual
    connections around both layers and a lower dropout rate."""

    kind = "gnn"

    def __init__(self, feature_dim: int, num_classes: int, hidden: int = 64,
                 dropout: float = 0.3, seed: int = 0):
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        self.hidden = hidden
        self.dropout = dropout
        self.seed = seed
        self.epoch = 0
        rng = np.random.default_rng(seed)
        self.w0 = glorot(rng, feature_dim, hidden)
        self.ln0_gain, self.ln0_bias = _ones(hidden), _zeros(1, hidden)
        # residual paths project only when shapes differ, identity otherwise
        self.p_in = glorot(rng, feature_dim, hidden) if feature_dim != hidden else None
        self.w1 = glorot(rng, hidden, num_classes)
        self.ln1_gain, self.ln1_bias = _ones(num_classes), _zeros(1, num_classes)
        self.p_out = glorot(rng, hidden, num_classes) if hidden != num_classes else None

    def params(self) -> list[tuple[str, Tensor]]:
        out = [("w0", self.w0), ("ln0_gain", self.ln0_gain), ("ln0_bias", self.ln0_bias)]
        if self.p_in is not None:
            out.append(("p_in", self.p_in))
        out += [("w1", self.w1), ("ln1_gain", self.ln1_gain), ("ln1_bias", self.ln1_bias)]
        if self.p_out is not None:
            out.append(("p_out", self.p_out))
        return out

    def _hidden_layer(self, x: Tensor, adj: SparseMatrix, train: bool, epoch: int) -> Tensor:
        z = T.dropout(x, self.dropout, train, key=(self.seed, epoch, 0))
        z = spmm(adj, T.matmul(z, self.w0))
        z = T.relu(T.layer_norm(z, self.ln0_gain, self.ln0_bias))
        res = T.matmul(x, self.p_in) if self.p_in is not None else x
        return T.add(z, res)

    def forward(self, x: Tensor, adj: SparseMatrix, train: bool = False,
                epoch: int = 0) -> Tensor:
        h = self._hidden_layer(x, adj, train, epoch)
        z = T.dropout(h, self.dropout, train, key=(self.seed, epoch, 1))
        z = spmm(adj, T.matmul(z, self.w1))
        z = T.layer_norm(z, self.ln1_gain, self.ln1_bias)
        res = T.matmul(h, self.p_out) if self.p_out is not None else h
        return T.add(z, res)

    def embed(self, x: Tensor, adj: SparseMatrix) -> Tensor:
        return self._hidden_layer(x, adj, train=False, epoch=0)

    def to_meta(self) -> dict:
        return {"kind": self.kind, "feature_dim": self.feature_dim,
                "num_classes": self.num_classes, "hidden": self.hidden,
                "dropout": self.dropout, "seed": self.seed, "epoch": self.epoch}

    @classmethod
    def from_meta(cls, meta: dict) -> "ResidualGnnModel":
        return cls(meta["feature_dim"], meta["num_classes"], meta["hidden"],
                   meta["dropout"], meta["seed"])


def gat_attention(h: Tensor, hop_matrix: SparseMatrix, head_params) -> Tensor:
    """One attention head over the stored neighbor sets of ``hop_matrix``.

    Scores use the concatenation form a^T [W h_i || W h_j], decomposed as
    (W h_i)·a_src + (W h_j)·a_dst, leaky-relu'd and softmax-normalized over
    each row's neighbors; the output is the attention-weighted sum of W·h_j.
    """
    w, a_src, a_dst = head_params
    n = h.data.shape[0]
    if hop_matrix.shape != (n, n):
        raise ShapeError(f"gat_attention: matrix {hop_matrix.shape} vs {n} nodes")
    wh = T.matmul(h, w)
    u = T.matmul(wh, a_src)   # (n, 1) source-side score parts
    v = T.matmul(wh, a_dst)   # (n, 1) destination-side parts
    scores = T.leaky_relu(
        T.add(T.gather_rows(u, hop_matrix.row_ids),
              T.gather_rows(v, hop_matrix.indices)), slope=0.2)
    alpha = segment_softmax(scores, hop_matrix)
    return attention_aggregate(alpha, wh, hop_matrix)


class MultiHopGatModel:
    """Per-hop two-head attention, hop outputs mixed by softmax(beta), then
    layer norm, a projected residual from the inputs, and a linear output."""

    kind = "mhgat"

    def __init__(self, feature_dim: int, num_classes: int, head_dim: int = 16,
                 heads: int = 2, K: int = 2, max_neighbors: int = 64, seed: int = 0):
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        self.head_dim = head_dim
        self.heads = heads
        self.K = K
        self.max_neighbors = max_neighbors
        self.seed = seed
        self.epoch = 0
        rng = np.random.default_rng(seed)
        self.attn = []  # [hop][head] -> (w, a_src, a_dst)
        for _ in range(K):
            hop_heads = []
            for _ in range(heads):
                hop_heads.append((glorot(rng, feature_dim, head_dim),
                                  glorot(rng, head_dim, 1),
                                  glorot(rng, head_dim, 1)))
            self.attn.append(hop_heads)
        self.beta = _zeros(1, K)  # zero logits: equal hop mixing at init
        width = heads * head_dim
        self.ln_gain, self.ln_bias = _ones(width), _zeros(1, width)
        self.p_res = glorot(rng, feature_dim, width) if feature_dim != width else None
        self.w_out = glorot(rng, width, num_classes)

    def params(self) -> list[tuple[str, Tensor]]:
        out = []
        for k, hop_heads in enumerate(self.attn):
            for h, (w, a_s, a_d) in enumerate(hop_heads):
                out += [(f"w_h{k}_{h}", w), (f"a_src_h{k}_{h}", a_s),
                        (f"a_dst_h{k}_{h}", a_d)]
        out += [("beta", self.beta), ("ln_gain", self.ln_gain), ("ln_bias", self.ln_bias)]
        if self.p_res is not None:
            out.append(("p_res", self.p_res))
        out.append(("w_out", self.w_out))
        return out

    def _mixed_hidden(self, x: Tensor, hopset: HopSet) -> Tensor:
        if hopset.K != self.K:
            raise ShapeError(f"hopset has K={hopset.K}, model expects {self.K}")
        n = x.data.shape[0]
        width = self.heads * self.head_dim
        mix = T.row_softmax(self.beta)  # (1, K), sums to 1
        z: Optional[Tensor] = None
        for k in range(self.K):
            hop = hopset.hop(k + 1)
            if hop.nnz == 0:
                # level beyond the graph diameter: contributes nothing but
                # still occupies a softmax slot
                continue
            heads_out = [gat_attention(x, hop, hp) for hp in self.attn[k]]
            zk = T.mul(T.concat_cols(heads_out), T.slice_cols(mix, k, k + 1))
            z = zk if z is None else T.add(z, zk)
        if z is None:
            z = Tensor(np.zeros((n, width)))
        hidden = T.layer_norm(z, self.ln_gain, self.ln_bias)
        res = T.matmul(x, self.p_res) if self.p_res is not None else x
        return T.add(hidden, res)

    def forward(self, x: Tensor, hopset: HopSet, train: bool = False,
                epoch: int = 0) -> Tensor:
        return T.matmul(self._mixed_hidden(x, hopset), self.w_out)

    def embed(self, x: Tensor, hopset: HopSet) -> Tensor:
        return self._mixed_hidden(x, hopset)

    def to_meta(self) -> dict:
        return {"kind": self.kind, "feature_dim": self.feature_dim,
                "num_classes": self.num_classes, "head_dim": self.head_dim,
                "heads": self.heads, "K": self.K,
                "max_neighbors": self.max_neighbors, "seed": self.seed,
                "epoch": self.epoch}

    @classmethod
    def from_meta(cls, meta: dict) -> "MultiHopGatModel":
        return cls(meta["feature_dim"], meta["num_classes"], meta["head_dim"],
                   meta["heads"], meta["K"], meta["max_neighbors"], meta["seed"])


MODEL_KINDS = {m.kind: m for m in (GcnModel, ResidualGnnModel, MultiHopGatModel)}


def build_structure(model, bundle: GraphBundle):
    """The propagation structure a model forward expects: hop set for the
    multi-hop GAT, normalized adjacency otherwise."""
    if isinstance(model, MultiHopGatModel):
        return build_hopset(bundle.edges, bundle.num_nodes, model.K, model.max_neighbors)
    return normalize_adjacency(bundle.edges, bundle.num_nodes)


def model_forward(model, bundle: GraphBundle, structure, train: bool = False,
                  epoch: int = 0) -> Tensor:
    return model.forward(bundle.features, structure, train=train, epoch=epoch)


def embed(model, bundle: GraphBundle, structure) -> Tensor:
    """Penultimate (pre-classifier) representation, eval mode."""
    return model.embed(bundle.features, structure)


# ------------------------------------------------------------ checkpoints


def save_checkpoint(model, path) -> None:
    """meta.json + params.bin (little-endian f64, declaration order)."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    meta = model.to_meta()
    meta["param_shapes"] = [[name, list(t.data.shape)] for name, t in model.params()]
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                   encoding="utf-8")
    blob = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes()
                    for _, t in model.params())
    (out / "params.bin").write_bytes(blob)


def load_checkpoint(path):
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise DataError(f"checkpoint meta.json missing under {root}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    kind = meta.get("kind")
    if kind not in MODEL_KINDS:
        raise DataError(f"checkpoint: unknown model kind '{kind}'")
    model = MODEL_KINDS[kind].from_meta(meta)
    model.epoch = meta.get("epoch", 0)
    params = model.params()
    want_shapes = [[name, list(t.data.shape)] for name, t in params]
    if meta.get("param_shapes") != want_shapes:
        raise DataError("checkpoint: parameter layout does not match meta")
    raw = (root / "params.bin").read_bytes()
    total = sum(t.data.size for _, t in params)
    if len(raw) != total * 8:
        raise DataError(f"checkpoint: params.bin holds {len(raw)} bytes, "
                        f"expected {total * 8}")
    flat = np.frombuffer(raw, dtype="<f8")
    at = 0
    for _, t in params:
        t.data = flat[at:at + t.data.size].reshape(t.data.shape).astype(FLOAT)
        at += t.data.size
    return model


def snapshot_params(model) -> list[np.ndarray]:
    return [t.data.copy() for _, t in model.params()]


def restore_params(model, snapshot: list[np.ndarray]) -> None:
    for (_, t), arr in zip(model.params(), snapshot):
        t.data = arr.copy()
