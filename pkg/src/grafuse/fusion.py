"""Expert fusion: fixed per-class weighting, confidence-adaptive weighting,
and transport-guided fusion through class-specific projection heads, plus
validation-driven strategy selection.

The guided strategy projects both experts' embeddings into a shared space
with per-class two-layer perceptrons, scores classes there, and blends
per-class base weights with per-node confidences via the balance factor
alpha_c; projections are trained with fused cross-entropy plus per-class
transport losses (heavier on the focus class).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DataError, NumericError
from .graph import GraphBundle
from .models import glorot
from .tensor import FLOAT, Tensor
from .training import Adam, evaluate
from .transport import TransportConfig, class_wr_loss

STRATEGY_ORDER = {"fixed": 0, "adaptive": 1, "wr": 2}


def default_base_weights(num_classes: int, focus_class: Optional[int] = None) -> np.ndarray:
    """(gnn, gat) weight pairs per class: the focus class leans on the
    attention expert, every other class on the smoothing expert."""
    if focus_class is None:
        focus_class = 2 if num_classes > 2 else num_classes - 1
    w = np.tile(np.array([0.95, 0.05]), (num_classes, 1))
    w[focus_class] = [0.2, 0.8]
    return w


def default_lambdas(num_classes: int, focus_class: Optional[int] = None) -> tuple:
    if focus_class is None:
        focus_class = 2 if num_classes > 2 else num_classes - 1
    lam = [0.01] * num_classes
    lam[focus_class] = 0.1
    return tuple(lam)


@dataclass
class FusionPolicy:
    strategy: str
    base_weights: np.ndarray           # (C, 2), rows sum to 1
    balance: np.ndarray                # (C,) alpha_c in [0, 1]
    projections: Optional["ProjectionHeads"] = None

    def __post_init__(self):
        self.base_weights = np.asarray(self.base_weights, dtype=FLOAT)
        self.balance = np.asarray(self.balance, dtype=FLOAT).reshape(-1)
        if self.strategy not in STRATEGY_ORDER:
            raise ConfigError(f"unknown fusion strategy '{self.strategy}'")
        if self.base_weights.ndim != 2 or self.base_weights.shape[1] != 2:
            raise ConfigError("base_weights must be (num_classes, 2)")
        if np.abs(self.base_weights.sum(axis=1) - 1.0).max() > 1e-12:
            raise ConfigError("base_weights rows must sum to 1")
        if self.balance.shape[0] != self.base_weights.shape[0]:
            raise ConfigError("balance length != number of classes")
        if self.balance.min() < 0.0 or self.balance.max() > 1.0:
            raise ConfigError("balance factors must lie in [0, 1]")

    @property
    def num_classes(self) -> int:
        return self.base_weights.shape[0]


@dataclass
class FusedPrediction:
    probs: np.ndarray       # (n, C) rows sum to 1
    weights: np.ndarray     # (n, C, 2) applied (gnn, gat) weight per class
    strategy: str


def _check_stochastic(name: str, p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=FLOAT)
    if p.ndim != 2:
        raise ContractError(f"{name}: expected (n, C) probabilities")
    if np.abs(p.sum(axis=1) - 1.0).max() > 1e-6 or p.min() < -1e-12:
        raise ContractError(f"{name}: rows are not probability vectors")
    return p


def fixed_fuse(p_gnn, p_gat, policy: FusionPolicy) -> FusedPrediction:
    """Per-class predefined weights; rows renormalized afterwards since
    class-dependent weights break row-stochasticity."""
    p_gnn = _check_stochastic("p_gnn", p_gnn)
    p_gat = _check_stochastic("p_gat", p_gat)
    w = policy.base_weights
    fused = w[:, 0][None, :] * p_gnn + w[:, 1][None, :] * p_gat
    fused = fused / fused.sum(axis=1, keepdims=True)
    n = p_gnn.shape[0]
    weights = np.broadcast_to(w[None, :, :], (n, policy.num_classes, 2)).copy()
    return FusedPrediction(fused, weights, "fixed")


def adaptive_fuse(p_gnn, p_gat) -> FusedPrediction:
    """Per-node weights proportional to each model's max-probability
    confidence; a convex row mix, so rows stay stochastic."""
    p_gnn = _check_stochastic("p_gnn", p_gnn)
    p_gat = _check_stochastic("p_gat", p_gat)
    conf = np.stack([p_gnn.max(axis=1), p_gat.max(axis=1)], axis=1)
    w = conf / conf.sum(axis=1, keepdims=True)
    fused = w[:, 0:1] * p_gnn + w[:, 1:2] * p_gat
    n, c = p_gnn.shape
    weights = np.broadcast_to(w[:, None, :], (n, c, 2)).copy()
    return FusedPrediction(fused, weights, "adaptive")


def guided_weights(conf_gnn: np.ndarray, conf_gat: np.ndarray,
                   policy: FusionPolicy) -> np.ndarray:
    """w_{m,c}[i] = alpha_c * base_{m,c} + (1 - alpha_c) * conf_m[i],
    renormalized so the two models' weights sum to 1 per (node, class)."""
    alpha = policy.balance[None, :]                    # (1, C)
    base = policy.base_weights                         # (C, 2)
    wg = alpha * base[:, 0][None, :] + (1 - alpha) * conf_gnn[:, None]
    wa = alpha * base[:, 1][None, :] + (1 - alpha) * conf_gat[:, None]
    total = wg + wa
    return np.stack([wg / total, wa / total], axis=2)  # (n, C, 2)


def _blend(p_gnn: np.ndarray, p_gat: np.ndarray, weights: np.ndarray):
    fused = weights[:, :, 0] * p_gnn + weights[:, :, 1] * p_gat
    return fused / fused.sum(axis=1, keepdims=True)


def wr_fuse(embed_gnn, embed_gat, policy: FusionPolicy,
            heads: Optional["ProjectionHeads"] = None) -> FusedPrediction:
    """Transport-guided fusion: class-projected scores from both embeddings,
    then the alpha-balanced weight blend, then the weighted class mix."""
    heads = heads if heads is not None else policy.projections
    if heads is None:
        raise ConfigError("wr_fuse: policy has no trained projection heads")
    p_gnn = heads.model_probs(T.as_tensor(embed_gnn), "gnn").data
    p_gat = heads.model_probs(T.as_tensor(embed_gat), "gat").data
    weights = guided_weights(p_gnn.max(axis=1), p_gat.max(axis=1), policy)
    return FusedPrediction(_blend(p_gnn, p_gat, weights), weights, "wr")


def raw_guided_fuse(p_gnn, p_gat, policy: FusionPolicy) -> FusedPrediction:
    """The guided weight formula applied to the experts' own probabilities,
    with no projection step: the no-projection ablation arm."""
    p_gnn = _check_stochastic("p_gnn", p_gnn)
    p_gat = _check_stochastic("p_gat", p_gat)
    weights = guided_weights(p_gnn.max(axis=1), p_gat.max(axis=1), policy)
    return FusedPrediction(_blend(p_gnn, p_gat, weights), weights, "wr")


# -------------------------------------------------------- projection heads


class ProjectionHeads:
    """Per-class two-layer perceptrons mapping each expert's embedding into
    a common space, scored there by per-class vectors shared across experts."""

    def __init__(self, d_gnn: int, d_gat: int, num_classes: int,
                 proj_dim: Optional[int] = None, seed: int = 0):
        self.d_gnn, self.d_gat = d_gnn, d_gat
        self.num_classes = num_classes
        self.proj_dim = proj_dim if proj_dim is not None else min(d_gnn, d_gat)
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.class_params = []
        for _ in range(num_classes):
            self.class_params.append({
                "gnn_w1": glorot(rng, d_gnn, d_gnn),
                "gnn_w2": glorot(rng, d_gnn, self.proj_dim),
                "gat_w1": glorot(rng, d_gat, d_gat),
                "gat_w2": glorot(rng, d_gat, self.proj_dim),
                "scorer": glorot(rng, self.proj_dim, 1),
            })

    def params(self) -> list[tuple[str, Tensor]]:
        out = []
        for c, cp in enumerate(self.class_params):
            for key in ("gnn_w1", "gnn_w2", "gat_w1", "gat_w2", "scorer"):
                out.append((f"c{c}_{key}", cp[key]))
        return out

    def project(self, embedding: Tensor, model_key: str, class_id: int) -> Tensor:
        cp = self.class_params[class_id]
        w1, w2 = cp[f"{model_key}_w1"], cp[f"{model_key}_w2"]
        return T.matmul(T.relu(T.matmul(embedding, w1)), w2)

    def model_probs(self, embedding: Tensor, model_key: str) -> Tensor:
        cols = [T.matmul(self.project(embedding, model_key, c),
                         self.class_params[c]["scorer"])
                for c in range(self.num_classes)]
        return T.row_softmax(T.concat_cols(cols))

    def to_meta(self) -> dict:
        return {"d_gnn": self.d_gnn, "d_gat": self.d_gat,
                "num_classes": self.num_classes, "proj_dim": self.proj_dim,
                "seed": self.seed}

    @classmethod
    def from_meta(cls, meta: dict) -> "ProjectionHeads":
        return cls(meta["d_gnn"], meta["d_gat"], meta["num_classes"],
                   meta["proj_dim"], meta["seed"])


@dataclass
class FusionConfig:
    alpha: float = 0.7
    base_weights: Optional[Sequence] = None
    lambdas: Optional[Sequence] = None
    focus_class: Optional[int] = None
    proj_dim: Optional[int] = None
    lr: float = 0.01
    weight_decay: float = 0.0
    max_epochs: int = 200
    patience: int = 30
    seed: int = 0
    transport: TransportConfig = field(default_factory=TransportConfig)

    def resolve(self, num_classes: int) -> tuple[np.ndarray, np.ndarray, tuple]:
        base = (np.asarray(self.base_weights, dtype=FLOAT)
                if self.base_weights is not None
                else default_base_weights(num_classes, self.focus_class))
        balance = np.full(num_classes, self.alpha, dtype=FLOAT)
        lam = (tuple(self.lambdas) if self.lambdas is not None
               else default_lambdas(num_classes, self.focus_class))
        if len(lam) != num_classes:
            raise ConfigError(f"lambdas length {len(lam)} != {num_classes} classes")
        return base, balance, lam


def train_wr_heads(embed_gnn: Tensor, embed_gat: Tensor, bundle: GraphBundle,
                   cfg: FusionConfig):
    """Train the projection heads on frozen expert embeddings.

    Loss per epoch: fused-prediction cross-entropy on the train mask plus
    sum_c lambda_c * transport distance between the class-c projections of
    the two experts. Early-stops on fused validation accuracy and restores
    the best snapshot. Returns (policy, history).
    """
    if bundle.train_idx.size == 0 or bundle.val_idx.size == 0:
        raise ContractError("train_wr_heads: empty train or val mask")
    c = bundle.num_classes
    base, balance, lam = cfg.resolve(c)
    policy = FusionPolicy("wr", base, balance)
    heads = ProjectionHeads(embed_gnn.data.shape[1], embed_gat.data.shape[1],
                            c, cfg.proj_dim, cfg.seed)
    policy.projections = heads
    e_gnn, e_gat = embed_gnn.detach(), embed_gat.detach()
    opt = Adam(heads.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    best_acc, best_snap, since = -1.0, None, 0
    history: list[dict] = []
    labels, train_idx = bundle.labels, bundle.train_idx
    for epoch in range(1, cfg.max_epochs + 1):
        opt.zero_grad()
        p_gnn = heads.model_probs(e_gnn, "gnn")
        p_gat = heads.model_probs(e_gat, "gat")
        # weights are held constant within the step: gradients flow through
        # the class probabilities, not the confidence blend
        weights = guided_weights(p_gnn.data.max(axis=1), p_gat.data.max(axis=1),
                                 policy)
        fused = T.row_normalize(T.add(T.mul(p_gnn, Tensor(weights[:, :, 0])),
                                      T.mul(p_gat, Tensor(weights[:, :, 1]))))
        loss = T.masked_nll(fused, labels, train_idx)
        wr_terms = {}
        tcfg = dataclasses.replace(cfg.transport, seed=cfg.seed, epoch=epoch)
        for cls in range(c):
            if lam[cls] == 0.0:
                continue
            term = class_wr_loss(heads.project(e_gnn, "gnn", cls),
                                 heads.project(e_gat, "gat", cls),
                                 labels, train_idx, cls, tcfg)
            wr_terms[cls] = term.data.item()
            loss = T.add(loss, T.mul(term, Tensor([[lam[cls]]])))
        loss_val = loss.data.item()
        if not np.isfinite(loss_val):
            raise NumericError(f"train_wr_heads: non-finite loss at epoch {epoch} "
                               f"(wr terms: {wr_terms})")
        T.backward(loss)
        opt.step()
        val_pred = wr_fuse(e_gnn, e_gat, policy, heads)
        val_acc = float(np.mean(val_pred.probs.argmax(axis=1)[bundle.val_idx]
                                == labels[bundle.val_idx]))
        entry = {"epoch": epoch, "train_loss": loss_val, "val_acc": val_acc}
        entry.update({f"wr_class_{k}": v for k, v in wr_terms.items()})
        history.append(entry)
        if val_acc > best_acc:
            best_acc, since = val_acc, 0
            best_snap = [t.data.copy() for _, t in heads.params()]
        else:
            since += 1
            if since >= cfg.patience:
                break
    if best_snap is not None:
        for (_, t), arr in zip(heads.params(), best_snap):
            t.data = arr.copy()
    return policy, history


def select_strategy(candidates: Sequence[tuple[FusionPolicy, FusedPrediction]],
                    bundle: GraphBundle):
    """Highest validation accuracy wins; ties break to lower validation CV,
    then to the fixed < adaptive < wr order."""
    if len(candidates) < 2:
        raise ContractError("select_strategy: need >= 2 candidates")
    scored = []
    for policy, fused in candidates:
        rep = evaluate(fused.probs, bundle, bundle.val_idx)
        scored.append((-rep.accuracy, rep.cv, STRATEGY_ORDER[fused.strategy],
                       policy, fused, rep))
    scored.sort(key=lambda s: s[:3])
    _, _, _, policy, fused, rep = scored[0]
    return policy, fused, rep


# ----------------------------------------------------------- persistence


def save_policy(policy: FusionPolicy, path) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "kind": "fusion_policy",
        "strategy": policy.strategy,
        "base_weights": policy.base_weights.tolist(),
        "balance": policy.balance.tolist(),
        "projections": policy.projections.to_meta() if policy.projections else None,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                   encoding="utf-8")
    blob = b""
    if policy.projections is not None:
        blob = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes()
                        for _, t in policy.projections.params())
    (out / "params.bin").write_bytes(blob)


def load_policy(path) -> FusionPolicy:
    root = Path(path)
    meta_file = root / "meta.json"
    if not meta_file.is_file():
        raise DataError(f"policy meta.json missing under {root}")
    meta = json.loads(meta_file.read_text(encoding="utf-8"))
    if meta.get("kind") != "fusion_policy":
        raise DataError(f"not a fusion policy checkpoint: kind={meta.get('kind')!r}")
    policy = FusionPolicy(meta["strategy"], np.array(meta["base_weights"]),
                          np.array(meta["balance"]))
    if meta.get("projections"):
        heads = ProjectionHeads.from_meta(meta["projections"])
        raw = (root / "params.bin").read_bytes()
        total = sum(t.data.size for _, t in heads.params())
        if len(raw) != total * 8:
            raise DataError(f"policy params.bin holds {len(raw)} bytes, "
                            f"expected {total * 8}")
        flat = np.frombuffer(raw, dtype="<f8")
        at = 0
        for _, t in heads.params():
            t.data = flat[at:at + t.data.size].reshape(t.data.shape).astype(FLOAT)
            at += t.data.size
        policy.projections = heads
    return policy
