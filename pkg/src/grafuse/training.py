"""Training loop (Adam + early stopping on validation accuracy) and the
evaluation metrics: per-class accuracy, precision/recall/F1, coefficient of
variation, confusion matrix."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DomainError, NumericError
from .graph import GraphBundle
from .models import build_structure, model_forward, restore_params, snapshot_params
from .tensor import FLOAT, Tensor


@dataclass
class TrainConfig:
    lr: float = 0.01
    weight_decay: float = 5e-4
    max_epochs: int = 500
    patience: int = 50
    seed: int = 0
    model_kind: str = "gcn"
    # per-class transport-loss coefficients, used by fusion-head training
    loss_coefficients: tuple = ()

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if not 1 <= self.patience <= self.max_epochs:
            raise ConfigError(f"patience {self.patience} outside [1, max_epochs]")


class Adam:
    """Adaptive-moment descent with coupled L2 weight decay."""

    def __init__(self, params: Sequence[tuple[str, Tensor]], lr: float = 0.01,
                 weight_decay: float = 0.0, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, (_, p) in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (self.m[i] / bc1) / (
                np.sqrt(self.v[i] / bc2) + self.eps)


def predict_probs(model, bundle: GraphBundle, structure) -> np.ndarray:
    logits = model_forward(model, bundle, structure, train=False)
    return T.row_softmax(logits).data


def _accuracy(pred: np.ndarray, labels: np.ndarray, idx: np.ndarray) -> float:
    return float(np.mean(pred[idx] == labels[idx]))


def train(model, bundle: GraphBundle, cfg: TrainConfig, structure=None):
    """Optimize train-mask cross-entropy; keep the best-validation snapshot.

    Returns (model, history) with the model restored to the epoch of highest
    validation accuracy. Raises NumericError on a non-finite loss, with the
    best snapshot attached as ``last_good``.
    """
    if bundle.train_idx.size == 0 or bundle.val_idx.size == 0:
        raise ContractError("train: empty train or val mask")
    if structure is None:
        structure = build_structure(model, bundle)
    opt = Adam(model.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    best_acc = -1.0
    best_snapshot = snapshot_params(model)
    best_epoch = 0
    since_best = 0
    history: list[dict] = []
    for epoch in range(1, cfg.max_epochs + 1):
        opt.zero_grad()
        loss = T.masked_cross_entropy(
            model_forward(model, bundle, structure, train=True, epoch=epoch),
            bundle.labels, bundle.train_idx)
        loss_val = loss.data.item()
        if not np.isfinite(loss_val):
            restore_params(model, best_snapshot)
            err = NumericError(
                f"train: non-finite loss at epoch {epoch}; reverted to the "
                f"epoch-{best_epoch} snapshot (val acc {max(best_acc, 0.0):.4f})")
            err.last_good = best_snapshot
            err.epoch = epoch
            raise err
        T.backward(loss)
        opt.step()
        pred = predict_probs(model, bundle, structure).argmax(axis=1)
        val_acc = _accuracy(pred, bundle.labels, bundle.val_idx)
        history.append({"epoch": epoch, "train_loss": loss_val, "val_acc": val_acc})
        if val_acc > best_acc:
            best_acc = val_acc
            best_snapshot = snapshot_params(model)
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    restore_params(model, best_snapshot)
    model.epoch = best_epoch
    return model, history


def save_history(history: list[dict], path) -> None:
    """One JSON object per epoch per line."""
    lines = [json.dumps(h, sort_keys=True) for h in history]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""),
                          encoding="utf-8")


# --------------------------------------------------------------- metrics


@dataclass
class MetricsReport:
    accuracy: float
    per_class_accuracy: list
    precision: list
    recall: list
    f1: list
    cv: float
    confusion: list            # confusion[true][pred] counts
    evaluated: int

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy,
                "per_class_accuracy": self.per_class_accuracy,
                "precision": self.precision, "recall": self.recall,
                "f1": self.f1, "cv": self.cv, "confusion": self.confusion,
                "evaluated": self.evaluated}


def coefficient_of_variation(per_class_acc) -> float:
    """Population standard deviation over mean."""
    v = np.asarray(per_class_acc, dtype=FLOAT)
    if v.size < 2:
        raise ContractError("coefficient_of_variation: need >= 2 classes")
    mu = v.mean()
    if mu <= 0:
        raise DomainError("coefficient_of_variation: non-positive mean")
    return float(v.std() / mu)


def evaluate(model_or_probs, bundle: GraphBundle, mask_idx,
             structure=None) -> MetricsReport:
    """Argmax metrics over the masked nodes.

    Accepts a model (evaluated fresh) or a precomputed (n, C) score/probability
    matrix, so fused predictions evaluate through the same code path.
    """
    idx = np.asarray(mask_idx, dtype=np.int64)
    if idx.size == 0:
        raise ContractError("evaluate: empty mask")
    if hasattr(model_or_probs, "forward"):
        if structure is None:
            structure = build_structure(model_or_probs, bundle)
        probs = predict_probs(model_or_probs, bundle, structure)
    else:
        probs = model_or_probs.data if isinstance(model_or_probs, Tensor) \
            else np.asarray(model_or_probs)
    pred = probs.argmax(axis=1)
    c = bundle.num_classes
    true = bundle.labels[idx]
    got = pred[idx]
    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (true, got), 1)
    support = confusion.sum(axis=1)
    predicted = confusion.sum(axis=0)
    diag = np.diag(confusion)
    with np.errstate(invalid="ignore", divide="ignore"):
        recall = np.where(support > 0, diag / np.maximum(support, 1), 0.0)
        precision = np.where(predicted > 0, diag / np.maximum(predicted, 1), 0.0)
        f1 = np.where(precision + recall > 0,
                      2 * precision * recall / np.maximum(precision + recall, 1e-300),
                      0.0)
    acc = float(diag.sum() / idx.size)
    return MetricsReport(
        accuracy=acc,
        per_class_accuracy=[float(x) for x in recall],
        precision=[float(x) for x in precision],
        recall=[float(x) for x in recall],
        f1=[float(x) for x in f1],
        cv=coefficient_of_variation(recall) if support.min() > 0 else 0.0,
        confusion=confusion.tolist(),
        evaluated=int(idx.size))


def export_embeddings(model, bundle: GraphBundle, path, structure=None) -> Path:
    """Write the penultimate representations as little-endian f32 plus a
    label sidecar for external projection tools."""
    if structure is None:
        structure = build_structure(model, bundle)
    from .models import embed
    e = embed(model, bundle, structure).data
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    (out / "embeddings.bin").write_bytes(
        np.ascontiguousarray(e, dtype="<f4").tobytes())
    (out / "labels.bin").write_bytes(
        np.ascontiguousarray(bundle.labels, dtype="<u2").tobytes())
    meta = {"num_nodes": int(e.shape[0]), "dim": int(e.shape[1])}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                   encoding="utf-8")
    return out
