"""Dense 64-bit tensors with reverse-mode automatic differentiation.

Every differentiable operation records a tape node holding its inputs and a
backward rule; ``backward`` on a scalar loss walks the tape in reverse
topological order exactly once per node. Gradients accumulate into ``grad``
buffers, so repeated backward calls without ``zero_grad`` sum their results.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    DegenerateRowError,
    DomainError,
    ShapeError,
)

FLOAT = np.float64


class TapeNode:
    """One recorded operation: op name, input tensors, and the backward rule.

    ``backward`` maps the output gradient to one gradient array per input
    (``None`` for inputs that do not need one). Saved intermediates live in
    the closure.
    """

    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: Sequence["Tensor"],
                 backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.op = op
        self.inputs = tuple(inputs)
        self.backward = backward


class Tensor:
    """A float64 array that optionally participates in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, node: Optional[TapeNode] = None):
        self.data = np.asarray(data, dtype=FLOAT)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        """Constant copy sharing the buffer; cuts the tape."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=FLOAT, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the module-level functions hold the actual rules.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op result, recording a tape node only if gradients can flow."""
    if any(t.requires_grad for t in inputs):
        return Tensor(data, requires_grad=True, node=TapeNode(op, inputs, backward))
    return Tensor(data)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    # Only scalar (size 1) and identical-shape operands are supported.
    if a.data.shape == b.data.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} are neither "
                     "equal nor scalar-broadcastable")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    # Undo scalar broadcast: a size-1 operand receives the summed gradient.
    if g.shape == tuple(shape):
        return g
    return np.sum(g).reshape(shape).astype(FLOAT)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    out = a.data + b.data

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(out, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    out = a.data - b.data

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _make(out, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    out = a.data * b.data

    def backward(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _make(out, "mul", (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes "
                         f"{a.data.shape} and {b.data.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, "matmul", (a, b), backward)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)

    def backward(g):
        return (g * (x.data > 0.0),)

    return _make(out, "relu", (x,), backward)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    out = np.where(x.data > 0.0, x.data, slope * x.data)

    def backward(g):
        return (g * np.where(x.data > 0.0, 1.0, slope),)

    return _make(out, "leaky_relu", (x,), backward)


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _make(out, "exp", (x,), backward)


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log: input contains non-positive values")
    out = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return _make(out, "log", (x,), backward)


def dropout_rng(seed: int, epoch: int, layer: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, epoch, layer).

    Masks are reproducible regardless of how many other random draws happened
    before this call.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, epoch, layer])))


def dropout(x: Tensor, rate: float, train: bool, key=None) -> Tensor:
    """Zero entries with probability ``rate`` and rescale survivors in train
    mode; identity in eval mode. ``key`` is the (seed, epoch, layer) triple."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout: rate {rate} outside [0, 1)")
    if not train or rate == 0.0:
        return x
    if key is None:
        raise ConfigError("dropout: train mode requires a (seed, epoch, layer) key")
    rng = dropout_rng(*key)
    keep = rng.random(x.data.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    out = x.data * keep * scale

    def backward(g):
        return (g * keep * scale,)

    return _make(out, "dropout", (x,), backward)


def row_softmax(scores: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over each row, restricted to unmasked entries.

    Masked entries are bit-exactly zero in the output; the max is subtracted
    per row for overflow safety. A fully masked row is an error.
    """
    scores = as_tensor(scores)
    x = scores.data
    if x.ndim != 2:
        raise ShapeError(f"row_softmax: expected a 2-d tensor, got shape {x.shape}")
    if mask is None:
        keep = np.ones(x.shape, dtype=bool)
    else:
        keep = np.asarray(mask, dtype=bool)
        if keep.shape != x.shape:
            raise ShapeError(f"row_softmax: mask shape {keep.shape} != scores shape {x.shape}")
        dead = ~keep.any(axis=1)
        if dead.any():
            raise DegenerateRowError(f"row_softmax: row {int(np.argmax(dead))} is fully masked")

    shifted = np.where(keep, x, -np.inf)
    m = shifted.max(axis=1, keepdims=True)
    e = np.exp(shifted - m)
    e = np.where(keep, e, 0.0)
    denom = e.sum(axis=1, keepdims=True)
    out = e / denom

    def backward(g):
        g = np.where(keep, g, 0.0)
        inner = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - inner),)

    return _make(out, "row_softmax", (scores,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean, unit population variance, then apply
    the per-column affine ``gain``/``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm: expected a 2-d tensor, got shape {x.data.shape}")
    n_cols = x.data.shape[1]
    if gain.size != n_cols or bias.size != n_cols:
        raise ShapeError(f"layer_norm: gain/bias sizes {gain.size}/{bias.size} "
                         f"do not match {n_cols} columns")
    gvec = gain.data.reshape(1, n_cols)
    bvec = bias.data.reshape(1, n_cols)
    mean = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = xhat * gvec + bvec

    def backward(g):
        dgain = (g * xhat).sum(axis=0).reshape(gain.shape)
        dbias = g.sum(axis=0).reshape(bias.shape)
        dxhat = g * gvec
        # Standard layer-norm input gradient with population variance.
        dx = inv_std * (dxhat
                        - dxhat.mean(axis=1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx, dgain, dbias

    return _make(out, "layer_norm", (x, gain, bias), backward)


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.array([[x.data.sum()]], dtype=FLOAT)

    def backward(g):
        return (np.full(x.data.shape, float(g.reshape(-1)[0]), dtype=FLOAT),)

    return _make(out, "sum_all", (x,), backward)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows by index; the backward pass scatter-adds into the source."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    out = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(out, "gather_rows", (x,), backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    rows = {p.data.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ: {sorted(rows)}")
    widths = [p.data.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)

    def backward(g):
        grads, at = [], 0
        for w in widths:
            grads.append(g[:, at:at + w])
            at += w
        return tuple(grads)

    return _make(out, "concat_cols", tuple(parts), backward)


def slice_cols(x: Tensor, j0: int, j1: int) -> Tensor:
    x = as_tensor(x)
    out = x.data[:, j0:j1]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, j0:j1] = g
        return (gx,)

    return _make(out, "slice_cols", (x,), backward)


def slice_rows(x: Tensor, i0: int, i1: int) -> Tensor:
    x = as_tensor(x)
    out = x.data[i0:i1, :]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[i0:i1, :] = g
        return (gx,)

    return _make(out, "slice_rows", (x,), backward)


def row_normalize(x: Tensor) -> Tensor:
    """Divide each row by its sum; rows must have strictly positive sums."""
    x = as_tensor(x)
    s = x.data.sum(axis=1, keepdims=True)
    if np.any(s <= 0.0):
        raise DomainError("row_normalize: a row sums to a non-positive value")
    out = x.data / s

    def backward(g):
        inner = (g * x.data).sum(axis=1, keepdims=True)
        return (g / s - inner / (s * s),)

    return _make(out, "row_normalize", (x,), backward)


def stop_gradient(x: Tensor) -> Tensor:
    return as_tensor(x).detach()


def masked_cross_entropy(logits: Tensor, labels, idx) -> Tensor:
    """Mean cross-entropy of ``logits`` rows ``idx`` against integer labels,
    computed through a stable log-softmax."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ContractError("masked_cross_entropy: empty index set")
    rows = logits.data[idx]
    y = labels[idx]
    m = rows.max(axis=1, keepdims=True)
    z = rows - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - lse
    loss = -log_probs[np.arange(idx.size), y].mean()
    out = np.array([[loss]], dtype=FLOAT)

    def backward(g):
        scale = float(g.reshape(-1)[0]) / idx.size
        probs = np.exp(log_probs)
        probs[np.arange(idx.size), y] -= 1.0
        gx = np.zeros_like(logits.data)
        np.add.at(gx, idx, probs * scale)
        return (gx,)

    return _make(out, "masked_cross_entropy", (logits,), backward)


def masked_nll(probs: Tensor, labels, idx) -> Tensor:
    """Mean negative log-likelihood of already-normalized probability rows."""
    probs = as_tensor(probs)
    labels = np.asarray(labels, dtype=np.int64)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ContractError("masked_nll: empty index set")
    y = labels[idx]
    p = probs.data[idx, y]
    if np.any(p <= 0.0):
        raise DomainError("masked_nll: zero probability assigned to a true label")
    out = np.array([[-np.log(p).mean()]], dtype=FLOAT)

    def backward(g):
        scale = float(g.reshape(-1)[0]) / idx.size
        gx = np.zeros_like(probs.data)
        np.add.at(gx, (idx, y), -scale / p)
        return (gx,)

    return _make(out, "masked_nll", (probs,), backward)


def _topo_order(root: Tensor) -> list[Tensor]:
    # Iterative post-order DFS; each tape node visited exactly once.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` for every requires_grad ancestor of a scalar loss.

    Grads accumulate across calls; reset with ``zero_grad`` between steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.node is None:
        raise ContractError("backward: loss has no computation tape")

    order = _topo_order(loss)
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = flowing.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            t.accumulate_grad(g)
        if t.node is None:
            continue
        for parent, pg in zip(t.node.inputs, t.node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in flowing:
                flowing[id(parent)] += pg
            else:
                flowing[id(parent)] = np.array(pg, dtype=FLOAT, copy=True)
