"""Differentiable building-block ops shared by sparse and dense paths.

Every op takes the tape plus Node/Parameter operands, computes the forward
value eagerly and records one backward closure.  Batch segmentation relies on
the canonical coordinate order: rows sharing a batch index are contiguous.
"""

from __future__ import annotations

import numpy as np

from .tape import Node, Parameter, Tape, accumulate
from .sparse import SparseTensor


def constant(value: np.ndarray) -> Node:
    return Node(np.asarray(value))


def sum_all(tape: Tape, x: Node) -> Node:
    out = Node(np.asarray(x.value.sum()))

    def grad_fn():
        if out.grad is not None:
            accumulate(x, np.broadcast_to(out.grad, x.value.shape) * np.ones_like(x.value))

    tape.record(grad_fn)
    return out


def relu(tape: Tape, x: Node) -> Node:
    mask = x.value > 0
    out = Node(np.where(mask, x.value, 0))

    def grad_fn():
        if out.grad is not None:
            accumulate(x, out.grad * mask)

    tape.record(grad_fn)
    return out


def relu_sparse(tape: Tape, st: SparseTensor) -> SparseTensor:
    return SparseTensor(st.coord_set, relu(tape, st.feats))


def add(tape: Tape, a: Node, b: Node) -> Node:
    out = Node(a.value + b.value)

    def grad_fn():
        if out.grad is not None:
            accumulate(a, out.grad)
            accumulate(b, out.grad)

    tape.record(grad_fn)
    return out


def add_sparse(tape: Tape, a: SparseTensor, b: SparseTensor) -> SparseTensor:
    if a.coord_set is not b.coord_set and not np.array_equal(a.coords, b.coords):
        raise ValueError("sparse add requires identical coordinate sets")
    return SparseTensor(a.coord_set, add(tape, a.feats, b.feats))


def scale(tape: Tape, x: Node, factor: float) -> Node:
    out = Node(x.value * factor)

    def grad_fn():
        if out.grad is not None:
            accumulate(x, out.grad * factor)

    tape.record(grad_fn)
    return out


def matmul(tape: Tape, x: Node, w) -> Node:
    out = Node(x.value @ w.value)

    def grad_fn():
        g = out.grad
        if g is None:
            return
        accumulate(x, g @ w.value.T)
        accumulate(w, x.value.T @ g)

    tape.record(grad_fn)
    return out


def add_bias(tape: Tape, x: Node, b) -> Node:
    out = Node(x.value + b.value)

    def grad_fn():
        g = out.grad
        if g is None:
            return
        accumulate(x, g)
        accumulate(b, g.sum(axis=0))

    tape.record(grad_fn)
    return out


def concat_cols(tape: Tape, a: Node, b: Node) -> Node:
    ca = a.value.shape[1]
    out = Node(np.concatenate([a.value, b.value], axis=1))

    def grad_fn():
        g = out.grad
        if g is None:
            return
        accumulate(a, g[:, :ca])
        accumulate(b, g[:, ca:])

    tape.record(grad_fn)
    return out


def concat_features(tape: Tape, a: SparseTensor, b: SparseTensor) -> SparseTensor:
    """Channel concat of two tensors living on identical coordinates."""
    if a.coord_set is not b.coord_set and not np.array_equal(a.coords, b.coords):
        raise ValueError("concat requires identical coordinate sets in identical order")
    return SparseTensor(a.coord_set, concat_cols(tape, a.feats, b.feats))


def _batch_segments(batch_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    """Start offsets and lengths per batch element; rows must be batch-sorted."""
    n_batch = int(batch_ids.max()) + 1 if len(batch_ids) else 0
    counts = np.bincount(batch_ids, minlength=n_batch)
    if (counts == 0).any():
        empty = int(np.argmin(counts))
        raise ValueError(f"batch element {empty} has no rows")
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    return starts, counts, n_batch


def global_avg_pool(tape: Tape, st: SparseTensor) -> Node:
    """Per-batch mean over voxel rows -> (B, C) latent codes."""
    batch_ids = st.coords[:, 0]
    starts, counts, n_batch = _batch_segments(batch_ids)
    sums = np.add.reduceat(st.features, starts, axis=0)
    out = Node(sums / counts[:, None])

    def grad_fn():
        g = out.grad
        if g is None:
            return
        accumulate(st.feats, np.repeat(g / counts[:, None], counts, axis=0))

    tape.record(grad_fn)
    return out


def global_max_pool(tape: Tape, st: SparseTensor) -> Node:
    """Per-batch channel-wise max -> (B, C); ties route grad to the lowest row."""
    batch_ids = st.coords[:, 0]
    starts, counts, n_batch = _batch_segments(batch_ids)
    x = st.features
    c = x.shape[1]
    out_val = np.empty((n_batch, c), dtype=x.dtype)
    argrows = np.empty((n_batch, c), dtype=np.int64)
    for b in range(n_batch):
        seg = x[starts[b]:starts[b] + counts[b]]
        idx = seg.argmax(axis=0)
        argrows[b] = starts[b] + idx
        out_val[b] = seg[idx, np.arange(c)]
    out = Node(out_val)

    def grad_fn():
        g = out.grad
        if g is None:
            return
        dx = np.zeros_like(x)
        cols = np.arange(c)
        for b in range(n_batch):
            np.add.at(dx, (argrows[b], cols), g[b])
        accumulate(st.feats, dx)

    tape.record(grad_fn)
    return out


def block_max_pool(tape: Tape, x: Node, block: int) -> Node:
    """Max over fixed-length row blocks: (B*block, C) -> (B, C)."""
    n, c = x.value.shape
    if n % block:
        raise ValueError(f"row count {n} is not a multiple of block {block}")
    b = n // block
    view = x.value.reshape(b, block, c)
    arg = view.argmax(axis=1)
    out = Node(np.take_along_axis(view, arg[:, None, :], axis=1)[:, 0, :])

    def grad_fn():
        g = out.grad
        if g is None:
            return
        dv = np.zeros((b, block, c), dtype=x.value.dtype)
        np.put_along_axis(dv, arg[:, None, :], g[:, None, :], axis=1)
        accumulate(x, dv.reshape(n, c))

    tape.record(grad_fn)
    return out


def cross_entropy(tape: Tape, logits: Node, targets: np.ndarray,
                  ignore_id: int | None = None) -> Node:
    """Mean negative log-softmax over non-ignored rows, max-stabilised."""
    targets = np.asarray(targets, dtype=np.int64)
    z = logits.value
    if len(targets) != len(z):
        raise ValueError("targets must align with logit rows")
    keep = np.ones(len(z), dtype=bool) if ignore_id is None else targets != ignore_id
    n_kept = int(keep.sum())
    if n_kept == 0:
        raise ValueError("cross_entropy: every row is ignored")
    if targets[keep].min() < 0 or targets[keep].max() >= z.shape[1]:
        raise ValueError("target ids outside the class range")

    safe_targets = np.where(keep, targets, 0)
    shifted = z - z.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    losses = -log_probs[np.arange(len(z)), safe_targets]
    out = Node(np.asarray(losses[keep].mean(), dtype=z.dtype))

    def grad_fn():
        g = out.grad
        if g is None:
            return
        soft = np.exp(log_probs)
        soft[np.arange(len(z)), safe_targets] -= 1.0
        soft[~keep] = 0.0
        accumulate(logits, soft * (np.asarray(g) / n_kept))

    tape.record(grad_fn)
    return out
