"""Toy pretraining protocols for the encoders.

Alignment protocol: a symmetric batch-contrastive objective between image
embeddings and learned per-class label embeddings (the stand-in for a text
tower). Temperature-scaled cosine logits over the batch, cross-entropy on
the diagonal in both directions, averaged.

Classification protocol: cross-entropy through a linear head on the image
embedding; the head is discarded after training so only the encoder
changes.

Both loops are deterministic given their seed: batch order comes from a
seeded permutation and parameter updates use plain Adam in a fixed
parameter order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..encoders import Encoder
from ..tensor import Tensor
from .dataset import Sample

__all__ = [
    "Adam",
    "PretrainResult",
    "init_label_table",
    "contrastive_pretrain",
    "classification_pretrain",
    "cross_entropy_rows",
]


class Adam:
    """Adam on a dict of named arrays (decay 0.9/0.999, eps 1e-8)."""

    def __init__(self, lr: float):
        self.lr = lr
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        out = {}
        bc1 = 1.0 - 0.9 ** self.t
        bc2 = 1.0 - 0.999 ** self.t
        for name in sorted(params):
            p = params[name]
            g = grads.get(name)
            if g is None:
                out[name] = p
                continue
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * (g * g)
            self.m[name], self.v[name] = m, v
            out[name] = p - self.lr * (m / bc1) / (np.sqrt(v / bc2) + 1e-8)
        return out


@dataclass
class PretrainResult:
    encoder: Encoder
    table: np.ndarray | None
    loss_history: list[float]


def init_label_table(num_classes: int, dim: int, seed: int) -> np.ndarray:
    """One learned vector per class id, uniform +-1/sqrt(dim)."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    bound = 1.0 / math.sqrt(dim)
    return rng.uniform(-bound, bound, size=(num_classes, dim))


def cross_entropy_rows(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy of (B, K) logits against integer targets.

    The row max is subtracted as a constant before exponentiation, which
    leaves the gradient exact."""
    b, k = logits.shape
    targets = np.asarray(targets)
    if targets.shape != (b,):
        raise T.ShapeError(f"targets shape {targets.shape} does not match {b} logit rows")
    if targets.min() < 0 or targets.max() >= k:
        raise ValueError(f"target labels outside [0, {k})")
    row_max = np.max(logits.data, axis=1, keepdims=True)
    shifted = T.sub(logits, Tensor(np.broadcast_to(row_max, (b, k)).copy()))
    lse = T.add(T.log(T.exp(shifted).sum(axis=1)), Tensor(row_max.reshape(b)))
    onehot = np.zeros((b, k))
    onehot[np.arange(b), targets] = 1.0
    picked = T.mul(logits, Tensor(onehot)).sum(axis=1)
    return T.sub(lse, picked).mean()


def _normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    n = T.sqrt(T.mul(x, x).sum(axis=1, keepdims=True))
    tiled = T.matmul(T.add(n, eps), Tensor(np.ones((1, x.shape[1]))))
    return T.div(x, tiled)


def pairwise_cosine(a: Tensor, b: Tensor) -> Tensor:
    """(B, N) x (M, N) -> (B, M) cosine similarities, differentiable."""
    return T.matmul(_normalize_rows(a), T.transpose(_normalize_rows(b)))


def _stack_images(samples: list[Sample], idx) -> np.ndarray:
    return np.stack([samples[i].image for i in idx])


def _stratified_batches(samples: list[Sample], batch_size: int, rng) -> list[np.ndarray]:
    """Batches of `batch_size` distinct classes, one sample each, so the
    diagonal contrastive targets are unambiguous. Built round-robin: round r
    takes each class's r-th sample (cyclically) in a fresh class order, then
    splits the round into class-disjoint chunks."""
    by_class: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_class.setdefault(s.label, []).append(i)
    classes = sorted(by_class)
    if batch_size > len(classes):
        raise ValueError(
            f"batch_size {batch_size} exceeds the {len(classes)} distinct classes available"
        )
    perms = {c: rng.permutation(len(by_class[c])) for c in classes}
    rounds = max(len(v) for v in by_class.values())
    batches = []
    for r in range(rounds):
        order = rng.permutation(len(classes))
        for start in range(0, len(classes) - batch_size + 1, batch_size):
            chunk = [classes[j] for j in order[start : start + batch_size]]
            batches.append(
                np.array([by_class[c][perms[c][r % len(by_class[c])]] for c in chunk])
            )
    return batches


def contrastive_pretrain(
    enc: Encoder,
    table: np.ndarray,
    samples: list[Sample],
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int,
    temperature: float = 0.07,
    train_encoder: bool = True,
    trainable_classes=None,
) -> PretrainResult:
    """Align image embeddings with their class label embeddings.

    `trainable_classes`, when given, freezes every table row outside that
    set (used to fit label embeddings for held-out classes against a frozen
    encoder). Requires batch_size >= 2: the other rows of a batch are the
    negatives."""
    if batch_size < 2:
        raise ValueError(f"contrastive training needs batch_size >= 2, got {batch_size}")
    if table.shape[1] != enc.feature_width:
        raise ValueError(f"table width {table.shape[1]} != encoder width {enc.feature_width}")
    rng = np.random.default_rng(np.random.PCG64(seed))
    opt = Adam(lr)
    params = dict(enc.params)
    table = table.copy()
    row_mask = None
    if trainable_classes is not None:
        row_mask = np.zeros((table.shape[0], 1))
        row_mask[list(trainable_classes)] = 1.0

    history = []
    for _ in range(epochs):
        epoch_losses = []
        for idx in _stratified_batches(samples, batch_size, rng):
            imgs = _stack_images(samples, idx)
            labels = np.array([samples[i].label for i in idx])

            graph = T.ComputeGraph()
            enc_now = enc.with_params(params)
            ptensors = enc_now.tensors(graph if train_encoder else None)
            table_t = graph.leaf(table)
            embs = enc_now.embeddings_batch(imgs, ptensors)
            onehot = np.zeros((len(idx), table.shape[0]))
            onehot[np.arange(len(idx)), labels] = 1.0
            texts = T.matmul(Tensor(onehot), table_t)
            logits = T.scale(pairwise_cosine(embs, texts), 1.0 / temperature)
            diag = np.arange(len(idx))
            loss = T.scale(
                T.add(cross_entropy_rows(logits, diag), cross_entropy_rows(T.transpose(logits), diag)),
                0.5,
            )
            T.backward(loss)
            epoch_losses.append(float(loss.data))

            grads = {}
            if train_encoder:
                grads = {k: graph.gradient(t) for k, t in ptensors.items()}
            tg = graph.gradient(table_t)
            if row_mask is not None:
                tg = tg * row_mask
            grads["__table__"] = tg
            merged = opt.step({**params, "__table__": table}, grads)
            table = merged.pop("__table__")
            params = merged
        history.append(float(np.mean(epoch_losses)))
    return PretrainResult(enc.with_params(params), table, history)


def classification_pretrain(
    enc: Encoder,
    samples: list[Sample],
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int,
) -> PretrainResult:
    """Cross-entropy on the image embedding via a throwaway linear head."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    labels_present = sorted({s.label for s in samples})
    to_local = {lab: i for i, lab in enumerate(labels_present)}
    k = len(labels_present)
    n = enc.feature_width
    rng = np.random.default_rng(np.random.PCG64(seed))
    bound = 1.0 / math.sqrt(n)
    head_w = rng.uniform(-bound, bound, size=(n, k))
    head_b = np.zeros(k)

    opt = Adam(lr)
    params = dict(enc.params)
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(samples))
        epoch_losses = []
        for start in range(0, len(samples) - batch_size + 1, batch_size):
            idx = order[start : start + batch_size]
            imgs = _stack_images(samples, idx)
            targets = np.array([to_local[samples[i].label] for i in idx])

            graph = T.ComputeGraph()
            enc_now = enc.with_params(params)
            ptensors = enc_now.tensors(graph)
            w_t, b_t = graph.leaf(head_w), graph.leaf(head_b)
            embs = enc_now.embeddings_batch(imgs, ptensors)
            logits = T.add_trailing(T.matmul(embs, w_t), b_t)
            loss = cross_entropy_rows(logits, targets)
            T.backward(loss)
            epoch_losses.append(float(loss.data))

            grads = {k2: graph.gradient(t) for k2, t in ptensors.items()}
            grads["__w__"] = graph.gradient(w_t)
            grads["__b__"] = graph.gradient(b_t)
            merged = opt.step({**params, "__w__": head_w, "__b__": head_b}, grads)
            head_w = merged.pop("__w__")
            head_b = merged.pop("__b__")
            params = merged
        history.append(float(np.mean(epoch_losses)))
    return PretrainResult(enc.with_params(params), None, history)
