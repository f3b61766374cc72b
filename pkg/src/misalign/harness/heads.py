"""Downstream models: a frozen backbone plus a small task head.

  * linear_cls -- image embedding -> class logits over `class_ids`.
  * seg        -- tokens of one tap -> per-patch logits over
                  [background] + class_ids, upsampled nearest to the mask.
  * zero_shot  -- argmax over cosine(image embedding, label embedding);
                  nothing is trained beyond the pretraining table.

Each model owns an input resolution: images are bilinearly resized to
`input_size` before the backbone, mimicking downstream systems that run
the shared encoder at their own scale. Head training never touches the
backbone: features are extracted once with constant parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..encoders import Encoder
from ..tensor import Tensor
from .dataset import BACKGROUND, Sample
from .pretrain import Adam, cross_entropy_rows

__all__ = [
    "DownstreamModel",
    "train_linear_head",
    "train_seg_head",
    "make_zero_shot",
    "zero_shot_classify",
    "mask_to_grid_histogram",
    "grid_to_mask",
]

HEAD_KINDS = ("linear_cls", "seg", "zero_shot")


@dataclass
class DownstreamModel:
    backbone: Encoder
    head_kind: str
    class_ids: tuple[int, ...]
    input_size: int
    params: dict[str, np.ndarray] = field(default_factory=dict)
    tap_layer: int | None = None
    label_table: np.ndarray | None = None

    def __post_init__(self):
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.head_kind!r}")
        if not self.class_ids:
            raise ValueError("empty class list")
        if self.head_kind == "zero_shot":
            if self.label_table is None or len(self.label_table) == 0:
                raise ValueError("zero_shot head needs a label table")
        if self.head_kind == "linear_cls":
            width = self.backbone.feature_width
        elif self.head_kind == "seg":
            width = self.backbone.tap_width(self.tap_layer)
        else:
            width = None
        if width is not None and self.params["w"].shape[0] != width:
            raise ValueError(
                f"head input width {self.params['w'].shape[0]} != backbone feature width {width}"
            )

    # -- forward -------------------------------------------------------------
    def _prep(self, img) -> Tensor:
        img = img if isinstance(img, Tensor) else Tensor(img)
        if img.shape[1] != self.input_size or img.shape[2] != self.input_size:
            img = T.bilinear_resize(img, self.input_size, self.input_size)
        return img

    def logits(self, img) -> Tensor:
        """Differentiable head logits: (K,) for classifiers, (P, K) for seg.

        Linear and seg heads read unit-normalised features: consumers of a
        contrastively pretrained encoder work in its cosine geometry, so
        direction, not magnitude, carries the class information."""
        img = self._prep(img)
        if self.head_kind == "linear_cls":
            emb = _normalize_rows_diff(self.backbone.cls_embedding(img).reshape(1, -1))
            out = T.add_trailing(T.matmul(emb, Tensor(self.params["w"])), Tensor(self.params["b"]))
            return out.reshape(-1)
        if self.head_kind == "seg":
            feats = self.backbone.forward_with_taps(img, [self.tap_layer])[0]
            tokens = feats.tokens
            if self.backbone.kind == "vit":
                tokens = tokens[1:, :]  # patch tokens only
            tokens = _normalize_rows_diff(tokens)
            return T.add_trailing(T.matmul(tokens, Tensor(self.params["w"])), Tensor(self.params["b"]))
        emb = self.backbone.cls_embedding(img).reshape(1, -1)
        table = Tensor(np.asarray(self.label_table[list(self.class_ids)]))
        sims = _pairwise_cosine_const(emb, table)
        return sims.reshape(-1)

    def _seg_grid(self, size: int) -> tuple[int, int]:
        if self.backbone.kind == "vit":
            d = self.backbone.config.patch_size
            return size // d, size // d
        down = 2 ** self._tap_stage()
        return -(-size // down), -(-size // down)

    def _tap_stage(self) -> int:
        per = self.backbone.config.blocks_per_stage
        return (self.tap_layer - 1) // per + 1

    def predict(self, img: np.ndarray):
        """Class id (classifiers) or an int mask at the image's own
        resolution (seg)."""
        if self.head_kind == "seg":
            native = np.asarray(img).shape[1]
            logit = self.logits(img).data
            gh, gw = self._seg_grid(self.input_size)
            cells = np.argmax(logit, axis=1).reshape(gh, gw)
            labels = np.array([BACKGROUND] + list(self.class_ids))
            mask = labels[grid_to_mask(cells, self.input_size)]
            if native != self.input_size:
                mask = _nearest_resize_mask(mask, native)
            return mask
        scores = self.logits(img).data
        return int(self.class_ids[int(np.argmax(scores))])

    # -- training loss (used by the output-level attack baseline) ------------
    def task_loss(self, img, truth) -> Tensor:
        """Cross-entropy of the head on one example; differentiable w.r.t.
        the image."""
        if self.head_kind == "linear_cls":
            if truth not in self.class_ids:
                raise ValueError(f"label {truth} outside head classes {self.class_ids}")
            local = self.class_ids.index(truth)
            return cross_entropy_rows(self.logits(img).reshape(1, -1), np.array([local]))
        if self.head_kind == "seg":
            logits = self.logits(img)
            img_t = img if isinstance(img, Tensor) else Tensor(img)
            gh, gw = self._seg_grid(self.input_size)
            target = mask_to_grid_histogram(truth, (gh, gw), self.class_ids, self.input_size)
            if target.shape[0] != logits.shape[0]:
                raise ValueError(f"mask grid {target.shape} does not match logits {logits.shape}")
            return _soft_cross_entropy(logits, target)
        raise ValueError("zero_shot heads have no training loss")


def _normalize_rows_diff(x: Tensor, eps: float = 1e-12) -> Tensor:
    n = T.sqrt(T.mul(x, x).sum(axis=1, keepdims=True))
    tiled = T.matmul(T.add(n, eps), Tensor(np.ones((1, x.shape[1]))))
    return T.div(x, tiled)


def _pairwise_cosine_const(a: Tensor, table: Tensor) -> Tensor:
    """(1, N) x (K, N) -> (1, K) cosine; differentiable w.r.t. `a` only."""
    tn = table.data / (np.linalg.norm(table.data, axis=1, keepdims=True) + 1e-12)
    an = T.sqrt(T.mul(a, a).sum(axis=1, keepdims=True))
    tiled = T.matmul(T.add(an, 1e-12), Tensor(np.ones((1, a.shape[1]))))
    return T.matmul(T.div(a, tiled), Tensor(tn.T))


def _soft_cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean over rows of -sum_k target_k * log softmax(logits)_k."""
    p, k = logits.shape
    row_max = np.max(logits.data, axis=1, keepdims=True)
    shifted = T.sub(logits, Tensor(np.broadcast_to(row_max, (p, k)).copy()))
    lse = T.add(T.log(T.exp(shifted).sum(axis=1)), Tensor(row_max.reshape(p)))
    picked = T.mul(logits, Tensor(target)).sum(axis=1)
    weight = target.sum(axis=1)  # rows are full distributions (sum 1)
    return T.sub(T.mul(lse, Tensor(weight)), picked).mean()


def mask_to_grid_histogram(mask: np.ndarray, grid: tuple[int, int], class_ids, size: int) -> np.ndarray:
    """Per-cell label distribution over [background] + class_ids for a mask
    nearest-resized to `size` pixels."""
    mask = np.asarray(mask)
    if mask.shape != (size, size):
        mask = _nearest_resize_mask(mask, size)
    gh, gw = grid
    labels = [BACKGROUND] + list(class_ids)
    local = np.full(mask.shape, -1, dtype=np.int64)
    for i, lab in enumerate(labels):
        local[mask == lab] = i
    if (local < 0).any():
        bad = sorted(set(np.unique(mask)) - set(labels))
        raise ValueError(f"mask labels {bad} outside head classes")
    rows = _cell_index(size, gh)
    cols = _cell_index(size, gw)
    cell = rows[:, None] * gw + cols[None, :]
    hist = np.zeros((gh * gw, len(labels)))
    np.add.at(hist, (cell.ravel(), local.ravel()), 1.0)
    return hist / hist.sum(axis=1, keepdims=True)


def _cell_index(size: int, cells: int) -> np.ndarray:
    d = -(-size // cells)  # ceil division: cell width used by the encoder
    return np.minimum(np.arange(size) // d, cells - 1)


def grid_to_mask(cells: np.ndarray, size: int) -> np.ndarray:
    """Nearest upsampling of a (gh, gw) cell map to (size, size)."""
    gh, gw = cells.shape
    return cells[np.ix_(_cell_index(size, gh), _cell_index(size, gw))]


def _nearest_resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    h, w = mask.shape
    ri = np.clip(np.round(np.arange(size) * (h - 1) / max(size - 1, 1)).astype(int), 0, h - 1)
    ci = np.clip(np.round(np.arange(size) * (w - 1) / max(size - 1, 1)).astype(int), 0, w - 1)
    return mask[np.ix_(ri, ci)]


def _extract_embeddings(backbone: Encoder, samples: list[Sample], input_size: int) -> np.ndarray:
    out = []
    for s in samples:
        img = Tensor(s.image)
        if s.image.shape[1] != input_size:
            img = T.bilinear_resize(img, input_size, input_size)
        emb = backbone.cls_embedding(img).data
        out.append(emb / (np.linalg.norm(emb) + 1e-12))
    return np.stack(out)


def train_linear_head(
    backbone: Encoder,
    samples: list[Sample],
    class_ids,
    input_size: int | None = None,
    steps: int = 400,
    lr: float = 0.05,
    seed: int = 0,
) -> DownstreamModel:
    """Fit a linear classifier on frozen-backbone embeddings (full-batch
    Adam on cached features)."""
    class_ids = tuple(class_ids)
    if input_size is None:
        input_size = samples[0].image.shape[1]
    wanted = set(class_ids)
    used = [s for s in samples if s.label in wanted]
    if not used:
        raise ValueError("no training samples match the head classes")
    feats = _extract_embeddings(backbone, used, input_size)
    targets = np.array([class_ids.index(s.label) for s in used])

    n = backbone.feature_width
    rng = np.random.default_rng(np.random.PCG64(seed))
    bound = 1.0 / math.sqrt(n)
    w = rng.uniform(-bound, bound, size=(n, len(class_ids)))
    b = np.zeros(len(class_ids))
    opt = Adam(lr)
    for _ in range(steps):
        graph = T.ComputeGraph()
        w_t, b_t = graph.leaf(w), graph.leaf(b)
        logits = T.add_trailing(T.matmul(Tensor(feats), w_t), b_t)
        loss = cross_entropy_rows(logits, targets)
        T.backward(loss)
        merged = opt.step({"w": w, "b": b}, {"w": graph.gradient(w_t), "b": graph.gradient(b_t)})
        w, b = merged["w"], merged["b"]
    return DownstreamModel(backbone, "linear_cls", class_ids, input_size, params={"w": w, "b": b})


def train_seg_head(
    backbone: Encoder,
    samples: list[Sample],
    class_ids,
    tap_layer: int | None = None,
    input_size: int | None = None,
    steps: int = 400,
    lr: float = 0.05,
    seed: int = 0,
) -> DownstreamModel:
    """Fit a per-token linear segmentation head (background + class_ids) on
    one frozen tap; predictions upsample nearest to the mask resolution.
    Running the backbone above the mask resolution (input_size > image
    size) buys a finer prediction grid."""
    class_ids = tuple(class_ids)
    if input_size is None:
        input_size = samples[0].image.shape[1]
    if tap_layer is None:
        tap_layer = backbone.tap_layers[-1]
    wanted = set(class_ids)
    used = [s for s in samples if s.label in wanted]
    if not used:
        raise ValueError("no training samples match the head classes")

    width = backbone.tap_width(tap_layer)
    model = DownstreamModel(
        backbone,
        "seg",
        class_ids,
        input_size,
        params={"w": np.zeros((width, 1 + len(class_ids))), "b": np.zeros(1 + len(class_ids))},
        tap_layer=tap_layer,
    )
    gh, gw = model._seg_grid(input_size)

    tok_rows, hist_rows = [], []
    for s in used:
        img = Tensor(s.image)
        if s.image.shape[1] != input_size:
            img = T.bilinear_resize(img, input_size, input_size)
        feats = backbone.forward_with_taps(img, [tap_layer])[0].tokens.data
        if backbone.kind == "vit":
            feats = feats[1:]
        feats = feats / (np.linalg.norm(feats, axis=1, keepdims=True) + 1e-12)
        tok_rows.append(feats)
        hist_rows.append(mask_to_grid_histogram(s.mask, (gh, gw), class_ids, input_size))
    toks = np.concatenate(tok_rows)
    hists = np.concatenate(hist_rows)

    rng = np.random.default_rng(np.random.PCG64(seed))
    bound = 1.0 / math.sqrt(width)
    w = rng.uniform(-bound, bound, size=(width, 1 + len(class_ids)))
    b = np.zeros(1 + len(class_ids))
    opt = Adam(lr)
    for _ in range(steps):
        graph = T.ComputeGraph()
        w_t, b_t = graph.leaf(w), graph.leaf(b)
        logits = T.add_trailing(T.matmul(Tensor(toks), w_t), b_t)
        loss = _soft_cross_entropy(logits, hists)
        T.backward(loss)
        merged = opt.step({"w": w, "b": b}, {"w": graph.gradient(w_t), "b": graph.gradient(b_t)})
        w, b = merged["w"], merged["b"]
    model.params = {"w": w, "b": b}
    return model


def make_zero_shot(backbone: Encoder, table: np.ndarray, class_ids, input_size: int | None = None) -> DownstreamModel:
    if input_size is None:
        input_size = backbone.config.image_size if backbone.kind == "vit" else 32
    return DownstreamModel(
        backbone,
        "zero_shot",
        tuple(class_ids),
        input_size,
        label_table=np.asarray(table),
    )


def zero_shot_classify(model: DownstreamModel, img) -> int:
    """Argmax of cosine(image embedding, label embedding); ties resolve to
    the lowest class id."""
    if model.head_kind != "zero_shot":
        raise ValueError("model is not a zero-shot classifier")
    return model.predict(np.asarray(img))
