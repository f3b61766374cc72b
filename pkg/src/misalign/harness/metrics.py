"""Evaluation: mean IoU, accuracy, and clean-vs-adversarial records.

`miou` counts intersections/unions over whatever arrays it is given, so
dataset-level mIoU is just one call on the stacked masks. `evaluate` is
fail-closed: provided perturbations must satisfy their declared budget and
keep adversarial pixels in [0, 1], otherwise it refuses to score them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import BACKGROUND, Sample
from .heads import DownstreamModel

__all__ = ["miou", "AdversarialBatch", "MetricsRecord", "evaluate"]


def miou(pred_mask: np.ndarray, true_mask: np.ndarray, class_set) -> float:
    """Mean over classes of |pred & true| / |pred | true|; classes absent
    from both masks are excluded from the mean."""
    pred = np.asarray(pred_mask)
    true = np.asarray(true_mask)
    if pred.shape != true.shape:
        raise ValueError(f"mask shapes {pred.shape} and {true.shape} differ")
    class_set = list(class_set)
    present = set(np.unique(pred)) | set(np.unique(true))
    stray = present - set(class_set)
    if stray:
        raise ValueError(f"mask labels {sorted(stray)} outside class set {sorted(class_set)}")
    ious = []
    for c in class_set:
        p = pred == c
        t = true == c
        union = np.logical_or(p, t).sum()
        if union == 0:
            continue
        ious.append(np.logical_and(p, t).sum() / union)
    if not ious:
        raise ValueError("no class from the class set occurs in either mask")
    return float(np.mean(ious))


@dataclass
class AdversarialBatch:
    """Per-sample perturbations paired with the budget they claim."""

    deltas: np.ndarray  # (B, 3, H, W)
    epsilon: float

    def validate(self, samples: list[Sample]) -> None:
        if len(self.deltas) != len(samples):
            raise ValueError(f"{len(self.deltas)} perturbations for {len(samples)} samples")
        worst = float(np.max(np.abs(self.deltas))) if len(self.deltas) else 0.0
        if worst > self.epsilon + 1e-12:
            raise ValueError(f"perturbation exceeds budget: |delta|_inf = {worst} > {self.epsilon}")
        for d, s in zip(self.deltas, samples):
            adv = s.image + d
            if adv.min() < -1e-12 or adv.max() > 1.0 + 1e-12:
                raise ValueError("adversarial image leaves the [0, 1] pixel range")


@dataclass
class MetricsRecord:
    metric: str  # "accuracy" | "miou"
    n_samples: int
    clean: float
    adversarial: float | None = None
    normalized: float | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {
            "metric": self.metric,
            "n_samples": self.n_samples,
            "clean": self.clean,
            "adversarial": self.adversarial,
            "normalized": self.normalized,
        }
        out.update(self.extra)
        return out


def _split_accuracy(model, samples, images, base_classes) -> tuple[float, float | None, float | None]:
    labels = np.array([s.label for s in samples])
    preds = np.array([model.predict(img) for img in images])
    acc = float(np.mean(preds == labels))
    base_mask = np.isin(labels, list(base_classes))
    base_acc = float(np.mean(preds[base_mask] == labels[base_mask])) if base_mask.any() else None
    novel_mask = ~base_mask
    novel_acc = float(np.mean(preds[novel_mask] == labels[novel_mask])) if novel_mask.any() else None
    return acc, base_acc, novel_acc


def _seg_metric(model: DownstreamModel, samples, images) -> float:
    preds = np.stack([model.predict(img) for img in images])
    trues = np.stack([s.mask for s in samples])
    return miou(preds, trues, [BACKGROUND] + list(model.class_ids))


def evaluate(
    model: DownstreamModel,
    samples: list[Sample],
    perturbations: AdversarialBatch | None = None,
    base_classes=None,
) -> MetricsRecord:
    """Clean (and optionally adversarial) performance of a model.

    Classifier heads report accuracy, with a base/novel split when
    `base_classes` is given; seg heads report dataset-level mIoU over the
    foreground classes. `normalized` = adversarial / clean."""
    if not samples:
        raise ValueError("empty evaluation set")
    clean_images = [s.image for s in samples]
    adv_images = None
    if perturbations is not None:
        perturbations.validate(samples)
        adv_images = [np.clip(s.image + d, 0.0, 1.0) for s, d in zip(samples, perturbations.deltas)]

    extra: dict = {}
    if model.head_kind == "seg":
        metric = "miou"
        fg = [s for s in samples if s.label in model.class_ids]
        if len(fg) != len(samples):
            raise ValueError("seg evaluation set contains classes the head cannot predict")
        clean = _seg_metric(model, samples, clean_images)
        adv = _seg_metric(model, samples, adv_images) if adv_images is not None else None
    else:
        metric = "accuracy"
        clean, base_c, novel_c = _split_accuracy(model, samples, clean_images, base_classes or ())
        adv = None
        if adv_images is not None:
            adv, base_a, novel_a = _split_accuracy(model, samples, adv_images, base_classes or ())
        if base_classes is not None:
            extra["base_clean"] = base_c
            extra["novel_clean"] = novel_c
            if adv_images is not None:
                extra["base_adversarial"] = base_a
                extra["novel_adversarial"] = novel_a

    normalized = None
    if adv is not None:
        if clean == 0.0:
            raise ValueError("clean metric is zero; normalized performance undefined")
        normalized = adv / clean
    return MetricsRecord(metric, len(samples), clean, adv, normalized, extra)
