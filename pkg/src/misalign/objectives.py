"""Attack loss objectives.

Every objective is oriented so that LOWER value = stronger attack; the
optimizer in the attack engine always descends.

  * token_misalignment_loss ("prm"): sum over layers and tokens of the
    cosine similarity between each adversarial token and its clean
    counterpart. Descending drives every patch descriptor (and the CLS
    token) directionally away from its clean orientation.
  * flat_misalignment_loss ("global_prm"): one cosine per layer, computed
    on the flattened feature volume.
  * feature_distance_loss ("nrd"): minus the L2 distance between clean and
    adversarial features, summed over layers.
  * feature_dispersion_loss ("dr"): population standard deviation of the
    adversarial features per layer, summed; clean features are unused.
  * neg_task_loss: minus a downstream head's training loss; the only
    objective that needs ground truth.

The clean branch is always treated as constant -- gradients flow only
through the adversarial features.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .encoders import LayerFeatures
from .tensor import ShapeError, Tensor

OBJECTIVE_KINDS = ("prm", "global_prm", "nrd", "dr", "neg_task")

__all__ = [
    "OBJECTIVE_KINDS",
    "ObjectiveKind",
    "prm_loss",
    "global_prm_loss",
    "nrd_loss",
    "dr_loss",
    "neg_task_loss",
    "cls_token_only",
]


@dataclass(frozen=True)
class ObjectiveKind:
    """Attack recipe: which loss, which tap layers, whether only the CLS
    token (p = 0) participates. `layers = ()` means every tap of the
    encoder. neg_task additionally needs a head and ground truth at attack
    time."""

    kind: str
    layers: tuple[int, ...] = ()
    cls_only: bool = False

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise ValueError(f"unknown objective kind {self.kind!r}; expected one of {OBJECTIVE_KINDS}")
        object.__setattr__(self, "layers", tuple(int(l) for l in self.layers))

    @property
    def needs_clean_features(self) -> bool:
        return self.kind in ("prm", "global_prm", "nrd")

    @property
    def needs_ground_truth(self) -> bool:
        return self.kind == "neg_task"

    def resolve_layers(self, encoder) -> tuple[int, ...]:
        return self.layers if self.layers else tuple(encoder.tap_layers)

    def to_json(self) -> dict:
        return {"kind": self.kind, "layers": list(self.layers), "cls_only": self.cls_only}

    @staticmethod
    def from_json(obj: dict) -> "ObjectiveKind":
        return ObjectiveKind(
            kind=obj["kind"],
            layers=tuple(obj.get("layers", ())),
            cls_only=bool(obj.get("cls_only", False)),
        )


def _check_aligned(clean: list[LayerFeatures], adv: list[LayerFeatures]) -> None:
    if len(clean) != len(adv):
        raise ShapeError(f"feature lists differ in length: {len(clean)} vs {len(adv)}")
    if not clean:
        raise ShapeError("empty feature lists")
    for c, a in zip(clean, adv):
        if c.layer_index != a.layer_index:
            raise ShapeError(f"layer mismatch: {c.layer_index} vs {a.layer_index}")
        if c.tokens.shape != a.tokens.shape:
            raise ShapeError(
                f"layer {c.layer_index}: token shapes {c.tokens.shape} and {a.tokens.shape} differ"
            )


def _constant_tokens(feat: LayerFeatures) -> Tensor:
    toks = feat.tokens
    return toks.detach() if toks.graph is not None else toks


def prm_loss(clean: list[LayerFeatures], adv: list[LayerFeatures]) -> Tensor:
    """Sum over layers and tokens of cos(clean token, adversarial token)."""
    _check_aligned(clean, adv)
    total = None
    for c, a in zip(clean, adv):
        cos = T.cosine_similarity_lastaxis(_constant_tokens(c), a.tokens)
        s = cos.sum()
        total = s if total is None else T.add(total, s)
    return total


def global_prm_loss(clean: list[LayerFeatures], adv: list[LayerFeatures]) -> Tensor:
    """Sum over layers of the cosine between flattened feature volumes."""
    _check_aligned(clean, adv)
    total = None
    for c, a in zip(clean, adv):
        cos = T.cosine_similarity_lastaxis(_constant_tokens(c).flatten(), a.tokens.flatten())
        total = cos if total is None else T.add(total, cos)
    return total


def nrd_loss(clean: list[LayerFeatures], adv: list[LayerFeatures]) -> Tensor:
    """Minus the per-layer L2 norm of the feature difference, summed."""
    _check_aligned(clean, adv)
    total = None
    for c, a in zip(clean, adv):
        diff = T.sub(a.tokens, _constant_tokens(c))
        norm = T.sqrt(T.mul(diff, diff).sum())
        total = norm if total is None else T.add(total, norm)
    return T.scale(total, -1.0)


def dr_loss(adv: list[LayerFeatures]) -> Tensor:
    """Population standard deviation over all elements of each layer's
    features, summed over layers."""
    if not adv:
        raise ShapeError("empty feature lists")
    total = None
    for a in adv:
        if a.tokens.size < 2:
            raise ShapeError(f"layer {a.layer_index}: dispersion needs >= 2 elements")
        s = a.tokens.std()
        total = s if total is None else T.add(total, s)
    return total


def neg_task_loss(head, img: Tensor, truth) -> Tensor:
    """Minus the downstream head's training loss on (img, truth). `head`
    must expose task_loss(img, truth) -> scalar Tensor."""
    return T.scale(head.task_loss(img, truth), -1.0)


def cls_token_only(feats: list[LayerFeatures]) -> list[LayerFeatures]:
    """Restrict every layer to its CLS token (p = 0)."""
    return [LayerFeatures(f.layer_index, f.tokens[0:1, :]) for f in feats]
