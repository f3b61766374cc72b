"""Procedural dataset: one colored geometric shape per image.

A class is a (shape, color) pair -- 4 shapes x 3 colors = 12 classes by
default. The last three class ids are the zero-shot "novel" split; their
shape/color parts each occur in the base split, but never combined.
Every sample carries an exact segmentation mask (-1 = background).

Generation is a pure function of (spec.seed, index): sample i uses an RNG
seeded from SeedSequence((seed, i)), and class labels cycle round-robin so
the histogram is uniform to within one sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

BACKGROUND = -1

SHAPE_NAMES = ("square", "circle", "triangle", "cross")
# hues deliberately close together (0.18 apart, a few multiples of the usual
# attack budget): classes stay cleanly separable yet class evidence is not
# adversarially trivial to defend
COLOR_VALUES = (
    (0.78, 0.60, 0.60),  # reddish
    (0.60, 0.78, 0.60),  # greenish
    (0.60, 0.60, 0.78),  # bluish
)

__all__ = ["BACKGROUND", "DatasetSpec", "Sample", "gen_sample", "gen_dataset", "split_by_classes"]


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 12
    num_novel: int = 3
    samples_per_class: int = 60
    image_size: int = 32
    seed: int = 0
    noise_amplitude: float = 0.08

    def validate(self) -> None:
        if self.num_classes < 1 or self.num_classes > len(SHAPE_NAMES) * len(COLOR_VALUES):
            raise ValueError(f"num_classes {self.num_classes} unsupported")
        if not 0 <= self.num_novel < self.num_classes:
            raise ValueError(f"num_novel {self.num_novel} incompatible with {self.num_classes} classes")
        if self.samples_per_class < 1 or self.image_size < 16:
            raise ValueError(f"degenerate spec {self}")
        if not 0.0 <= self.noise_amplitude <= 0.5:
            raise ValueError(f"noise_amplitude {self.noise_amplitude} outside [0, 0.5]")

    @property
    def base_classes(self) -> tuple[int, ...]:
        return tuple(range(self.num_classes - self.num_novel))

    @property
    def novel_classes(self) -> tuple[int, ...]:
        return tuple(range(self.num_classes - self.num_novel, self.num_classes))

    @property
    def num_samples(self) -> int:
        return self.num_classes * self.samples_per_class

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(obj: dict) -> "DatasetSpec":
        return DatasetSpec(**obj)


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float64 in [0, 1]
    label: int
    mask: np.ndarray  # (H, W) int64, BACKGROUND or class id


def _footprint(shape_kind: int, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dx, dy = xx - cx, yy - cy
    if shape_kind == 0:  # square
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape_kind == 1:  # circle
        return dx * dx + dy * dy <= r * r
    if shape_kind == 2:  # upright triangle
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    # cross
    arm = max(1.0, r / 3.0)
    return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))


def gen_sample(spec: DatasetSpec, index: int) -> Sample:
    spec.validate()
    if not 0 <= index < spec.num_samples:
        raise ValueError(f"index {index} outside dataset of {spec.num_samples} samples")
    label = index % spec.num_classes
    shape_kind = label % len(SHAPE_NAMES)
    color = np.array(COLOR_VALUES[label // len(SHAPE_NAMES)])

    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, index)))
    s = spec.image_size
    img = 0.40 + rng.uniform(-spec.noise_amplitude, spec.noise_amplitude, size=(3, s, s))
    img = np.clip(img, 0.0, 1.0)

    r = rng.uniform(s * 0.22, s * 0.34)
    lo, hi = r + 1.0, s - r - 2.0
    cx = rng.uniform(lo, hi)
    cy = rng.uniform(lo, hi)
    fp = _footprint(shape_kind, s, cx, cy, r)
    img[:, fp] = color[:, None]

    mask = np.full((s, s), BACKGROUND, dtype=np.int64)
    mask[fp] = label
    return Sample(image=img, label=label, mask=mask)


def gen_dataset(spec: DatasetSpec) -> list[Sample]:
    """All samples of the spec, deterministic per (seed, index)."""
    return [gen_sample(spec, i) for i in range(spec.num_samples)]


def split_by_classes(samples: list[Sample], classes) -> list[Sample]:
    wanted = set(classes)
    return [s for s in samples if s.label in wanted]
