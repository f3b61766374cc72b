"""Iterative L-inf bounded perturbation optimization.

Each step: sample a rescale factor (optional), resize clean and adversarial
images by the SAME factor, evaluate the configured objective on the
surrogate's tapped features, backpropagate to the perturbation, update with
either the sign rule (delta -= alpha * sign(grad), sign(0) = 0) or an
adaptive-moment rule (decay 0.9/0.999, bias correction, eps 1e-8), then
clamp the perturbation to the epsilon-ball and re-express the pixel-range
clamp on delta itself (delta = clip(x + delta, 0, 1) - x). Both constraints
therefore hold after every iteration, not just at the end.

Clean features are recomputed at each sampled scale so that clean and
adversarial token grids stay aligned; since the encoder is pure they are
cached per scale for the duration of a run.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .encoders import Encoder, LayerFeatures
from .objectives import (
    ObjectiveKind,
    cls_token_only,
    dr_loss,
    global_prm_loss,
    neg_task_loss,
    nrd_loss,
    prm_loss,
)
from .tensor import Tensor

__all__ = [
    "AttackConfig",
    "AttackError",
    "PerturbationState",
    "LayerSubset",
    "init_perturbation",
    "project_linf",
    "project_pixel_range",
    "attack_step",
    "run_attack",
    "make_layer_subset",
    "craft_batch",
    "worker_count",
]

UPDATE_RULES = ("sign", "adaptive_moment")
INIT_MODES = ("uniform", "zero")
LAYER_MODES = ("all_layers", "cls_only", "mid_layer", "last_layer")


class AttackError(RuntimeError):
    """Attack aborted; carries a diagnostic snapshot of the state."""

    def __init__(self, message: str, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = snapshot or {}


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8.0 / 255.0
    step_size: float = 0.5 / 255.0
    iterations: int = 250
    objective: ObjectiveKind = field(default_factory=lambda: ObjectiveKind("prm"))
    update_rule: str = "adaptive_moment"
    init: str = "uniform"
    scale_range: tuple[float, float] | None = (0.75, 1.25)
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon {self.epsilon} outside [0, 1]")
        if self.iterations < 0:
            raise ValueError(f"negative iteration count {self.iterations}")
        if self.iterations > 0 and self.step_size <= 0.0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if self.update_rule not in UPDATE_RULES:
            raise ValueError(f"unknown update rule {self.update_rule!r}")
        if self.init not in INIT_MODES:
            raise ValueError(f"unknown init mode {self.init!r}")
        if self.scale_range is not None:
            lo, hi = self.scale_range
            if not (0.0 < lo <= hi):
                raise ValueError(f"bad scale range ({lo}, {hi})")

    def to_json(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "step_size": self.step_size,
            "iterations": self.iterations,
            "objective": self.objective.to_json(),
            "update_rule": self.update_rule,
            "init": self.init,
            "scale_range": list(self.scale_range) if self.scale_range else None,
            "seed": self.seed,
        }

    @staticmethod
    def from_json(obj: dict) -> "AttackConfig":
        sr = obj.get("scale_range", (0.75, 1.25))
        return AttackConfig(
            epsilon=float(obj.get("epsilon", 8.0 / 255.0)),
            step_size=float(obj.get("step_size", 0.5 / 255.0)),
            iterations=int(obj.get("iterations", 250)),
            objective=ObjectiveKind.from_json(obj["objective"]) if "objective" in obj else ObjectiveKind("prm"),
            update_rule=obj.get("update_rule", "adaptive_moment"),
            init=obj.get("init", "uniform"),
            scale_range=tuple(sr) if sr is not None else None,
            seed=int(obj.get("seed", 0)),
        )


@dataclass
class PerturbationState:
    delta: np.ndarray
    iteration: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    loss_history: list[float] = field(default_factory=list)
    rng: np.random.Generator | None = None
    clean_cache: dict = field(default_factory=dict)


def init_perturbation(shape, cfg: AttackConfig) -> PerturbationState:
    """Draw the initial perturbation (i.i.d. uniform in [-eps, eps], or
    zeros) from cfg.seed; the same generator then drives scale sampling."""
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    if cfg.init == "uniform":
        delta = rng.uniform(-cfg.epsilon, cfg.epsilon, size=shape)
    else:
        delta = np.zeros(shape)
    return PerturbationState(delta=delta, rng=rng)


def project_linf(delta: np.ndarray, epsilon: float) -> np.ndarray:
    """Componentwise clamp to [-eps, eps]; idempotent."""
    if epsilon < 0:
        raise ValueError(f"negative epsilon {epsilon}")
    return np.clip(delta, -epsilon, epsilon)


def project_pixel_range(x_adv: np.ndarray) -> np.ndarray:
    """Componentwise clamp to [0, 1]; idempotent."""
    return np.clip(x_adv, 0.0, 1.0)


def _snap_size(n: float, enc) -> int:
    """Round a rescaled size to something the encoder accepts (ViT inputs
    must stay a multiple of the patch size)."""
    if getattr(enc, "kind", None) == "vit":
        d = enc.config.patch_size
        return max(d, int(round(n / d)) * d)
    return max(1, int(round(n)))


def _clean_features(state: PerturbationState, x_clean: np.ndarray, enc, layers, size) -> list[LayerFeatures]:
    key = (size, layers)
    feats = state.clean_cache.get(key)
    if feats is None:
        img = Tensor(x_clean)
        if size != x_clean.shape[1:]:
            img = T.bilinear_resize(img, size[0], size[1])
        feats = enc.forward_with_taps(img, layers)
        state.clean_cache[key] = feats
    return feats


def _evaluate_objective(cfg: AttackConfig, enc, adv: Tensor, clean: list[LayerFeatures] | None,
                        layers, head, truth) -> Tensor:
    kind = cfg.objective.kind
    if kind == "neg_task":
        if head is None or truth is None:
            raise AttackError("neg_task objective needs a head and ground truth")
        return neg_task_loss(head, adv, truth)
    adv_feats = enc.forward_with_taps(adv, layers)
    if cfg.objective.cls_only:
        adv_feats = cls_token_only(adv_feats)
        clean = cls_token_only(clean) if clean is not None else None
    if kind == "prm":
        return prm_loss(clean, adv_feats)
    if kind == "global_prm":
        return global_prm_loss(clean, adv_feats)
    if kind == "nrd":
        return nrd_loss(clean, adv_feats)
    return dr_loss(adv_feats)


def attack_step(state: PerturbationState, x_clean: np.ndarray, enc, cfg: AttackConfig,
                head=None, truth=None) -> PerturbationState:
    """One optimization iteration; mutates and returns `state`. The epsilon
    ball and pixel-range constraints hold on exit."""
    obj = cfg.objective
    layers = obj.resolve_layers(enc)
    if obj.cls_only and getattr(enc, "kind", None) == "cnn":
        raise AttackError("cls_only restriction is undefined for CNN encoders")

    _, h, w = x_clean.shape
    if cfg.scale_range is not None:
        if state.rng is None:
            raise AttackError("state has no RNG but scale augmentation is enabled")
        s = state.rng.uniform(cfg.scale_range[0], cfg.scale_range[1])
        size = (_snap_size(h * s, enc), _snap_size(w * s, enc))
    else:
        size = (h, w)

    graph = T.ComputeGraph()
    delta = graph.leaf(state.delta)
    adv = T.add(Tensor(x_clean), delta)
    if size != (h, w):
        adv = T.bilinear_resize(adv, size[0], size[1])

    clean = None
    if obj.needs_clean_features:
        clean = _clean_features(state, x_clean, enc, layers, size)

    loss = _evaluate_objective(cfg, enc, adv, clean, layers, head, truth)
    loss_val = float(loss.data)
    if not np.isfinite(loss_val):
        raise AttackError(
            "non-finite attack loss",
            snapshot={
                "iteration": state.iteration,
                "loss": loss_val,
                "delta_min": float(state.delta.min()),
                "delta_max": float(state.delta.max()),
                "history_tail": state.loss_history[-5:],
            },
        )
    T.backward(loss)
    grad = graph.gradient(delta)

    if cfg.update_rule == "sign":
        new_delta = state.delta - cfg.step_size * np.sign(grad)
    else:
        if state.m is None:
            state.m = np.zeros_like(state.delta)
            state.v = np.zeros_like(state.delta)
        t = state.iteration + 1
        state.m = 0.9 * state.m + 0.1 * grad
        state.v = 0.999 * state.v + 0.001 * (grad * grad)
        m_hat = state.m / (1.0 - 0.9 ** t)
        v_hat = state.v / (1.0 - 0.999 ** t)
        new_delta = state.delta - cfg.step_size * m_hat / (np.sqrt(v_hat) + 1e-8)

    new_delta = project_linf(new_delta, cfg.epsilon)
    # pixel-range projection expressed on delta so both constraints live on it
    new_delta = project_pixel_range(x_clean + new_delta) - x_clean

    state.delta = new_delta
    state.iteration += 1
    state.loss_history.append(loss_val)
    return state


def run_attack(x_clean: np.ndarray, enc, cfg: AttackConfig, head=None, truth=None,
               callback=None) -> tuple[np.ndarray, list[float]]:
    """Run cfg.iterations attack steps and return (adversarial image, loss
    trace). The result satisfies ||x' - x||_inf <= eps and x' in [0, 1]."""
    cfg.validate()
    x_clean = np.asarray(x_clean, dtype=np.float64)
    if x_clean.min() < 0.0 or x_clean.max() > 1.0:
        raise ValueError("clean image must lie in [0, 1]")
    state = init_perturbation(x_clean.shape, cfg)
    state.delta = project_pixel_range(x_clean + state.delta) - x_clean
    for _ in range(cfg.iterations):
        attack_step(state, x_clean, enc, cfg, head=head, truth=truth)
        if callback is not None:
            callback(state)
    x_adv = x_clean + state.delta
    if float(np.max(np.abs(state.delta))) > cfg.epsilon + 1e-12:
        raise AttackError("epsilon-ball constraint violated after run")
    if x_adv.min() < 0.0 or x_adv.max() > 1.0:
        raise AttackError("pixel-range constraint violated after run")
    return x_adv, state.loss_history


@dataclass(frozen=True)
class LayerSubset:
    layers: tuple[int, ...]
    cls_only: bool = False


def make_layer_subset(enc, mode: str) -> LayerSubset:
    """Layer-set presets: every tap, the single middle tap (ceil(n/2)),
    the final tap, or all taps restricted to the CLS token."""
    taps = tuple(enc.tap_layers)
    n = len(taps)
    if mode == "all_layers":
        return LayerSubset(taps)
    if mode == "mid_layer":
        return LayerSubset((taps[(n + 1) // 2 - 1],))
    if mode == "last_layer":
        return LayerSubset((taps[-1],))
    if mode == "cls_only":
        if getattr(enc, "kind", None) != "vit":
            raise ValueError("cls_only subset requires a ViT encoder")
        return LayerSubset(taps, cls_only=True)
    raise ValueError(f"unknown layer subset mode {mode!r}; expected one of {LAYER_MODES}")


def worker_count() -> int:
    """Worker threads for batch attack crafting (env MISALIGN_THREADS)."""
    raw = os.environ.get("MISALIGN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"MISALIGN_THREADS must be an integer, got {raw!r}")
    return max(1, n)


def craft_batch(images, enc, cfg: AttackConfig, head=None, truths=None,
                threads: int | None = None) -> list[tuple[np.ndarray, list[float]]]:
    """Craft one perturbation per image. Image i runs with seed
    cfg.seed XOR i, so results are independent of scheduling order."""
    if threads is None:
        threads = worker_count()

    def job(i):
        sub_cfg = replace(cfg, seed=cfg.seed ^ i)
        truth = truths[i] if truths is not None else None
        x_adv, trace = run_attack(np.asarray(images[i], dtype=np.float64), enc, sub_cfg,
                                  head=head, truth=truth)
        return x_adv - np.asarray(images[i]), trace

    if threads == 1:
        return [job(i) for i in range(len(images))]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(job, range(len(images))))
