"""Finite-difference gradient suite over the op catalog and the attack
objectives composed through tiny encoders.

Each op is wrapped into a scalar via a frozen random linear functional so
every output component receives a nontrivial output gradient. Objectives
run through a 2-block toy ViT and a 1-stage toy CNN on 4x4 images, which
keeps the whole suite within its runtime budget.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoders import CnnConfig, ViTConfig, init_encoder
from .harness.heads import DownstreamModel
from .objectives import dr_loss, global_prm_loss, neg_task_loss, nrd_loss, prm_loss
from .tensor import Tensor, finite_difference_check

__all__ = ["op_gradient_checks", "objective_gradient_checks", "full_gradient_suite"]


def _frozen_probe(rng, shape):
    """A fixed random linear functional: out -> sum(out * w). Drawn once per
    case so the checked function is pure."""
    w = Tensor(rng.standard_normal(shape))
    return lambda out: T.mul(out, w).sum()


def op_gradient_checks(instances: int = 20, seed: int = 0) -> dict[str, float]:
    """Max relative finite-difference error per op over random instances."""
    rng = np.random.default_rng(np.random.PCG64(seed))

    def vec(*shape):
        return rng.standard_normal(shape)

    def case_add():
        b = Tensor(vec(3, 4))
        probe = _frozen_probe(rng, (3, 4))
        return (lambda t: probe(T.add(t, b))), vec(3, 4)

    def case_sub():
        b = Tensor(vec(3, 4))
        probe = _frozen_probe(rng, (3, 4))
        return (lambda t: probe(T.sub(b, t))), vec(3, 4)

    def case_mul():
        b = Tensor(vec(2, 5))
        probe = _frozen_probe(rng, (2, 5))
        return (lambda t: probe(T.mul(t, b))), vec(2, 5)

    def case_div():
        b = Tensor(vec(6) + np.where(vec(6) > 0, 2.0, -2.0))
        probe = _frozen_probe(rng, (6,))
        return (lambda t: probe(T.div(t, b))), vec(6)

    def case_scale():
        c = float(vec(1)[0])
        probe = _frozen_probe(rng, (4, 3))
        return (lambda t: probe(T.scale(t, c))), vec(4, 3)

    def case_add_trailing():
        b = Tensor(vec(4))
        probe = _frozen_probe(rng, (2, 3, 4))
        return (lambda t: probe(T.add_trailing(t, b))), vec(2, 3, 4)

    def case_add_trailing_vec():
        a = Tensor(vec(2, 3, 4))
        probe = _frozen_probe(rng, (2, 3, 4))
        return (lambda t: probe(T.add_trailing(a, t))), vec(3, 4)

    def case_add_channels():
        b = Tensor(vec(3))
        probe = _frozen_probe(rng, (2, 3, 4, 2))
        return (lambda t: probe(T.add_channels(t, b))), vec(2, 3, 4, 2)

    def case_mul_channels():
        a = Tensor(vec(2, 5, 3))
        probe = _frozen_probe(rng, (2, 5, 3))
        return (lambda t: probe(T.mul_channels(a, t))), vec(5)

    def case_matmul2d():
        b = Tensor(vec(4, 3))
        probe = _frozen_probe(rng, (2, 3))
        return (lambda t: probe(T.matmul(t, b))), vec(2, 4)

    def case_matmul3d():
        a = Tensor(vec(2, 3, 4))
        probe = _frozen_probe(rng, (2, 3, 2))
        return (lambda t: probe(T.matmul(a, t))), vec(2, 4, 2)

    def case_relu():
        x = vec(4, 4)
        x = x + np.where(x >= 0, 0.1, -0.1)  # keep off the kink
        probe = _frozen_probe(rng, (4, 4))
        return (lambda t: probe(T.relu(t))), x

    def case_gelu():
        probe = _frozen_probe(rng, (3, 5))
        return (lambda t: probe(T.gelu(t))), vec(3, 5)

    def case_exp():
        probe = _frozen_probe(rng, (3, 3))
        return (lambda t: probe(T.exp(t))), vec(3, 3)

    def case_log():
        probe = _frozen_probe(rng, (7,))
        return (lambda t: probe(T.log(t))), np.abs(vec(7)) + 0.5

    def case_sqrt():
        probe = _frozen_probe(rng, (7,))
        return (lambda t: probe(T.sqrt(t))), np.abs(vec(7)) + 0.5

    def case_sum():
        probe = _frozen_probe(rng, (3, 2))
        return (lambda t: probe(T.tsum(t, axis=1))), vec(3, 4, 2)

    def case_mean():
        probe = _frozen_probe(rng, (4,))
        return (lambda t: probe(T.tmean(t, axis=(0, 2)))), vec(3, 4, 2)

    def case_std():
        return (lambda t: T.tstd(t)), vec(4, 5)

    def case_std_axis():
        probe = _frozen_probe(rng, (3,))
        return (lambda t: probe(T.tstd(t, axis=1))), vec(3, 6)

    def case_reshape():
        probe = _frozen_probe(rng, (3, 8))
        return (lambda t: probe(T.reshape(t, (3, 8)))), vec(2, 3, 4)

    def case_transpose():
        probe = _frozen_probe(rng, (4, 2, 3))
        return (lambda t: probe(T.transpose(t, (2, 0, 1)))), vec(2, 3, 4)

    def case_concat():
        b = Tensor(vec(2, 3))
        probe = _frozen_probe(rng, (6, 3))
        return (lambda t: probe(T.concat([t, b, t], axis=0))), vec(2, 3)

    def case_slice():
        probe = _frozen_probe(rng, (2, 3))
        return (lambda t: probe(t[1:3, 0, ::2])), vec(4, 2, 5)

    def case_softmax():
        probe = _frozen_probe(rng, (3, 5))
        return (lambda t: probe(T.softmax(t, axis=-1))), vec(3, 5)

    def case_layernorm():
        g = Tensor(vec(6))
        b = Tensor(vec(6))
        probe = _frozen_probe(rng, (4, 6))
        return (lambda t: probe(T.layernorm(t, g, b))), vec(4, 6)

    def case_layernorm_affine():
        x = Tensor(vec(4, 6))
        b = Tensor(vec(6))
        probe = _frozen_probe(rng, (4, 6))
        return (lambda t: probe(T.layernorm(x, t, b))), vec(6)

    def case_bilinear():
        probe = _frozen_probe(rng, (2, 5, 4))
        return (lambda t: probe(T.bilinear_resize(t, 5, 4))), vec(2, 3, 6)

    def case_cosine():
        b = Tensor(vec(4, 5) + 0.3)
        probe = _frozen_probe(rng, (4,))
        return (lambda t: probe(T.cosine_similarity_lastaxis(t, b))), vec(4, 5) + 0.2

    cases = {
        "add": case_add,
        "sub": case_sub,
        "mul": case_mul,
        "div": case_div,
        "scale": case_scale,
        "add_trailing": case_add_trailing,
        "add_trailing_vec": case_add_trailing_vec,
        "add_channels": case_add_channels,
        "mul_channels": case_mul_channels,
        "matmul_2d": case_matmul2d,
        "matmul_3d": case_matmul3d,
        "relu": case_relu,
        "gelu": case_gelu,
        "exp": case_exp,
        "log": case_log,
        "sqrt": case_sqrt,
        "sum": case_sum,
        "mean": case_mean,
        "std": case_std,
        "std_axis": case_std_axis,
        "reshape": case_reshape,
        "transpose": case_transpose,
        "concat": case_concat,
        "slice": case_slice,
        "softmax": case_softmax,
        "layernorm": case_layernorm,
        "layernorm_affine": case_layernorm_affine,
        "bilinear_resize": case_bilinear,
        "cosine_similarity": case_cosine,
    }
    report = {}
    for name, make in cases.items():
        worst = 0.0
        for _ in range(instances):
            f, x = make()
            worst = max(worst, finite_difference_check(f, x))
        report[name] = worst
    return report


def _tiny_vit():
    return init_encoder("vit", ViTConfig(image_size=4, patch_size=2, embed_dim=8, num_blocks=2, num_heads=2), seed=11)


def _tiny_cnn():
    return init_encoder("cnn", CnnConfig(stem_channels=4, stage_channels=(6,), blocks_per_stage=2), seed=12)


def objective_gradient_checks(instances: int = 20, seed: int = 0) -> dict[str, float]:
    """Objectives differentiated end to end through a 2-block toy ViT and a
    1-stage toy CNN (image gradient vs central differences). The clean
    branch uses a nearby but distinct image, frozen per instance, so paired
    losses are away from their stationary point at clean == adversarial."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    encoders = {"vit": _tiny_vit(), "cnn": _tiny_cnn()}
    report = {}
    for ename, enc in encoders.items():
        head = DownstreamModel(
            enc,
            "linear_cls",
            (0, 1, 2),
            4,
            params={
                "w": rng.standard_normal((enc.feature_width, 3)) * 0.5,
                "b": rng.standard_normal(3) * 0.1,
            },
        )
        for lname in ("prm", "global_prm", "nrd", "dr", "neg_task"):
            worst = 0.0
            for _ in range(instances):
                x = rng.uniform(0.1, 0.9, size=(3, 4, 4))
                clean_img = np.clip(x + rng.uniform(-0.08, 0.08, x.shape), 0.0, 1.0)
                clean = enc.forward_with_taps(clean_img, enc.tap_layers)
                if lname == "prm":
                    f = lambda t: prm_loss(clean, enc.forward_with_taps(t, enc.tap_layers))
                elif lname == "global_prm":
                    f = lambda t: global_prm_loss(clean, enc.forward_with_taps(t, enc.tap_layers))
                elif lname == "nrd":
                    f = lambda t: nrd_loss(clean, enc.forward_with_taps(t, enc.tap_layers))
                elif lname == "dr":
                    f = lambda t: dr_loss(enc.forward_with_taps(t, enc.tap_layers))
                else:
                    f = lambda t: neg_task_loss(head, t, 1)
                worst = max(worst, finite_difference_check(f, x))
            report[f"{lname}_{ename}"] = worst
    return report


def full_gradient_suite(instances: int = 20, seed: int = 0) -> dict[str, float]:
    report = op_gradient_checks(instances, seed)
    report.update(objective_gradient_checks(instances, seed))
    return report
