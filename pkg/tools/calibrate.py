"""Calibration driver: pretrains the standard encoder set once (cached on
disk), then sweeps attack settings and prints transfer matrices.

Usage: python tools/calibrate.py <stage> [...]
Stages write their findings to stdout; nothing here ships in the package.
"""

import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from misalign.encoders import CnnConfig, ViTConfig, init_encoder, load_checkpoint, save_checkpoint
from misalign.formats import tnsr_read, tnsr_write
from misalign.harness import (
    DatasetSpec,
    classification_pretrain,
    contrastive_pretrain,
    evaluate,
    gen_dataset,
    init_label_table,
    make_zero_shot,
    train_linear_head,
    train_seg_head,
)
from misalign.harness.dataset import split_by_classes
from misalign.harness.metrics import AdversarialBatch
from misalign.objectives import ObjectiveKind
from misalign.attack import AttackConfig, craft_batch, make_layer_subset
from dataclasses import replace

CACHE = Path("/tmp/misalign_calib")
CACHE.mkdir(exist_ok=True)

TRAIN_SPEC = DatasetSpec(seed=0, samples_per_class=120, noise_amplitude=0.08)
TEST_SPEC = DatasetSpec(seed=100, samples_per_class=20, noise_amplitude=0.08)
CNN_CFG = CnnConfig(stem_channels=8, stage_channels=(8, 16, 64))
VIT_EPOCHS = 50
CNN_EPOCHS = 10


def log(msg):
    print(f"[{time.time()-T0:.0f}s] {msg}", flush=True)


T0 = time.time()


def get_assets():
    train = gen_dataset(TRAIN_SPEC)
    test = gen_dataset(TEST_SPEC)
    base = split_by_classes(train, TRAIN_SPEC.base_classes)
    novel = split_by_classes(train, TRAIN_SPEC.novel_classes)

    if not (CACHE / "vit.enck").exists():
        log("pretraining vit")
        vit0 = init_encoder("vit", ViTConfig(), seed=1)
        table0 = init_label_table(TRAIN_SPEC.num_classes, vit0.feature_width, 3)
        res_v = contrastive_pretrain(vit0, table0, base, VIT_EPOCHS, 3e-3, 9, seed=10)
        log(f"vit loss {res_v.loss_history[-1]:.3f}")
        (CACHE / "vit.enck").write_bytes(save_checkpoint(res_v.encoder))
        tnsr_write(res_v.table, CACHE / "table_phase1.tnsr")

        log("pretraining cnn")
        cnn0 = init_encoder("cnn", CNN_CFG, seed=2)
        res_c = contrastive_pretrain(cnn0, res_v.table, base, CNN_EPOCHS, 3e-3, 9, seed=11,
                                     trainable_classes=())
        log(f"cnn loss {res_c.loss_history[-1]:.4f}")
        (CACHE / "cnn.enck").write_bytes(save_checkpoint(res_c.encoder))

        log("novel rows")
        exemplars = []
        for c in TRAIN_SPEC.novel_classes:
            exemplars.extend([s for s in novel if s.label == c][:12])
        res_t = contrastive_pretrain(res_v.encoder, res_v.table, base[:96] + exemplars, 20, 5e-3, 9,
                                     seed=12, train_encoder=False,
                                     trainable_classes=TRAIN_SPEC.novel_classes)
        tnsr_write(res_t.table, CACHE / "table.tnsr")

        log("classification vit")
        res_cls = classification_pretrain(init_encoder("vit", ViTConfig(), seed=1), base,
                                          VIT_EPOCHS, 3e-3, 9, seed=13)
        (CACHE / "vit_cls.enck").write_bytes(save_checkpoint(res_cls.encoder))

    enc_v = load_checkpoint((CACHE / "vit.enck").read_bytes())
    enc_c = load_checkpoint((CACHE / "cnn.enck").read_bytes())
    enc_vcls = load_checkpoint((CACHE / "vit_cls.enck").read_bytes())
    table = tnsr_read(CACHE / "table.tnsr")
    return train, test, base, enc_v, enc_c, enc_vcls, table


def build_heads(enc_v, enc_c, table, base):
    return {
        "vit_cls": train_linear_head(enc_v, base, TRAIN_SPEC.base_classes, input_size=40, seed=20),
        "vit_seg": train_seg_head(enc_v, base, TRAIN_SPEC.base_classes, seed=21),
        "cnn_cls": train_linear_head(enc_c, base, TRAIN_SPEC.base_classes, input_size=36, seed=22),
        "cnn_seg": train_seg_head(enc_c, base, TRAIN_SPEC.base_classes, input_size=64, tap_layer=6, seed=23),
        "zs_vit": make_zero_shot(enc_v, table, tuple(range(TRAIN_SPEC.num_classes))),
        "zs_cnn": make_zero_shot(enc_c, table, tuple(range(TRAIN_SPEC.num_classes))),
    }


def eval_row(heads, sub, deltas, eps):
    ab = AdversarialBatch(deltas, eps)
    row = {}
    for name, h in heads.items():
        rec = evaluate(h, sub, ab, base_classes=TRAIN_SPEC.base_classes)
        row[name] = round(rec.normalized, 3)
    return row


def main():
    stage = sys.argv[1] if len(sys.argv) > 1 else "sweep_eps"
    train, test, base, enc_v, enc_c, enc_vcls, table = get_assets()
    heads = build_heads(enc_v, enc_c, table, base)
    base_test = split_by_classes(test, TRAIN_SPEC.base_classes)
    n_img = int(sys.argv[2]) if len(sys.argv) > 2 else 48
    sub = base_test[:n_img]
    imgs = [s.image for s in sub]

    for name, h in heads.items():
        rec = evaluate(h, sub, base_classes=TRAIN_SPEC.base_classes)
        log(f"clean {name}: {rec.clean:.3f} {rec.extra}")

    if stage == "sweep_eps":
        for eps in (4 / 255, 6 / 255, 8 / 255):
            for surr_name, enc in (("vit", enc_v), ("cnn", enc_c)):
                for kind in ("prm", "nrd", "dr"):
                    cfg = AttackConfig(epsilon=eps, iterations=250,
                                       objective=ObjectiveKind(kind), seed=30)
                    outs = craft_batch(imgs, enc, cfg)
                    deltas = np.stack([d for d, _ in outs])
                    log(f"eps={eps*255:.0f}/255 {surr_name}/{kind}: {eval_row(heads, sub, deltas, eps)}")

    elif stage == "ablations":
        eps = float(sys.argv[3]) / 255 if len(sys.argv) > 3 else 8 / 255
        rows = [
            ("vit_gprm", enc_v, ObjectiveKind("global_prm"), "all_layers", (0.75, 1.25)),
            ("vit_mid", enc_v, ObjectiveKind("prm"), "mid_layer", (0.75, 1.25)),
            ("vit_last", enc_v, ObjectiveKind("prm"), "last_layer", (0.75, 1.25)),
            ("vit_clsonly", enc_v, ObjectiveKind("prm"), "cls_only", (0.75, 1.25)),
            ("vitcls_prm", enc_vcls, ObjectiveKind("prm"), "all_layers", (0.75, 1.25)),
            ("vit_noaug", enc_v, ObjectiveKind("prm"), "all_layers", None),
        ]
        for row_id, enc, obj, mode, sr in rows:
            subset = make_layer_subset(enc, mode)
            cfg = AttackConfig(epsilon=eps, iterations=250, scale_range=sr, seed=30,
                               objective=replace(obj, layers=subset.layers, cls_only=subset.cls_only))
            outs = craft_batch(imgs, enc, cfg)
            deltas = np.stack([d for d, _ in outs])
            log(f"{row_id}: {eval_row(heads, sub, deltas, eps)}")

    elif stage == "novel":
        eps = 8 / 255
        cfg = AttackConfig(epsilon=eps, iterations=250, objective=ObjectiveKind("prm"), seed=30)
        all_test = test[: 2 * n_img]
        outs = craft_batch([s.image for s in all_test], enc_v, cfg)
        deltas = np.stack([d for d, _ in outs])
        rec = evaluate(heads["zs_vit"], all_test, AdversarialBatch(deltas, eps),
                       base_classes=TRAIN_SPEC.base_classes)
        log(f"zs_vit full-set: clean {rec.clean:.3f} adv {rec.adversarial:.3f} extra {rec.extra}")

    log("DONE")


if __name__ == "__main__":
    main()
