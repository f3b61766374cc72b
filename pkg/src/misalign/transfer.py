"""Transfer-matrix experiment driver.

Builds (or loads) pretrained backbones and downstream heads, crafts one
perturbation per (surrogate row, test image), evaluates every target on the
shared perturbations, and emits a report whose cells hold clean metric,
adversarial metric and normalised performance (adversarial / clean).

Rows = surrogate configurations (encoder x objective x layer subset x
pretraining protocol x augmentation). Columns = downstream models. Matched
cells mean the surrogate IS the target's backbone instance -- the situation
where a published encoder is reused downstream; mismatched cells cross
architectures.

Report files are deterministic for a given config: timing lives in the CLI
run log, never in the report.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .attack import AttackConfig, craft_batch, make_layer_subset
from .encoders import CnnConfig, Encoder, ViTConfig, init_encoder
from .formats import tnsr_to_bytes, tnsr_write
from .harness.dataset import DatasetSpec, Sample, gen_dataset, split_by_classes
from .harness.heads import DownstreamModel, make_zero_shot, train_linear_head, train_seg_head
from .harness.metrics import AdversarialBatch, evaluate
from .harness.pretrain import classification_pretrain, contrastive_pretrain, init_label_table
from .objectives import ObjectiveKind
from .runconfig import ConfigError, HeadSpec, check_keys, parse_attack, parse_dataset

__all__ = [
    "PretrainSettings",
    "TargetSpec",
    "RowSpec",
    "TransferConfig",
    "TransferAssets",
    "build_assets",
    "run_transfer_matrix",
    "TransferReport",
]


@dataclass(frozen=True)
class PretrainSettings:
    epochs: int = 50
    cnn_epochs: int = 10
    lr: float = 3e-3
    batch_size: int = 9
    temperature: float = 0.07
    novel_epochs: int = 12
    novel_lr: float = 5e-3
    novel_exemplars_per_class: int = 8
    seed: int = 0


@dataclass(frozen=True)
class EncoderSpec:
    """A named encoder instance: surrogates and target backbones are all
    trained from this list. The first alignment-protocol entry trains the
    shared label table; later alignment entries align to it frozen."""

    name: str
    kind: str  # "vit" | "cnn"
    seed: int
    protocol: str = "alignment"  # or "classification"


DEFAULT_ENCODERS = (
    EncoderSpec("vit", "vit", seed=1),
    EncoderSpec("cnn", "cnn", seed=2),
)


@dataclass(frozen=True)
class TargetSpec:
    target_id: str
    backbone: str  # an EncoderSpec name
    kind: str  # "linear_cls" | "seg" | "zero_shot"
    input_size: int | None = None
    tap_layer: int | None = None
    steps: int = 400
    lr: float = 0.05
    seed: int = 0


@dataclass(frozen=True)
class RowSpec:
    row_id: str
    surrogate: str  # an EncoderSpec name
    attack: AttackConfig
    layer_mode: str = "all_layers"
    task_head: str | None = None  # target id, for neg_task rows


@dataclass(frozen=True)
class TransferConfig:
    train_dataset: DatasetSpec
    test_dataset: DatasetSpec
    pretrain: PretrainSettings
    targets: tuple[TargetSpec, ...]
    rows: tuple[RowSpec, ...]
    encoders: tuple[EncoderSpec, ...] = DEFAULT_ENCODERS
    vit: ViTConfig = field(default_factory=ViTConfig)
    cnn: CnnConfig = field(default_factory=CnnConfig)
    table_seed: int = 3

    def validate(self) -> None:
        names = [e.name for e in self.encoders]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate encoder names {names}")
        if not any(e.protocol == "alignment" for e in self.encoders):
            raise ConfigError("at least one alignment-pretrained encoder is required")
        for t in self.targets:
            if t.backbone not in names:
                raise ConfigError(f"target {t.target_id}: unknown backbone {t.backbone!r}")
        for r in self.rows:
            if r.surrogate not in names:
                raise ConfigError(f"row {r.row_id}: unknown surrogate {r.surrogate!r}")
            if r.task_head is not None and r.task_head not in {t.target_id for t in self.targets}:
                raise ConfigError(f"row {r.row_id}: unknown task_head {r.task_head!r}")

    @staticmethod
    def from_json(obj: dict) -> "TransferConfig":
        check_keys(
            obj,
            {"train_dataset", "test_dataset", "pretrain", "targets", "rows", "vit", "cnn",
             "encoders", "table_seed"},
            {"train_dataset", "test_dataset", "targets", "rows"},
            "transfer",
        )
        train_ds = parse_dataset(obj["train_dataset"], "train_dataset")
        test_ds = parse_dataset(obj["test_dataset"], "test_dataset")
        pt_obj = dict(obj.get("pretrain", {}))
        check_keys(
            pt_obj,
            {"epochs", "cnn_epochs", "lr", "batch_size", "temperature", "novel_epochs",
             "novel_lr", "novel_exemplars_per_class", "seed"},
            set(),
            "pretrain",
        )
        pretrain = PretrainSettings(**pt_obj)

        encoders = []
        for i, e in enumerate(obj.get("encoders", [])):
            check_keys(e, {"name", "kind", "seed", "protocol"}, {"name", "kind", "seed"},
                       f"encoders[{i}]")
            if e["kind"] not in ("vit", "cnn"):
                raise ConfigError(f"encoders[{i}]: unknown kind {e['kind']!r}")
            if e.get("protocol", "alignment") not in ("alignment", "classification"):
                raise ConfigError(f"encoders[{i}]: unknown protocol {e.get('protocol')!r}")
            encoders.append(EncoderSpec(e["name"], e["kind"], int(e["seed"]),
                                        e.get("protocol", "alignment")))

        targets = []
        for i, t in enumerate(obj["targets"]):
            check_keys(t, {"id", "backbone", "kind", "input_size", "tap_layer", "steps", "lr", "seed"},
                       {"id", "backbone", "kind"}, f"targets[{i}]")
            targets.append(TargetSpec(
                target_id=t["id"], backbone=t["backbone"], kind=t["kind"],
                input_size=t.get("input_size"), tap_layer=t.get("tap_layer"),
                steps=int(t.get("steps", 400)), lr=float(t.get("lr", 0.05)),
                seed=int(t.get("seed", 0)),
            ))

        rows = []
        for i, r in enumerate(obj["rows"]):
            check_keys(r, {"id", "surrogate", "attack", "layer_mode", "task_head"},
                       {"id", "surrogate", "attack"}, f"rows[{i}]")
            rows.append(RowSpec(
                row_id=r["id"], surrogate=r["surrogate"],
                attack=parse_attack(r["attack"], f"rows[{i}].attack"),
                layer_mode=r.get("layer_mode", "all_layers"),
                task_head=r.get("task_head"),
            ))

        from .runconfig import parse_encoder_config  # reuse the strict parsers

        vit_cfg, cnn_cfg = ViTConfig(), CnnConfig()
        if "vit" in obj:
            _, vit_cfg, _ = parse_encoder_config({"kind": "vit", **obj["vit"]}, "vit")
        if "cnn" in obj:
            _, cnn_cfg, _ = parse_encoder_config({"kind": "cnn", **obj["cnn"]}, "cnn")
        cfg = TransferConfig(
            train_dataset=train_ds,
            test_dataset=test_ds,
            pretrain=pretrain,
            targets=tuple(targets),
            rows=tuple(rows),
            encoders=tuple(encoders) if encoders else DEFAULT_ENCODERS,
            vit=vit_cfg,
            cnn=cnn_cfg,
            table_seed=int(obj.get("table_seed", 3)),
        )
        cfg.validate()
        return cfg


@dataclass
class TransferAssets:
    """Everything expensive: pretrained backbones, per-backbone label
    tables, trained heads, and the datasets."""

    encoders: dict[str, Encoder]
    tables: dict[str, np.ndarray]
    heads: dict[str, DownstreamModel]
    train: list[Sample]
    test: list[Sample]
    base_classes: tuple[int, ...]
    novel_classes: tuple[int, ...]


def build_assets(cfg: TransferConfig, progress=None) -> TransferAssets:
    """Pretrain every named encoder against one shared base label space
    (the first alignment encoder trains the table; the rest align to it
    frozen). Zero-shot backbones get novel label rows fitted from a few
    exemplars with the encoder frozen. Then train every head."""

    def log(msg):
        if progress:
            progress(msg)

    cfg.validate()
    spec = cfg.train_dataset
    train = gen_dataset(spec)
    test = gen_dataset(cfg.test_dataset)
    base = split_by_classes(train, spec.base_classes)
    novel = split_by_classes(train, spec.novel_classes)
    pt = cfg.pretrain

    encoders: dict[str, Encoder] = {}
    base_table: np.ndarray | None = None
    for i, e in enumerate(cfg.encoders):
        arch_cfg = cfg.vit if e.kind == "vit" else cfg.cnn
        epochs = pt.epochs if e.kind == "vit" else pt.cnn_epochs
        enc0 = init_encoder(e.kind, arch_cfg, e.seed)
        if e.protocol == "classification":
            log(f"pretraining {e.name} (classification)")
            res = classification_pretrain(enc0, base, epochs, pt.lr, pt.batch_size, pt.seed + i)
            encoders[e.name] = res.encoder
            continue
        log(f"pretraining {e.name} (alignment)")
        if base_table is None:
            table0 = init_label_table(spec.num_classes, enc0.feature_width, cfg.table_seed)
            res = contrastive_pretrain(enc0, table0, base, epochs, pt.lr, pt.batch_size,
                                       pt.seed + i, temperature=pt.temperature)
            base_table = res.table
        else:
            res = contrastive_pretrain(enc0, base_table, base, epochs, pt.lr, pt.batch_size,
                                       pt.seed + i, temperature=pt.temperature,
                                       trainable_classes=())
        encoders[e.name] = res.encoder

    exemplars = []
    for c in spec.novel_classes:
        exemplars.extend([s for s in novel if s.label == c][: pt.novel_exemplars_per_class])
    mix = base[: max(pt.batch_size * 4, 48)] + exemplars

    tables: dict[str, np.ndarray] = {}
    zero_shot_backbones = {t.backbone for t in cfg.targets if t.kind == "zero_shot"}
    for name in sorted(zero_shot_backbones):
        log(f"fitting novel label rows for {name}")
        res_t = contrastive_pretrain(encoders[name], base_table, mix, pt.novel_epochs,
                                     pt.novel_lr, pt.batch_size, pt.seed + 50,
                                     temperature=pt.temperature, train_encoder=False,
                                     trainable_classes=spec.novel_classes)
        tables[name] = res_t.table
    tables.setdefault("__base__", base_table)

    heads: dict[str, DownstreamModel] = {}
    for t in cfg.targets:
        log(f"training head {t.target_id}")
        backbone = encoders[t.backbone]
        if t.kind == "linear_cls":
            heads[t.target_id] = train_linear_head(
                backbone, base, spec.base_classes,
                input_size=t.input_size, steps=t.steps, lr=t.lr, seed=t.seed,
            )
        elif t.kind == "seg":
            heads[t.target_id] = train_seg_head(
                backbone, base, spec.base_classes,
                tap_layer=t.tap_layer, input_size=t.input_size, steps=t.steps, lr=t.lr, seed=t.seed,
            )
        elif t.kind == "zero_shot":
            heads[t.target_id] = make_zero_shot(
                backbone, tables[t.backbone], tuple(range(spec.num_classes)),
                input_size=t.input_size,
            )
        else:
            raise ConfigError(f"target {t.target_id}: unknown head kind {t.kind!r}")
    return TransferAssets(
        encoders=encoders,
        tables=tables,
        heads=heads,
        train=train,
        test=test,
        base_classes=spec.base_classes,
        novel_classes=spec.novel_classes,
    )


@dataclass
class TransferReport:
    targets: list[str]
    rows: list[str]
    cells: dict[str, dict[str, dict]]  # row -> target -> cell
    clean: dict[str, dict]  # target -> clean record
    config: dict

    def validate(self) -> None:
        for row_id, per_target in self.cells.items():
            for target_id, cell in per_target.items():
                expect = cell["adversarial"] / cell["clean"]
                if abs(cell["normalized"] - expect) > 1e-12:
                    raise ValueError(f"cell ({row_id}, {target_id}) normalised value inconsistent")
                if abs(cell["clean"] - self.clean[target_id]["clean"]) > 1e-12:
                    raise ValueError(f"cell ({row_id}, {target_id}) clean metric drifted")

    def to_json(self) -> dict:
        return {
            "targets": self.targets,
            "rows": self.rows,
            "clean": self.clean,
            "cells": self.cells,
            "config": self.config,
        }

    def to_csv(self) -> str:
        lines = ["row,target,clean,adversarial,normalized"]
        for row_id in self.rows:
            for target_id in self.targets:
                c = self.cells[row_id][target_id]
                lines.append(
                    f"{row_id},{target_id},{c['clean']!r},{c['adversarial']!r},{c['normalized']!r}"
                )
        return "\n".join(lines) + "\n"


def run_transfer_matrix(cfg: TransferConfig, out_dir=None, assets: TransferAssets | None = None,
                        progress=None) -> TransferReport:
    """Every row attacks the base-class test subset (the samples every head,
    including task-loss surrogates, can express truths for); every column is
    scored on that same subset, so clean metrics are constant down columns.
    Novel-class behaviour is analysed separately from the matrix."""

    def log(msg):
        if progress:
            progress(msg)

    if assets is None:
        assets = build_assets(cfg, progress=progress)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "perturbations").mkdir(parents=True, exist_ok=True)

    eval_set = [s for s in assets.test if s.label in set(assets.base_classes)]
    images = [s.image for s in eval_set]

    clean_records: dict[str, dict] = {}
    for t in cfg.targets:
        model = assets.heads[t.target_id]
        rec = evaluate(model, eval_set, base_classes=assets.base_classes)
        clean_records[t.target_id] = rec.to_json()

    cells: dict[str, dict[str, dict]] = {}
    for row in cfg.rows:
        log(f"attacking row {row.row_id}")
        enc = assets.encoders[row.surrogate]
        subset_sel = make_layer_subset(enc, row.layer_mode)
        objective = replace(row.attack.objective, layers=subset_sel.layers, cls_only=subset_sel.cls_only)
        attack = replace(row.attack, objective=objective)

        head = None
        truths = None
        if objective.kind == "neg_task":
            if row.task_head is None:
                raise ConfigError(f"row {row.row_id}: neg_task rows need task_head")
            head = assets.heads[row.task_head]
            truths = [s.mask if head.head_kind == "seg" else s.label for s in eval_set]

        results = craft_batch(images, enc, attack, head=head, truths=truths)
        deltas = np.stack([d for d, _ in results])
        if out is not None:
            tnsr_write(deltas, out / "perturbations" / f"{row.row_id}.tnsr")

        batch = AdversarialBatch(deltas, attack.epsilon)
        cells[row.row_id] = {}
        for t in cfg.targets:
            model = assets.heads[t.target_id]
            rec = evaluate(model, eval_set, batch, base_classes=assets.base_classes)
            cells[row.row_id][t.target_id] = rec.to_json()

    report = TransferReport(
        targets=[t.target_id for t in cfg.targets],
        rows=[r.row_id for r in cfg.rows],
        cells=cells,
        clean=clean_records,
        config=_config_json(cfg),
    )
    report.validate()
    if out is not None:
        (out / "report.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True))
        (out / "report.csv").write_text(report.to_csv())
    return report


def _config_json(cfg: TransferConfig) -> dict:
    from dataclasses import asdict

    obj = {
        "train_dataset": cfg.train_dataset.to_json(),
        "test_dataset": cfg.test_dataset.to_json(),
        "pretrain": asdict(cfg.pretrain),
        "vit": asdict(cfg.vit),
        "cnn": asdict(cfg.cnn),
        "encoders": [asdict(e) for e in cfg.encoders],
        "table_seed": cfg.table_seed,
        "targets": [asdict(t) for t in cfg.targets],
        "rows": [
            {
                "id": r.row_id,
                "surrogate": r.surrogate,
                "layer_mode": r.layer_mode,
                "task_head": r.task_head,
                "attack": r.attack.to_json(),
            }
            for r in cfg.rows
        ],
    }
    return obj
