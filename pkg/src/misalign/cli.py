"""Command-line entry points.

Every command takes --config <json> plus --out <dir>; --seed overrides the
config's top-level seed. Exit codes: 0 success, 2 config/usage error,
1 runtime failure. Each run writes a structured JSON log (runlog.json)
beside its outputs; volatile data such as wall-clock time lives only
there, so the result artifacts stay byte-reproducible.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .attack import AttackConfig, craft_batch, make_layer_subset
from .encoders import init_encoder
from .formats import ppm_write, tnsr_read, tnsr_write
from .gradcheck import full_gradient_suite
from .harness.dataset import gen_dataset, split_by_classes
from .harness.heads import make_zero_shot, train_linear_head, train_seg_head
from .harness.metrics import AdversarialBatch, evaluate
from .harness.pretrain import classification_pretrain, contrastive_pretrain, init_label_table
from .modelio import load_encoder_file, load_head_file, save_encoder_file, save_head_file
from .runconfig import (
    ConfigError,
    check_keys,
    load_json,
    parse_attack,
    parse_dataset,
    parse_encoder_config,
    parse_heads,
)
from .transfer import TransferConfig, run_transfer_matrix

COMMANDS = ("gen-data", "pretrain", "train-heads", "attack", "evaluate", "transfer-matrix", "gradcheck")


def _write_runlog(out: Path, command: str, config: dict, outputs: list[str], t0: float, seed_override) -> None:
    log = {
        "command": command,
        "version": __version__,
        "config": config,
        "seed_override": seed_override,
        "outputs": sorted(outputs),
        "wall_clock_s": time.time() - t0,
    }
    (out / "runlog.json").write_text(json.dumps(log, indent=2, sort_keys=True))


def _cmd_gen_data(cfg: dict, out: Path, seed_override) -> list[str]:
    check_keys(cfg, {"dataset"}, {"dataset"}, "gen-data")
    ds = cfg["dataset"]
    if seed_override is not None:
        ds = {**ds, "seed": seed_override}
    spec = parse_dataset(ds)
    samples = gen_dataset(spec)
    outputs = []
    index = []
    masks = np.stack([s.mask for s in samples]).astype(np.float64)
    for i, s in enumerate(samples):
        name = f"img_{i:05d}.ppm"
        ppm_write(s.image, out / name)
        outputs.append(name)
        index.append({"file": name, "label": s.label})
    tnsr_write(masks, out / "masks.tnsr")
    (out / "index.json").write_text(
        json.dumps({"dataset": spec.to_json(), "samples": index, "masks": "masks.tnsr"},
                   indent=2, sort_keys=True)
    )
    return outputs + ["index.json", "masks.tnsr"]


def _cmd_pretrain(cfg: dict, out: Path, seed_override) -> list[str]:
    check_keys(
        cfg,
        {"dataset", "encoder", "protocol", "epochs", "lr", "batch_size", "seed", "temperature",
         "table_seed", "split"},
        {"dataset", "encoder", "protocol"},
        "pretrain",
    )
    spec = parse_dataset(cfg["dataset"])
    kind, enc_cfg, enc_seed = parse_encoder_config(cfg["encoder"])
    protocol = cfg["protocol"]
    if protocol not in ("alignment", "classification"):
        raise ConfigError(f"unknown pretrain protocol {protocol!r}")
    seed = int(cfg.get("seed", 0)) if seed_override is None else seed_override
    epochs = int(cfg.get("epochs", 50))
    lr = float(cfg.get("lr", 3e-3))
    batch = int(cfg.get("batch_size", 9))
    split = cfg.get("split", "base")
    if split not in ("base", "all"):
        raise ConfigError(f"unknown split {split!r}")

    samples = gen_dataset(spec)
    if split == "base":
        samples = split_by_classes(samples, spec.base_classes)
    enc = init_encoder(kind, enc_cfg, enc_seed)
    outputs = []
    if protocol == "alignment":
        table = init_label_table(spec.num_classes, enc.feature_width, int(cfg.get("table_seed", 0)))
        res = contrastive_pretrain(enc, table, samples, epochs, lr, batch, seed,
                                   temperature=float(cfg.get("temperature", 0.07)))
        tnsr_write(res.table, out / "label_table.tnsr")
        outputs.append("label_table.tnsr")
    else:
        res = classification_pretrain(enc, samples, epochs, lr, batch, seed)
    save_encoder_file(res.encoder, out / "encoder.enck")
    outputs.append("encoder.enck")
    (out / "loss_history.json").write_text(json.dumps(res.loss_history))
    outputs.append("loss_history.json")
    return outputs


def _cmd_train_heads(cfg: dict, out: Path, seed_override) -> list[str]:
    check_keys(cfg, {"dataset", "backbone", "table", "heads"}, {"dataset", "backbone", "heads"}, "train-heads")
    spec = parse_dataset(cfg["dataset"])
    backbone = load_encoder_file(cfg["backbone"])
    heads = parse_heads(cfg["heads"])
    samples = gen_dataset(spec)
    base = split_by_classes(samples, spec.base_classes)
    outputs = []
    for h in heads:
        seed = h.seed if seed_override is None else seed_override
        if h.kind == "linear_cls":
            model = train_linear_head(backbone, base, spec.base_classes, input_size=h.input_size,
                                      steps=h.steps, lr=h.lr, seed=seed)
        elif h.kind == "seg":
            model = train_seg_head(backbone, base, spec.base_classes, tap_layer=h.tap_layer,
                                   input_size=h.input_size, steps=h.steps, lr=h.lr, seed=seed)
        else:
            if "table" not in cfg:
                raise ConfigError("zero_shot heads need a `table` path")
            table = tnsr_read(cfg["table"])
            model = make_zero_shot(backbone, table, tuple(range(spec.num_classes)),
                                   input_size=h.input_size)
        name = f"{h.head_id}.head"
        save_head_file(model, out / name)
        outputs.append(name)
    return outputs


def _cmd_attack(cfg: dict, out: Path, seed_override) -> list[str]:
    check_keys(
        cfg,
        {"dataset", "encoder", "attack", "layer_mode", "count", "classes", "head", "save_ppm"},
        {"dataset", "encoder", "attack"},
        "attack",
    )
    spec = parse_dataset(cfg["dataset"])
    enc = load_encoder_file(cfg["encoder"])
    attack = parse_attack(cfg["attack"])
    if seed_override is not None:
        attack = replace(attack, seed=seed_override)
    if "layer_mode" in cfg:
        subset = make_layer_subset(enc, cfg["layer_mode"])
        attack = replace(attack, objective=replace(attack.objective, layers=subset.layers,
                                                   cls_only=subset.cls_only))
    samples = gen_dataset(spec)
    if cfg.get("classes", "base") == "base":
        samples = split_by_classes(samples, spec.base_classes)
    count = int(cfg.get("count", len(samples)))
    samples = samples[:count]

    head = None
    truths = None
    if attack.objective.kind == "neg_task":
        if "head" not in cfg:
            raise ConfigError("neg_task attacks need a `head` path")
        head = load_head_file(cfg["head"])
        truths = [s.mask if head.head_kind == "seg" else s.label for s in samples]

    results = craft_batch([s.image for s in samples], enc, attack, head=head, truths=truths)
    deltas = np.stack([d for d, _ in results])
    tnsr_write(deltas, out / "perturbations.tnsr")
    outputs = ["perturbations.tnsr"]
    if cfg.get("save_ppm", True):
        for i, (s, (d, _)) in enumerate(zip(samples, results)):
            ppm_write(np.clip(s.image + d, 0.0, 1.0), out / f"adv_{i:05d}.ppm")
            ppm_write(s.image, out / f"clean_{i:05d}.ppm")
            outputs += [f"adv_{i:05d}.ppm", f"clean_{i:05d}.ppm"]
    traces = [tr for _, tr in results]
    (out / "traces.json").write_text(json.dumps(traces))
    outputs.append("traces.json")
    return outputs


def _cmd_evaluate(cfg: dict, out: Path, seed_override) -> list[str]:
    check_keys(cfg, {"dataset", "model", "perturbations", "epsilon", "classes"}, {"dataset", "model"}, "evaluate")
    spec = parse_dataset(cfg["dataset"])
    model = load_head_file(cfg["model"])
    samples = gen_dataset(spec)
    if cfg.get("classes", "base") == "base" and model.head_kind != "zero_shot":
        samples = split_by_classes(samples, spec.base_classes)
    batch = None
    if "perturbations" in cfg:
        if "epsilon" not in cfg:
            raise ConfigError("evaluating perturbations needs their declared `epsilon`")
        deltas = tnsr_read(cfg["perturbations"])
        samples = samples[: len(deltas)]
        batch = AdversarialBatch(deltas[: len(samples)], float(cfg["epsilon"]))
    rec = evaluate(model, samples, batch, base_classes=spec.base_classes)
    (out / "metrics.json").write_text(json.dumps(rec.to_json(), indent=2, sort_keys=True))
    return ["metrics.json"]


def _cmd_transfer_matrix(cfg: dict, out: Path, seed_override) -> list[str]:
    tc = TransferConfig.from_json(cfg)
    run_transfer_matrix(tc, out_dir=out, progress=lambda m: print(m, file=sys.stderr))
    outputs = ["report.json", "report.csv"]
    outputs += [str(p.relative_to(out)) for p in (out / "perturbations").glob("*.tnsr")]
    return outputs


def _cmd_gradcheck(cfg: dict, out: Path, seed_override) -> list[str]:
    check_keys(cfg, {"instances", "seed"}, set(), "gradcheck")
    seed = int(cfg.get("seed", 0)) if seed_override is None else seed_override
    report = full_gradient_suite(instances=int(cfg.get("instances", 20)), seed=seed)
    payload = {"max_relative_errors": report, "threshold": 1e-6,
               "all_passed": all(v <= 1e-6 for v in report.values())}
    (out / "gradcheck.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    if not payload["all_passed"]:
        raise RuntimeError("gradient checks exceeded the 1e-6 threshold")
    return ["gradcheck.json"]


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "train-heads": _cmd_train_heads,
    "attack": _cmd_attack,
    "evaluate": _cmd_evaluate,
    "transfer-matrix": _cmd_transfer_matrix,
    "gradcheck": _cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="misalign",
                                     description="feature-space transfer attacks on toy encoders")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0

    t0 = time.time()
    try:
        cfg = load_json(args.config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2

    out = Path(args.out)
    try:
        handler = _HANDLERS[args.command]
        out.mkdir(parents=True, exist_ok=True)
        outputs = handler(cfg, out, args.seed)
        _write_runlog(out, args.command, cfg, outputs, t0, args.seed)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure: report, nonzero exit
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
