import json
from dataclasses import replace

import numpy as np
import pytest

from misalign.attack import AttackConfig
from misalign.encoders import CnnConfig, ViTConfig
from misalign.harness.dataset import DatasetSpec
from misalign.objectives import ObjectiveKind
from misalign.runconfig import ConfigError
from misalign.transfer import (
    EncoderSpec,
    PretrainSettings,
    RowSpec,
    TargetSpec,
    TransferConfig,
    build_assets,
    run_transfer_matrix,
)


def micro_config(rows=None):
    attack = AttackConfig(iterations=2, objective=ObjectiveKind("prm"), seed=7)
    if rows is None:
        rows = (
            RowSpec("vit_prm", "vit", attack),
            RowSpec("zero_budget", "vit", replace(attack, epsilon=0.0)),
        )
    return TransferConfig(
        train_dataset=DatasetSpec(num_classes=6, num_novel=2, samples_per_class=16,
                                  image_size=16, seed=1),
        test_dataset=DatasetSpec(num_classes=6, num_novel=2, samples_per_class=2,
                                 image_size=16, seed=2),
        pretrain=PretrainSettings(epochs=12, cnn_epochs=12, batch_size=4, novel_epochs=2,
                                  novel_exemplars_per_class=2),
        targets=(
            TargetSpec("vit_cls", "vit", "linear_cls", steps=250),
            TargetSpec("cnn_cls", "cnn", "linear_cls", steps=250),
            TargetSpec("zs_vit", "vit", "zero_shot"),
        ),
        rows=tuple(rows),
        vit=ViTConfig(image_size=16, patch_size=8, embed_dim=16, num_blocks=2, num_heads=2),
        cnn=CnnConfig(stem_channels=4, stage_channels=(4, 16), blocks_per_stage=1),
    )


@pytest.fixture(scope="module")
def micro_report(tmp_path_factory):
    out = tmp_path_factory.mktemp("matrix")
    cfg = micro_config()
    report = run_transfer_matrix(cfg, out_dir=out)
    return cfg, out, report


class TestReportInvariants:
    def test_normalized_is_adv_over_clean(self, micro_report):
        _, _, report = micro_report
        for row in report.rows:
            for target in report.targets:
                cell = report.cells[row][target]
                assert cell["normalized"] == pytest.approx(
                    cell["adversarial"] / cell["clean"], abs=1e-12)

    def test_clean_identical_down_each_column(self, micro_report):
        _, _, report = micro_report
        for target in report.targets:
            ref = report.clean[target]["clean"]
            for row in report.rows:
                assert report.cells[row][target]["clean"] == pytest.approx(ref, abs=1e-12)

    def test_zero_budget_row_normalized_one(self, micro_report):
        _, _, report = micro_report
        for target in report.targets:
            assert report.cells["zero_budget"][target]["normalized"] == 1.0

    def test_perturbations_written_and_within_budget(self, micro_report):
        cfg, out, report = micro_report
        from misalign.formats import tnsr_read

        deltas = tnsr_read(out / "perturbations" / "vit_prm.tnsr")
        assert deltas.shape[0] == len(cfg.test_dataset.base_classes) * 2
        assert np.max(np.abs(deltas)) <= cfg.rows[0].attack.epsilon + 1e-12

    def test_csv_and_json_agree_cell_for_cell(self, micro_report):
        _, out, report = micro_report
        payload = json.loads((out / "report.json").read_text())
        lines = (out / "report.csv").read_text().strip().split("\n")
        header, *rows = lines
        assert header == "row,target,clean,adversarial,normalized"
        seen = 0
        for line in rows:
            row_id, target_id, clean, adv, norm = line.split(",")
            cell = payload["cells"][row_id][target_id]
            assert float(clean) == cell["clean"]
            assert float(adv) == cell["adversarial"]
            assert float(norm) == cell["normalized"]
            seen += 1
        assert seen == len(report.rows) * len(report.targets)


class TestDeterminism:
    def test_bit_identical_artifacts(self, tmp_path):
        cfg = micro_config(rows=(RowSpec("r", "vit", AttackConfig(
            iterations=2, objective=ObjectiveKind("nrd"), seed=3)),))
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        run_transfer_matrix(cfg, out_dir=out_a)
        run_transfer_matrix(cfg, out_dir=out_b)
        for rel in ("report.json", "report.csv", "perturbations/r.tnsr"):
            assert (out_a / rel).read_bytes() == (out_b / rel).read_bytes(), rel


class TestConfigParsing:
    def test_from_json_roundtrip(self):
        obj = {
            "train_dataset": {"num_classes": 6, "num_novel": 2, "samples_per_class": 4,
                              "image_size": 16, "seed": 1},
            "test_dataset": {"num_classes": 6, "num_novel": 2, "samples_per_class": 2,
                             "image_size": 16, "seed": 2},
            "pretrain": {"epochs": 1, "batch_size": 4},
            "targets": [{"id": "t", "backbone": "vit", "kind": "linear_cls"}],
            "rows": [{"id": "r", "surrogate": "vit",
                      "attack": {"iterations": 1, "objective": {"kind": "prm"}}}],
            "vit": {"config": {"image_size": 16, "patch_size": 8, "embed_dim": 16,
                               "num_blocks": 2, "num_heads": 2}},
        }
        cfg = TransferConfig.from_json(obj)
        assert cfg.rows[0].attack.iterations == 1
        assert cfg.targets[0].kind == "linear_cls"

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="unknown keys"):
            TransferConfig.from_json({
                "train_dataset": {}, "test_dataset": {}, "targets": [], "rows": [],
                "bogus": 1,
            })

    def test_neg_task_row_requires_task_head(self, tmp_path):
        attack = AttackConfig(iterations=1, objective=ObjectiveKind("neg_task"), seed=0)
        cfg = micro_config(rows=(RowSpec("bad", "vit", attack),))
        with pytest.raises(ConfigError, match="task_head"):
            run_transfer_matrix(cfg, out_dir=tmp_path / "x")

    def test_neg_task_white_box_row_runs(self, tmp_path):
        attack = AttackConfig(iterations=2, objective=ObjectiveKind("neg_task"), seed=0)
        cfg = micro_config(rows=(RowSpec("wb", "vit", attack, task_head="vit_cls"),))
        report = run_transfer_matrix(cfg, out_dir=tmp_path / "wb")
        assert "wb" in report.rows
