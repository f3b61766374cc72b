import math

import numpy as np
import pytest

from misalign.encoders import ViTConfig, init_encoder
from misalign.harness import (
    AdversarialBatch,
    DatasetSpec,
    classification_pretrain,
    contrastive_pretrain,
    evaluate,
    gen_dataset,
    init_label_table,
    make_zero_shot,
    miou,
    train_linear_head,
    train_seg_head,
    zero_shot_classify,
)
from misalign.harness.dataset import split_by_classes
from misalign.harness.heads import DownstreamModel
from misalign.harness.pretrain import cross_entropy_rows
from misalign.tensor import Tensor

from oracles import mean_cross_entropy_oracle, miou_oracle, zero_shot_oracle


@pytest.fixture(scope="module")
def tiny_enc():
    return init_encoder("vit", ViTConfig(image_size=16, patch_size=8, embed_dim=16,
                                         num_blocks=2, num_heads=2), seed=1)


@pytest.fixture(scope="module")
def tiny_data():
    spec = DatasetSpec(samples_per_class=6, image_size=16, seed=5)
    return spec, gen_dataset(spec)


class TestContrastivePretrain:
    def test_batch_of_one_rejected(self, tiny_enc, tiny_data):
        spec, data = tiny_data
        table = init_label_table(spec.num_classes, tiny_enc.feature_width, 0)
        with pytest.raises(ValueError, match="batch"):
            contrastive_pretrain(tiny_enc, table, data, epochs=1, lr=1e-3, batch_size=1, seed=0)

    def test_equidistant_pair_gives_ln2_per_direction(self):
        # two samples whose image embeddings sit equidistant from both label
        # embeddings produce uniform 2-way logits: per-direction loss ln 2
        from misalign.harness.pretrain import pairwise_cosine
        import misalign.tensor as T

        embs = Tensor(np.array([[1.0, 0.0], [1.0, 0.0]]))
        texts = Tensor(np.array([[1.0, 1.0], [1.0, 1.0]]))
        logits = T.scale(pairwise_cosine(embs, texts), 1.0 / 0.07)
        loss = cross_entropy_rows(logits, np.array([0, 1]))
        assert loss.item() == pytest.approx(math.log(2.0), abs=1e-9)

    def test_deterministic(self, tiny_enc, tiny_data):
        spec, data = tiny_data
        table = init_label_table(spec.num_classes, tiny_enc.feature_width, 0)
        a = contrastive_pretrain(tiny_enc, table, data, epochs=1, lr=1e-3, batch_size=4, seed=3)
        b = contrastive_pretrain(tiny_enc, table, data, epochs=1, lr=1e-3, batch_size=4, seed=3)
        assert a.loss_history == b.loss_history
        for k in a.encoder.params:
            assert a.encoder.params[k].tobytes() == b.encoder.params[k].tobytes()
        assert a.table.tobytes() == b.table.tobytes()

    def test_frozen_rows_do_not_move(self, tiny_enc, tiny_data):
        spec, data = tiny_data
        table = init_label_table(spec.num_classes, tiny_enc.feature_width, 0)
        res = contrastive_pretrain(tiny_enc, table, data, epochs=1, lr=1e-2, batch_size=4,
                                   seed=3, train_encoder=False, trainable_classes=(0, 1))
        moved = [i for i in range(spec.num_classes)
                 if res.table[i].tobytes() != table[i].tobytes()]
        assert set(moved) <= {0, 1}
        assert res.encoder.params["cls"].tobytes() == tiny_enc.params["cls"].tobytes()

    def test_table_width_mismatch_rejected(self, tiny_enc, tiny_data):
        spec, data = tiny_data
        with pytest.raises(ValueError, match="width"):
            contrastive_pretrain(tiny_enc, np.zeros((12, 8)), data, 1, 1e-3, 4, 0)


class TestClassificationPretrain:
    def test_deterministic_and_loss_decreases(self, tiny_enc, tiny_data):
        spec, data = tiny_data
        a = classification_pretrain(tiny_enc, data, epochs=3, lr=3e-3, batch_size=8, seed=4)
        b = classification_pretrain(tiny_enc, data, epochs=3, lr=3e-3, batch_size=8, seed=4)
        assert a.loss_history == b.loss_history
        assert a.table is None
        # strictly decreasing epoch losses over the first three epochs
        assert a.loss_history[0] > a.loss_history[1] > a.loss_history[2]


class TestHeads:
    def test_backbone_frozen_during_head_training(self, tiny_enc, tiny_data):
        spec, data = tiny_data
        before = {k: v.copy() for k, v in tiny_enc.params.items()}
        model = train_linear_head(tiny_enc, data, spec.base_classes, steps=20, seed=0)
        for k in before:
            assert model.backbone.params[k].tobytes() == before[k].tobytes()

    def test_seg_head_shapes_and_upsampling(self, tiny_enc, tiny_data):
        spec, data = tiny_data
        model = train_seg_head(tiny_enc, data, spec.base_classes, steps=10, seed=0)
        logits = model.logits(data[0].image)
        assert logits.shape == (4, 1 + len(spec.base_classes))  # 2x2 patch grid
        mask = model.predict(data[0].image)
        assert mask.shape == (16, 16)
        # nearest upsampling: every 8x8 block is constant
        for bi in range(2):
            for bj in range(2):
                block = mask[bi * 8 : (bi + 1) * 8, bj * 8 : (bj + 1) * 8]
                assert np.unique(block).size == 1

    def test_head_width_mismatch_rejected(self, tiny_enc):
        with pytest.raises(ValueError, match="width"):
            DownstreamModel(tiny_enc, "linear_cls", (0, 1), 16,
                            params={"w": np.zeros((7, 2)), "b": np.zeros(2)})

    def test_task_loss_label_out_of_range(self, tiny_enc, tiny_data):
        spec, data = tiny_data
        model = train_linear_head(tiny_enc, data, spec.base_classes, steps=5, seed=0)
        with pytest.raises(ValueError, match="label"):
            model.task_loss(Tensor(data[0].image), spec.novel_classes[0])


class TestZeroShot:
    def test_matching_table_row_wins(self, tiny_enc):
        table = np.eye(16)[:3]

        class FixedBackbone:
            kind = "vit"
            feature_width = 16
            config = tiny_enc.config
            tap_layers = tiny_enc.tap_layers
            params = tiny_enc.params

            def cls_embedding(self, img, params=None):
                return Tensor(table[1] * 2.0)

            def tap_width(self, layer):
                return 16

        model = DownstreamModel(FixedBackbone(), "zero_shot", (0, 1, 2), 16, label_table=table)
        img = np.zeros((3, 16, 16))
        assert model.predict(img) == 1

    def test_argmax_invariant_to_positive_scaling(self, tiny_enc, tiny_data):
        spec, data = tiny_data
        table = init_label_table(spec.num_classes, tiny_enc.feature_width, 3)
        model = make_zero_shot(tiny_enc, table, tuple(range(spec.num_classes)), input_size=16)
        preds = [zero_shot_classify(model, s.image) for s in data[:6]]
        scaled = make_zero_shot(tiny_enc, table * 37.5, tuple(range(spec.num_classes)), input_size=16)
        assert [zero_shot_classify(scaled, s.image) for s in data[:6]] == preds

    def test_matches_scalar_loop_oracle(self, tiny_enc, tiny_data):
        spec, data = tiny_data
        rng = np.random.default_rng(0)
        table = rng.standard_normal((5, tiny_enc.feature_width))
        model = make_zero_shot(tiny_enc, table, tuple(range(5)), input_size=16)
        for s in data[:10]:
            emb = tiny_enc.cls_embedding(s.image).data
            want = zero_shot_oracle(emb.tolist(), table.tolist())
            assert model.predict(s.image) == want

    def test_empty_table_rejected(self, tiny_enc):
        with pytest.raises(ValueError):
            make_zero_shot(tiny_enc, np.zeros((0, 16)), (), input_size=16)


class TestMiou:
    def test_identical_masks(self):
        rng = np.random.default_rng(1)
        m = rng.integers(0, 3, (8, 8))
        assert miou(m, m, [0, 1, 2]) == 1.0

    def test_hand_counted_value(self):
        pred = np.array([[0, 0], [1, 1]])
        true = np.array([[0, 1], [1, 1]])
        assert miou(pred, true, [0, 1]) == pytest.approx((1 / 2 + 2 / 3) / 2, abs=1e-12)

    def test_disjoint_masks(self):
        pred = np.zeros((4, 4), dtype=int)
        true = np.ones((4, 4), dtype=int)
        assert miou(pred, true, [0, 1]) == 0.0

    def test_absent_classes_excluded(self):
        pred = np.zeros((4, 4), dtype=int)
        true = np.zeros((4, 4), dtype=int)
        assert miou(pred, true, [0, 1, 2, 3]) == 1.0

    def test_symmetry_and_range(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            a = rng.integers(0, 4, (6, 6))
            b = rng.integers(0, 4, (6, 6))
            ab = miou(a, b, [0, 1, 2, 3])
            assert 0.0 <= ab <= 1.0
            assert ab == miou(b, a, [0, 1, 2, 3])

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            a = rng.integers(0, 5, (5, 5))
            b = rng.integers(0, 5, (5, 5))
            got = miou(a, b, list(range(5)))
            want = miou_oracle(a.tolist(), b.tolist(), list(range(5)))
            assert got == pytest.approx(want, abs=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            miou(np.zeros((2, 2)), np.zeros((3, 3)), [0])

    def test_stray_labels_rejected(self):
        with pytest.raises(ValueError, match="outside"):
            miou(np.full((2, 2), 9), np.zeros((2, 2)), [0])


class TestEvaluate:
    def test_zero_perturbations_reproduce_clean(self, tiny_enc, tiny_data):
        spec, data = tiny_data
        base = split_by_classes(data, spec.base_classes)
        model = train_linear_head(tiny_enc, base, spec.base_classes, steps=30, seed=0)
        zeros = AdversarialBatch(np.zeros((len(base), 3, 16, 16)), 0.0)
        rec = evaluate(model, base, zeros)
        assert rec.adversarial == rec.clean
        assert rec.normalized == 1.0

    def test_budget_violation_fails_closed(self, tiny_enc, tiny_data):
        spec, data = tiny_data
        base = split_by_classes(data, spec.base_classes)
        model = train_linear_head(tiny_enc, base, spec.base_classes, steps=5, seed=0)
        bad = AdversarialBatch(np.full((len(base), 3, 16, 16), 0.1), 0.05)
        with pytest.raises(ValueError, match="budget"):
            evaluate(model, base, bad)

    def test_pixel_range_violation_fails_closed(self, tiny_enc, tiny_data):
        spec, data = tiny_data
        base = split_by_classes(data, spec.base_classes)
        model = train_linear_head(tiny_enc, base, spec.base_classes, steps=5, seed=0)
        deltas = np.zeros((len(base), 3, 16, 16))
        # within budget, but pushes some pixel outside [0, 1]
        target = base[0].image[0, 0, 0]
        deltas[0, 0, 0, 0] = -(target + 0.01) if target < 0.5 else (1.0 - target) + 0.01
        with pytest.raises(ValueError, match="pixel range"):
            evaluate(model, base, AdversarialBatch(deltas, 1.0))

    def test_hand_built_two_sample_accuracy(self, tiny_enc, tiny_data):
        spec, data = tiny_data
        base = split_by_classes(data, spec.base_classes)
        model = train_linear_head(tiny_enc, base, spec.base_classes, steps=200, seed=0)
        two = base[:2]
        expected = np.mean([model.predict(s.image) == s.label for s in two])
        rec = evaluate(model, two)
        assert rec.clean == expected

    def test_base_novel_split_reported(self, tiny_enc, tiny_data):
        spec, data = tiny_data
        table = init_label_table(spec.num_classes, tiny_enc.feature_width, 3)
        model = make_zero_shot(tiny_enc, table, tuple(range(spec.num_classes)), input_size=16)
        rec = evaluate(model, data, base_classes=spec.base_classes)
        assert "base_clean" in rec.extra and "novel_clean" in rec.extra
