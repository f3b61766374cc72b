import numpy as np
import pytest

from misalign import tensor as T
from misalign.encoders import (
    CnnConfig,
    ViTConfig,
    init_encoder,
    load_checkpoint,
    save_checkpoint,
)
from misalign.formats import FormatError
from misalign.tensor import Tensor


@pytest.fixture(scope="module")
def vit():
    return init_encoder("vit", ViTConfig(), seed=7)


@pytest.fixture(scope="module")
def cnn():
    return init_encoder("cnn", CnnConfig(), seed=7)


@pytest.fixture(scope="module")
def img32():
    return np.random.default_rng(0).random((3, 32, 32))


class TestInit:
    def test_same_seed_bit_identical(self):
        a = init_encoder("vit", ViTConfig(), seed=5)
        b = init_encoder("vit", ViTConfig(), seed=5)
        assert a.params.keys() == b.params.keys()
        for k in a.params:
            assert a.params[k].tobytes() == b.params[k].tobytes()

    def test_different_seed_differs(self):
        a = init_encoder("cnn", CnnConfig(), seed=5)
        b = init_encoder("cnn", CnnConfig(), seed=6)
        assert any(a.params[k].tobytes() != b.params[k].tobytes() for k in a.params)

    def test_default_vit_token_count(self, vit, img32):
        feats = vit.forward_with_taps(img32, vit.tap_layers)
        assert [f.tokens.shape for f in feats] == [(17, 64)] * 4

    def test_vit_param_count_matches_formula(self, vit):
        c = vit.config
        n, m, p = c.embed_dim, c.mlp_dim, c.grid * c.grid
        patch_in = 3 * c.patch_size**2
        per_block = 2 * 2 * n + 4 * (n * n + n) + n * m + m + m * n + n
        expected = (patch_in * n + n) + n + (1 + p) * n + c.num_blocks * per_block
        assert vit.param_count() == expected

    def test_cnn_param_count_matches_formula(self, cnn):
        c = cnn.config
        expected = 9 * 3 * c.stem_channels + c.stem_channels
        prev = c.stem_channels
        for ch in c.stage_channels:
            expected += 4 * prev * ch + ch
            m = int(ch * c.mlp_ratio)
            expected += c.blocks_per_stage * (ch * 9 + ch + 2 * ch + ch * m + m + m * ch + ch)
            prev = ch
        assert cnn.param_count() == expected

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            init_encoder("vit", ViTConfig(image_size=30, patch_size=8), seed=0)
        with pytest.raises(ValueError):
            init_encoder("vit", ViTConfig(embed_dim=30, num_heads=4), seed=0)
        with pytest.raises(ValueError):
            init_encoder("cnn", CnnConfig(stage_channels=()), seed=0)


class TestForward:
    def test_purity(self, vit, img32):
        a = vit.forward_with_taps(img32, vit.tap_layers)
        b = vit.forward_with_taps(img32, vit.tap_layers)
        for fa, fb in zip(a, b):
            assert fa.tokens.data.tobytes() == fb.tokens.data.tobytes()

    def test_vit_token_invariant_other_sizes(self, vit):
        for size in (8, 24, 40):
            img = np.random.default_rng(1).random((3, size, size))
            feats = vit.forward_with_taps(img, [2])
            expected = 1 + (size * size) // (8 * 8)
            assert feats[0].tokens.shape == (expected, 64)

    def test_vit_incompatible_size_rejected(self, vit):
        with pytest.raises(T.ShapeError):
            vit.forward_with_taps(np.random.random((3, 30, 30)), [1])

    def test_empty_taps_rejected(self, vit, img32):
        with pytest.raises(ValueError, match="empty"):
            vit.forward_with_taps(img32, [])

    def test_unknown_tap_rejected(self, vit, img32):
        with pytest.raises(ValueError, match="unknown tap"):
            vit.forward_with_taps(img32, [9])

    def test_cnn_tap_shapes(self, cnn, img32):
        feats = cnn.forward_with_taps(img32, cnn.tap_layers)
        assert [f.tokens.shape for f in feats] == [
            (256, 16), (256, 16), (64, 32), (64, 32), (16, 64), (16, 64),
        ]

    def test_cnn_ceil_division_on_odd_sizes(self, cnn):
        img = np.random.default_rng(2).random((3, 25, 25))
        feats = cnn.forward_with_taps(img, [1, 6])
        assert feats[0].tokens.shape == (13 * 13, 16)
        assert feats[1].tokens.shape == (4 * 4, 64)

    def test_all_features_finite(self, vit, cnn, img32):
        for enc in (vit, cnn):
            for f in enc.forward_with_taps(img32, enc.tap_layers):
                assert np.all(np.isfinite(f.tokens.data))

    def test_gradient_through_taps(self):
        enc = init_encoder("vit", ViTConfig(image_size=8, patch_size=4, embed_dim=8,
                                            num_blocks=2, num_heads=2), seed=3)
        x = np.random.default_rng(4).random((3, 8, 8))

        def f(t):
            feats = enc.forward_with_taps(t, enc.tap_layers)
            return T.tsum(T.concat([f.tokens for f in feats], axis=0))

        assert T.finite_difference_check(f, x) <= 1e-6


class TestClsEmbedding:
    def test_equals_token_zero_of_last_tap(self, vit, img32):
        emb = vit.cls_embedding(img32)
        last = vit.forward_with_taps(img32, [vit.tap_layers[-1]])[0]
        assert np.array_equal(emb.data, last.tokens.data[0])

    def test_cnn_embedding_is_token_mean(self, cnn, img32):
        emb = cnn.cls_embedding(img32)
        last = cnn.forward_with_taps(img32, [cnn.tap_layers[-1]])[0]
        assert np.allclose(emb.data, last.tokens.data.mean(axis=0), atol=1e-12)

    def test_deterministic(self, vit, img32):
        a = vit.cls_embedding(img32)
        b = vit.cls_embedding(img32)
        assert a.data.tobytes() == b.data.tobytes()


class TestCheckpoint:
    def test_roundtrip_bytes_identical(self, vit):
        buf = save_checkpoint(vit)
        again = save_checkpoint(load_checkpoint(buf))
        assert buf == again

    def test_roundtrip_preserves_forward(self, cnn, img32):
        loaded = load_checkpoint(save_checkpoint(cnn))
        a = cnn.cls_embedding(img32).data
        b = loaded.cls_embedding(img32).data
        assert a.tobytes() == b.tobytes()

    def test_truncated_rejected(self, vit):
        buf = save_checkpoint(vit)
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(buf[: len(buf) // 2])

    def test_bad_magic_rejected(self, vit):
        buf = save_checkpoint(vit)
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(b"XXXX" + buf[4:])

    def test_bad_version_rejected(self, vit):
        buf = bytearray(save_checkpoint(vit))
        buf[4:8] = (99).to_bytes(4, "little")
        with pytest.raises(FormatError, match="version"):
            load_checkpoint(bytes(buf))
