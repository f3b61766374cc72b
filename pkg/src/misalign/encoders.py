"""Toy surrogate vision encoders with per-layer feature taps.

Two architectures are provided:

  * ViTEncoder -- patch embedding + learned positional embeddings + a stack
    of pre-norm residual attention blocks. Each block output (the full token
    matrix, CLS first) is an attackable tap. Positional embeddings are
    bilinearly resized when the input grid differs from the configured one,
    so the same encoder accepts rescaled inputs.
  * CnnEncoder -- a 3x3 stem followed by stages of residual blocks
    (depthwise 3x3 conv + pointwise MLP). Each block output is a tap whose
    spatial positions are treated as tokens. The stem and the stride-2
    downsampling layers are not attackable.

Parameters are drawn uniformly in +-1/sqrt(fan_in) from a seeded generator
(layernorm affines start at identity); encoders are immutable after
construction and forward passes are pure functions of (parameters, input).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .formats import FormatError, _Reader, tnsr_to_bytes, _read_tnsr
from .tensor import Tensor

ENCK_MAGIC = b"ENCK"
ENCK_VERSION = 1
IMAGE_CHANNELS = 3

__all__ = [
    "ViTConfig",
    "CnnConfig",
    "LayerFeatures",
    "Encoder",
    "ViTEncoder",
    "CnnEncoder",
    "init_encoder",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    num_blocks: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0

    def validate(self) -> None:
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ValueError(f"invalid sizes in {self}")
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.num_blocks < 1 or self.num_heads < 1:
            raise ValueError(f"invalid block/head counts in {self}")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if int(self.embed_dim * self.mlp_ratio) < 1:
            raise ValueError(f"mlp_ratio {self.mlp_ratio} too small")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def mlp_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


@dataclass(frozen=True)
class CnnConfig:
    stem_channels: int = 16
    stage_channels: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 2
    mlp_ratio: float = 2.0

    def validate(self) -> None:
        if self.stem_channels < 1:
            raise ValueError(f"invalid stem_channels in {self}")
        if len(self.stage_channels) < 1 or any(c < 1 for c in self.stage_channels):
            raise ValueError(f"invalid stage_channels in {self}")
        if self.blocks_per_stage < 1:
            raise ValueError(f"invalid blocks_per_stage in {self}")


@dataclass
class LayerFeatures:
    """Per-layer token matrix: ViT taps hold 1 + P tokens (CLS first),
    CNN taps hold one token per spatial position."""

    layer_index: int
    tokens: Tensor  # (num_tokens, width)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _tile_rows(row: Tensor, n: int) -> Tensor:
    """Repeat a (1, K) row tensor into (n, K) -- differentiable tiling."""
    ones = Tensor(np.ones((n, 1)))
    return T.matmul(ones, row)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """(M, K) @ (K, N) + per-column bias."""
    return T.add_trailing(T.matmul(x, w), b)


def _pad_hw(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero-pad the trailing two axes of a (B, C, H, W) tensor."""
    b, c, h, w = x.shape
    if top or bottom:
        parts = []
        if top:
            parts.append(Tensor(np.zeros((b, c, top, w))))
        parts.append(x)
        if bottom:
            parts.append(Tensor(np.zeros((b, c, bottom, w))))
        x = T.concat(parts, axis=2)
        h = h + top + bottom
    if left or right:
        parts = []
        if left:
            parts.append(Tensor(np.zeros((b, c, h, left))))
        parts.append(x)
        if right:
            parts.append(Tensor(np.zeros((b, c, h, right))))
        x = T.concat(parts, axis=3)
    return x


def _neighborhood_stack(x: Tensor) -> Tensor:
    """Stack the 9 shifted 3x3-neighborhood views of (B, C, H, W) along the
    channel axis, offset-major: output (B, 9C, H, W)."""
    b, c, h, w = x.shape
    xp = _pad_hw(x, 1, 1, 1, 1)
    views = []
    for di in range(3):
        for dj in range(3):
            views.append(xp[:, :, di : di + h, dj : dj + w])
    return T.concat(views, axis=1)


def _pointwise(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """1x1 convolution over (B, C, H, W) via a channels-last matmul."""
    bs, c, h, wd = x.shape
    t = x.transpose((0, 2, 3, 1)).reshape(bs * h * wd, c)
    t = _linear(t, w, b)
    cout = w.shape[1]
    return t.reshape(bs, h, wd, cout).transpose((0, 3, 1, 2))


class Encoder:
    """Immutable encoder: config + named parameter arrays + tap layer ids."""

    kind = "base"

    def __init__(self, config, params: dict[str, np.ndarray], tap_layers: tuple[int, ...]):
        config.validate()
        self.config = config
        self.params = params
        self.tap_layers = tap_layers
        self._const_cache: dict[str, Tensor] = {}
        if not tap_layers:
            raise ValueError("encoder must expose at least one tap layer")
        expected = self._expected_shapes()
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ValueError(f"parameter names mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"parameter {name} has shape {params[name].shape}, expected {shape}")

    # -- subclass interface -------------------------------------------------
    def _expected_shapes(self) -> dict[str, tuple[int, ...]]:
        raise NotImplementedError

    def _forward(self, imgs: Tensor, params: dict[str, Tensor], taps: tuple[int, ...]):
        """Return (dict tap id -> (B, T_l, N_l) tokens, final (B, N) embedding)."""
        raise NotImplementedError

    def _validate_input_size(self, h: int, w: int) -> None:
        raise NotImplementedError

    @property
    def feature_width(self) -> int:
        raise NotImplementedError

    def tap_width(self, layer: int) -> int:
        """Embedding width of one tap's tokens."""
        raise NotImplementedError

    # -- shared API ----------------------------------------------------------
    def tensors(self, graph: T.ComputeGraph | None = None) -> dict[str, Tensor]:
        """Parameters as constants, or as leaves of `graph` for training."""
        if graph is None:
            return {k: Tensor(v) for k, v in self.params.items()}
        return {k: graph.leaf(v) for k, v in self.params.items()}

    def _check_taps(self, taps) -> tuple[int, ...]:
        taps = tuple(int(t) for t in taps)
        if not taps:
            raise ValueError("empty tap set")
        bad = [t for t in taps if t not in self.tap_layers]
        if bad:
            raise ValueError(f"unknown tap layers {bad}; available: {list(self.tap_layers)}")
        return tuple(sorted(set(taps)))

    def _as_batch(self, img) -> Tensor:
        img = img if isinstance(img, Tensor) else Tensor(img)
        if img.ndim != 3 or img.shape[0] != IMAGE_CHANNELS:
            raise T.ShapeError(f"expected a {IMAGE_CHANNELS} x H x W image, got shape {img.shape}")
        self._validate_input_size(img.shape[1], img.shape[2])
        return img.reshape(1, *img.shape)

    def forward_with_taps(self, img, taps, params: dict[str, Tensor] | None = None) -> list[LayerFeatures]:
        """Run one image through the encoder and return the requested taps
        in layer order. Differentiable w.r.t. the image."""
        taps = self._check_taps(taps)
        batch = self._as_batch(img)
        if params is None:
            params = self.tensors()
        tapped, _ = self._forward(batch, params, taps)
        out = []
        for layer in taps:
            toks = tapped[layer]
            out.append(LayerFeatures(layer, toks.reshape(toks.shape[1], toks.shape[2])))
        return out

    def cls_embedding(self, img, params: dict[str, Tensor] | None = None) -> Tensor:
        """Image-level embedding: the final CLS token (ViT) or the mean of
        the final tap's spatial descriptors (CNN)."""
        batch = self._as_batch(img)
        if params is None:
            params = self.tensors()
        _, emb = self._forward(batch, params, ())
        return emb.reshape(emb.shape[1])

    def embeddings_batch(self, imgs, params: dict[str, Tensor] | None = None) -> Tensor:
        """Batched image-level embeddings: (B, 3, H, W) -> (B, N)."""
        imgs = imgs if isinstance(imgs, Tensor) else Tensor(imgs)
        if imgs.ndim != 4 or imgs.shape[1] != IMAGE_CHANNELS:
            raise T.ShapeError(f"expected B x {IMAGE_CHANNELS} x H x W, got shape {imgs.shape}")
        self._validate_input_size(imgs.shape[2], imgs.shape[3])
        if params is None:
            params = self.tensors()
        _, emb = self._forward(imgs, params, ())
        return emb

    def tap_tokens_batch(self, imgs, taps, params: dict[str, Tensor] | None = None) -> dict[int, Tensor]:
        """Batched tap tokens: (B, 3, H, W) -> {layer: (B, T, N)}."""
        imgs = imgs if isinstance(imgs, Tensor) else Tensor(imgs)
        if imgs.ndim != 4 or imgs.shape[1] != IMAGE_CHANNELS:
            raise T.ShapeError(f"expected B x {IMAGE_CHANNELS} x H x W, got shape {imgs.shape}")
        self._validate_input_size(imgs.shape[2], imgs.shape[3])
        taps = self._check_taps(taps)
        if params is None:
            params = self.tensors()
        tapped, _ = self._forward(imgs, params, taps)
        return tapped

    def param_count(self) -> int:
        return sum(v.size for v in self.params.values())

    def with_params(self, params: dict[str, np.ndarray]) -> "Encoder":
        return type(self)(self.config, params, self.tap_layers)


class ViTEncoder(Encoder):
    kind = "vit"

    def _expected_shapes(self) -> dict[str, tuple[int, ...]]:
        c = self.config
        n, m = c.embed_dim, c.mlp_dim
        patch_in = IMAGE_CHANNELS * c.patch_size * c.patch_size
        shapes = {
            "patch_w": (patch_in, n),
            "patch_b": (n,),
            "cls": (1, n),
            "pos": (1 + c.grid * c.grid, n),
        }
        for i in range(1, c.num_blocks + 1):
            shapes[f"b{i}_ln1_g"] = (n,)
            shapes[f"b{i}_ln1_b"] = (n,)
            for nm in ("q", "k", "v", "o"):
                shapes[f"b{i}_w{nm}"] = (n, n)
                shapes[f"b{i}_b{nm}"] = (n,)
            shapes[f"b{i}_ln2_g"] = (n,)
            shapes[f"b{i}_ln2_b"] = (n,)
            shapes[f"b{i}_w1"] = (n, m)
            shapes[f"b{i}_b1"] = (m,)
            shapes[f"b{i}_w2"] = (m, n)
            shapes[f"b{i}_b2"] = (n,)
        return shapes

    def _validate_input_size(self, h: int, w: int) -> None:
        d = self.config.patch_size
        if h < d or w < d or h % d != 0 or w % d != 0:
            raise T.ShapeError(f"input {h}x{w} incompatible with patch size {d}")

    @property
    def feature_width(self) -> int:
        return self.config.embed_dim

    def tap_width(self, layer: int) -> int:
        return self.config.embed_dim

    def _fused_qkv(self, params: dict[str, Tensor], i: int) -> tuple[Tensor, Tensor]:
        """Concatenated q/k/v projection; cached when parameters are constants
        (the encoder is immutable, so the fused arrays never go stale)."""
        if params[f"b{i}_wq"].graph is None and params[f"b{i}_wq"].data is self.params[f"b{i}_wq"]:
            key = f"qkv{i}"
            hit = self._const_cache.get(key)
            if hit is None:
                w = Tensor(np.concatenate([self.params[f"b{i}_w{nm}"] for nm in "qkv"], axis=1))
                bias = Tensor(np.concatenate([self.params[f"b{i}_b{nm}"] for nm in "qkv"]))
                hit = (w, bias)
                self._const_cache[key] = hit
            return hit
        w = T.concat([params[f"b{i}_wq"], params[f"b{i}_wk"], params[f"b{i}_wv"]], axis=1)
        bias = T.concat([params[f"b{i}_bq"], params[f"b{i}_bk"], params[f"b{i}_bv"]], axis=0)
        return w, bias

    def _positional(self, params: dict[str, Tensor], gh: int, gw: int) -> Tensor:
        c = self.config
        pos = params["pos"]
        if (gh, gw) == (c.grid, c.grid):
            return pos
        # resize the patch-grid part; the CLS slot keeps its embedding
        n = c.embed_dim
        patch = pos[1:, :].reshape(c.grid, c.grid, n).transpose((2, 0, 1))
        patch = T.bilinear_resize(patch, gh, gw)
        patch = patch.transpose((1, 2, 0)).reshape(gh * gw, n)
        return T.concat([pos[0:1, :], patch], axis=0)

    def _forward(self, imgs: Tensor, params: dict[str, Tensor], taps: tuple[int, ...]):
        c = self.config
        b, _, h, w = imgs.shape
        d, n, nh = c.patch_size, c.embed_dim, c.num_heads
        dh = n // nh
        gh, gw = h // d, w // d
        p = gh * gw
        t = p + 1

        x = imgs.reshape(b, IMAGE_CHANNELS, gh, d, gw, d)
        x = x.transpose((0, 2, 4, 1, 3, 5)).reshape(b * p, IMAGE_CHANNELS * d * d)
        x = _linear(x, params["patch_w"], params["patch_b"]).reshape(b, p, n)

        cls_tok = _tile_rows(params["cls"], b).reshape(b, 1, n)
        toks = T.concat([cls_tok, x], axis=1)
        pos = self._positional(params, gh, gw)
        hdn = T.add_trailing(toks, pos)

        scale = 1.0 / math.sqrt(dh)
        tapped: dict[int, Tensor] = {}
        for i in range(1, c.num_blocks + 1):
            y = T.layernorm(hdn, params[f"b{i}_ln1_g"], params[f"b{i}_ln1_b"])
            y2 = y.reshape(b * t, n)
            wqkv, bqkv = self._fused_qkv(params, i)
            z = _linear(y2, wqkv, bqkv)
            # (B*T, 3N) -> three (B*nh, T, dh) head stacks in one movement
            zh = z.reshape(b, t, 3, nh, dh).transpose((2, 0, 3, 1, 4)).reshape(3 * b * nh, t, dh)
            q = zh[: b * nh]
            k = zh[b * nh : 2 * b * nh]
            v = zh[2 * b * nh :]
            scores = T.scale(T.matmul(q, k.transpose((0, 2, 1))), scale)
            attn = T.softmax(scores, axis=-1)
            ctx = T.matmul(attn, v)
            ctx = ctx.reshape(b, nh, t, dh).transpose((0, 2, 1, 3)).reshape(b * t, n)
            out = _linear(ctx, params[f"b{i}_wo"], params[f"b{i}_bo"])
            hdn = T.add(hdn, out.reshape(b, t, n))

            y = T.layernorm(hdn, params[f"b{i}_ln2_g"], params[f"b{i}_ln2_b"]).reshape(b * t, n)
            m = _linear(T.gelu(_linear(y, params[f"b{i}_w1"], params[f"b{i}_b1"])),
                        params[f"b{i}_w2"], params[f"b{i}_b2"])
            hdn = T.add(hdn, m.reshape(b, t, n))
            if i in taps:
                tapped[i] = hdn
        emb = hdn[:, 0, :]
        return tapped, emb


class CnnEncoder(Encoder):
    kind = "cnn"

    def _expected_shapes(self) -> dict[str, tuple[int, ...]]:
        c = self.config
        shapes = {
            "stem_w": (9 * IMAGE_CHANNELS, c.stem_channels),
            "stem_b": (c.stem_channels,),
        }
        prev = c.stem_channels
        for s, ch in enumerate(c.stage_channels, start=1):
            shapes[f"s{s}_ds_w"] = (4 * prev, ch)
            shapes[f"s{s}_ds_b"] = (ch,)
            m = int(ch * c.mlp_ratio)
            for j in range(1, c.blocks_per_stage + 1):
                shapes[f"s{s}b{j}_dw_w"] = (ch, 3, 3)
                shapes[f"s{s}b{j}_dw_b"] = (ch,)
                shapes[f"s{s}b{j}_ln_g"] = (ch,)
                shapes[f"s{s}b{j}_ln_b"] = (ch,)
                shapes[f"s{s}b{j}_w1"] = (ch, m)
                shapes[f"s{s}b{j}_b1"] = (m,)
                shapes[f"s{s}b{j}_w2"] = (m, ch)
                shapes[f"s{s}b{j}_b2"] = (ch,)
            prev = ch
        return shapes

    def _validate_input_size(self, h: int, w: int) -> None:
        if h < 1 or w < 1:
            raise T.ShapeError(f"input {h}x{w} too small")

    @property
    def feature_width(self) -> int:
        return self.config.stage_channels[-1]

    def tap_width(self, layer: int) -> int:
        stage = (layer - 1) // self.config.blocks_per_stage
        return self.config.stage_channels[stage]

    def _depthwise(self, x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
        b, c, h, wd = x.shape
        stack = _neighborhood_stack(x)  # (B, 9C, H, W)
        # kernel flattened offset-major to match the stack layout
        flat = w.transpose((1, 2, 0)).reshape(9 * c)
        prod = T.mul_channels(stack, flat)
        summed = prod.reshape(b, 9, c, h, wd).sum(axis=1)
        return T.add_channels(summed, bias)

    def _downsample(self, x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
        b, c, h, wd = x.shape
        x = _pad_hw(x, 0, h % 2, 0, wd % 2)
        h2, w2 = (h + 1) // 2, (wd + 1) // 2
        x = x.reshape(b, c, h2, 2, w2, 2).transpose((0, 1, 3, 5, 2, 4)).reshape(b, 4 * c, h2, w2)
        return _pointwise(x, w, bias)

    def _block(self, x: Tensor, params: dict[str, Tensor], pre: str) -> Tensor:
        b, c, h, w = x.shape
        y = self._depthwise(x, params[f"{pre}_dw_w"], params[f"{pre}_dw_b"])
        t = y.transpose((0, 2, 3, 1))
        t = T.layernorm(t, params[f"{pre}_ln_g"], params[f"{pre}_ln_b"])
        t2 = t.reshape(b * h * w, c)
        t2 = _linear(T.gelu(_linear(t2, params[f"{pre}_w1"], params[f"{pre}_b1"])),
                     params[f"{pre}_w2"], params[f"{pre}_b2"])
        y = t2.reshape(b, h, w, c).transpose((0, 3, 1, 2))
        return T.add(x, y)

    def _forward(self, imgs: Tensor, params: dict[str, Tensor], taps: tuple[int, ...]):
        c = self.config
        b = imgs.shape[0]
        x = _pointwise(_neighborhood_stack(imgs), params["stem_w"], params["stem_b"])
        tapped: dict[int, Tensor] = {}
        layer = 0
        for s in range(1, len(c.stage_channels) + 1):
            x = self._downsample(x, params[f"s{s}_ds_w"], params[f"s{s}_ds_b"])
            for j in range(1, c.blocks_per_stage + 1):
                x = self._block(x, params, f"s{s}b{j}")
                layer += 1
                if layer in taps:
                    _, ch, h, w = x.shape
                    tapped[layer] = x.transpose((0, 2, 3, 1)).reshape(b, h * w, ch)
        _, ch, h, w = x.shape
        emb = x.transpose((0, 2, 3, 1)).reshape(b, h * w, ch).mean(axis=1)
        return tapped, emb


def init_encoder(kind: str, config, seed: int) -> Encoder:
    """Build an encoder with parameters drawn from a seeded scheme:
    uniform +-1/sqrt(fan_in) per weight, layernorm affines at identity."""
    config.validate()
    rng = np.random.default_rng(np.random.PCG64(seed))
    if kind == "vit":
        c = config
        n, m = c.embed_dim, c.mlp_dim
        patch_in = IMAGE_CHANNELS * c.patch_size * c.patch_size
        params: dict[str, np.ndarray] = {
            "patch_w": _uniform(rng, (patch_in, n), patch_in),
            "patch_b": _uniform(rng, (n,), patch_in),
            "cls": _uniform(rng, (1, n), n),
            "pos": _uniform(rng, (1 + c.grid * c.grid, n), n),
        }
        for i in range(1, c.num_blocks + 1):
            params[f"b{i}_ln1_g"] = np.ones(n)
            params[f"b{i}_ln1_b"] = np.zeros(n)
            for nm in ("q", "k", "v", "o"):
                params[f"b{i}_w{nm}"] = _uniform(rng, (n, n), n)
                params[f"b{i}_b{nm}"] = _uniform(rng, (n,), n)
            params[f"b{i}_ln2_g"] = np.ones(n)
            params[f"b{i}_ln2_b"] = np.zeros(n)
            params[f"b{i}_w1"] = _uniform(rng, (n, m), n)
            params[f"b{i}_b1"] = _uniform(rng, (m,), n)
            params[f"b{i}_w2"] = _uniform(rng, (m, n), m)
            params[f"b{i}_b2"] = _uniform(rng, (n,), m)
        taps = tuple(range(1, c.num_blocks + 1))
        return ViTEncoder(config, params, taps)
    if kind == "cnn":
        c = config
        params = {
            "stem_w": _uniform(rng, (9 * IMAGE_CHANNELS, c.stem_channels), 9 * IMAGE_CHANNELS),
            "stem_b": _uniform(rng, (c.stem_channels,), 9 * IMAGE_CHANNELS),
        }
        prev = c.stem_channels
        for s, ch in enumerate(c.stage_channels, start=1):
            params[f"s{s}_ds_w"] = _uniform(rng, (4 * prev, ch), 4 * prev)
            params[f"s{s}_ds_b"] = _uniform(rng, (ch,), 4 * prev)
            m = int(ch * c.mlp_ratio)
            for j in range(1, c.blocks_per_stage + 1):
                params[f"s{s}b{j}_dw_w"] = _uniform(rng, (ch, 3, 3), 9)
                params[f"s{s}b{j}_dw_b"] = _uniform(rng, (ch,), 9)
                params[f"s{s}b{j}_ln_g"] = np.ones(ch)
                params[f"s{s}b{j}_ln_b"] = np.zeros(ch)
                params[f"s{s}b{j}_w1"] = _uniform(rng, (ch, m), ch)
                params[f"s{s}b{j}_b1"] = _uniform(rng, (m,), ch)
                params[f"s{s}b{j}_w2"] = _uniform(rng, (m, ch), m)
                params[f"s{s}b{j}_b2"] = _uniform(rng, (ch,), m)
            prev = ch
        taps = tuple(range(1, len(c.stage_channels) * c.blocks_per_stage + 1))
        return CnnEncoder(config, params, taps)
    raise ValueError(f"unknown encoder kind {kind!r}")


# --------------------------------------------------------------------------
# checkpoints: magic "ENCK", version, config JSON, named TNSR blobs
# --------------------------------------------------------------------------

def save_checkpoint(enc: Encoder) -> bytes:
    cfg = {"kind": enc.kind, "config": asdict(enc.config)}
    cfg_bytes = json.dumps(cfg, sort_keys=True).encode("utf-8")
    out = [ENCK_MAGIC, struct.pack("<I", ENCK_VERSION), struct.pack("<I", len(cfg_bytes)), cfg_bytes]
    names = sorted(enc.params)
    out.append(struct.pack("<I", len(names)))
    for name in names:
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(tnsr_to_bytes(enc.params[name]))
    return b"".join(out)


def load_checkpoint(buf: bytes) -> Encoder:
    reader = _Reader(buf, "encoder checkpoint")
    magic = reader.take(4)
    if magic != ENCK_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    (version,) = struct.unpack("<I", reader.take(4))
    if version != ENCK_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", reader.take(4))
    try:
        meta = json.loads(reader.take(cfg_len).decode("utf-8"))
        kind = meta["kind"]
        cfg_fields = meta["config"]
    except (ValueError, KeyError) as e:
        raise FormatError(f"bad checkpoint config block: {e}") from e
    if kind == "vit":
        config = ViTConfig(**cfg_fields)
    elif kind == "cnn":
        cfg_fields["stage_channels"] = tuple(cfg_fields["stage_channels"])
        config = CnnConfig(**cfg_fields)
    else:
        raise FormatError(f"unknown encoder kind {kind!r} in checkpoint")
    (count,) = struct.unpack("<I", reader.take(4))
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", reader.take(4))
        name = reader.take(name_len).decode("utf-8")
        arr, _ = _read_tnsr(reader)
        params[name] = arr
    if not reader.done():
        raise FormatError("checkpoint has trailing bytes")
    try:
        return init_like(kind, config, params)
    except ValueError as e:
        raise FormatError(str(e)) from e


def init_like(kind: str, config, params: dict[str, np.ndarray]) -> Encoder:
    """Assemble an encoder from explicit parameters (validated against config)."""
    if kind == "vit":
        taps = tuple(range(1, config.num_blocks + 1))
        return ViTEncoder(config, params, taps)
    if kind == "cnn":
        taps = tuple(range(1, len(config.stage_channels) * config.blocks_per_stage + 1))
        return CnnEncoder(config, params, taps)
    raise ValueError(f"unknown encoder kind {kind!r}")
