"""On-disk model artifacts.

Encoder checkpoints use the ENCK container from `encoders`. Downstream
heads get their own self-contained container so `evaluate` runs from a
single file:

    magic "HEAD" | version u32 = 1 | meta-JSON (u32 length + bytes) |
    named tensors (u32 count, then u32 name length, name, TNSR blob) |
    embedded backbone checkpoint (u64 length + ENCK bytes)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .encoders import Encoder, load_checkpoint, save_checkpoint
from .formats import FormatError, _Reader, _read_tnsr, tnsr_to_bytes
from .harness.heads import DownstreamModel

HEAD_MAGIC = b"HEAD"
HEAD_VERSION = 1

__all__ = [
    "save_encoder_file",
    "load_encoder_file",
    "head_to_bytes",
    "head_from_bytes",
    "save_head_file",
    "load_head_file",
]


def save_encoder_file(enc: Encoder, path) -> None:
    Path(path).write_bytes(save_checkpoint(enc))


def load_encoder_file(path) -> Encoder:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing encoder checkpoint: {p}")
    return load_checkpoint(p.read_bytes())


def head_to_bytes(model: DownstreamModel) -> bytes:
    meta = {
        "head_kind": model.head_kind,
        "class_ids": list(model.class_ids),
        "input_size": model.input_size,
        "tap_layer": model.tap_layer,
    }
    meta_b = json.dumps(meta, sort_keys=True).encode("utf-8")
    tensors = dict(model.params)
    if model.label_table is not None:
        tensors["label_table"] = model.label_table
    out = [HEAD_MAGIC, struct.pack("<I", HEAD_VERSION), struct.pack("<I", len(meta_b)), meta_b]
    out.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(tnsr_to_bytes(tensors[name]))
    enc_blob = save_checkpoint(model.backbone)
    out.append(struct.pack("<Q", len(enc_blob)))
    out.append(enc_blob)
    return b"".join(out)


def head_from_bytes(buf: bytes) -> DownstreamModel:
    reader = _Reader(buf, "head file")
    if reader.take(4) != HEAD_MAGIC:
        raise FormatError("bad head-file magic")
    (version,) = struct.unpack("<I", reader.take(4))
    if version != HEAD_VERSION:
        raise FormatError(f"unsupported head-file version {version}")
    (meta_len,) = struct.unpack("<I", reader.take(4))
    meta = json.loads(reader.take(meta_len).decode("utf-8"))
    (count,) = struct.unpack("<I", reader.take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", reader.take(4))
        name = reader.take(name_len).decode("utf-8")
        arr, _ = _read_tnsr(reader)
        tensors[name] = arr
    (enc_len,) = struct.unpack("<Q", reader.take(8))
    backbone = load_checkpoint(reader.take(enc_len))
    if not reader.done():
        raise FormatError("head file has trailing bytes")
    table = tensors.pop("label_table", None)
    return DownstreamModel(
        backbone,
        meta["head_kind"],
        tuple(meta["class_ids"]),
        int(meta["input_size"]),
        params=tensors,
        tap_layer=meta.get("tap_layer"),
        label_table=table,
    )


def save_head_file(model: DownstreamModel, path) -> None:
    Path(path).write_bytes(head_to_bytes(model))


def load_head_file(path) -> DownstreamModel:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing head file: {p}")
    return head_from_bytes(p.read_bytes())
