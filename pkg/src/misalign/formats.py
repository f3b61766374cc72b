"""Binary file formats: TNSR tensors and P6 PPM images.

TNSR v1 layout (little-endian throughout):
    magic "TNSR" | version u32 = 1 | dtype u8 (0 = float64) | ndim u32 |
    dims u64 each | payload, row-major float64

PPM is binary P6 with maxval 255; floats in [0,1] are written with
round-half-up and read back as byte/255.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

TNSR_MAGIC = b"TNSR"
TNSR_VERSION = 1

__all__ = [
    "FormatError",
    "tnsr_to_bytes",
    "tnsr_from_bytes",
    "tnsr_write",
    "tnsr_read",
    "ppm_to_bytes",
    "ppm_from_bytes",
    "ppm_write",
    "ppm_read",
]


class FormatError(ValueError):
    """Malformed or truncated binary artifact."""


def tnsr_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim:  # ascontiguousarray would promote 0-d to 1-d
        arr = np.ascontiguousarray(arr)
    head = TNSR_MAGIC + struct.pack("<IBI", TNSR_VERSION, 0, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    payload = arr.astype("<f8", copy=False).tobytes(order="C")
    return head + dims + payload


class _Reader:
    """Cursor over a byte buffer that fails closed on truncation."""

    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {self.what}: needed {n} bytes at offset {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def done(self) -> bool:
        return self.pos == len(self.buf)


def tnsr_from_bytes(buf: bytes) -> np.ndarray:
    arr, reader = _read_tnsr(_Reader(buf, "TNSR file"))
    if not reader.done():
        raise FormatError(f"TNSR file has {len(buf) - reader.pos} trailing bytes")
    return arr


def _read_tnsr(reader: _Reader) -> tuple[np.ndarray, _Reader]:
    magic = reader.take(4)
    if magic != TNSR_MAGIC:
        raise FormatError(f"bad TNSR magic {magic!r}")
    version, dtype, ndim = struct.unpack("<IBI", reader.take(9))
    if version != TNSR_VERSION:
        raise FormatError(f"unsupported TNSR version {version}")
    if dtype != 0:
        raise FormatError(f"unsupported TNSR dtype code {dtype}")
    shape = struct.unpack(f"<{ndim}Q", reader.take(8 * ndim)) if ndim else ()
    count = 1
    for d in shape:
        count *= d
    payload = reader.take(8 * count)
    arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    return arr, reader


def tnsr_write(arr: np.ndarray, path) -> None:
    Path(path).write_bytes(tnsr_to_bytes(arr))


def tnsr_read(path) -> np.ndarray:
    return tnsr_from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------
# PPM (binary P6)
# --------------------------------------------------------------------------

def ppm_to_bytes(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise FormatError(f"PPM needs a 3 x H x W image, got shape {img.shape}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise FormatError("PPM image values must lie in [0, 1]")
    _, h, w = img.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    quant = np.floor(img * 255.0 + 0.5).astype(np.uint8)
    return header + quant.transpose(1, 2, 0).tobytes(order="C")


def ppm_from_bytes(buf: bytes) -> np.ndarray:
    if not buf.startswith(b"P6"):
        raise FormatError("not a binary P6 PPM file")
    # header = magic, width, height, maxval as whitespace-separated tokens
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header")
        fields.append(buf[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as e:
        raise FormatError(f"bad PPM header fields {fields!r}") from e
    if maxval != 255:
        raise FormatError(f"unsupported PPM maxval {maxval}")
    need = w * h * 3
    payload = buf[pos : pos + need]
    if len(payload) != need:
        raise FormatError(f"truncated PPM payload: expected {need} bytes, got {len(payload)}")
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return raw.transpose(2, 0, 1).astype(np.float64) / 255.0


def ppm_write(img: np.ndarray, path) -> None:
    Path(path).write_bytes(ppm_to_bytes(img))


def ppm_read(path) -> np.ndarray:
    return ppm_from_bytes(Path(path).read_bytes())
