"""Image tensors, seeded random streams, PSNR and 8-bit PPM/PGM I/O.

Images are plain ``numpy`` arrays of shape ``(H, W, C)`` with ``C`` in {1, 3}
and nominal pixel range [0, 1].  Batches simply add leading axes, so almost
every numeric routine in the package accepts ``(..., H, W, C)``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

PSNR_CAP = 99.0

_MASK64 = (1 << 64) - 1


class ImageFormatError(ValueError):
    """Raised for malformed or truncated PPM/PGM payloads."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def as_image(data, *, copy: bool = False) -> np.ndarray:
    """Validate and return ``data`` as a float64 ``(H, W, C)`` image."""
    arr = np.array(data, dtype=np.float64, copy=copy) if copy else np.asarray(data, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"expected an (H, W, C) image with C in (1, 3), got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"image must be non-empty, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    return arr


# -- random streams -----------------------------------------------------------

def splitmix64(x: int) -> int:
    """The splitmix64 finalizer, used as the published 64-bit mix function."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _label_hash(label: Union[str, int]) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & _MASK64
    # FNV-1a; Python's builtin hash() is salted per process
    h = 0xCBF29CE484222325
    for byte in str(label).encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


def derive_seed(seed: int, label: Union[str, int]) -> int:
    return splitmix64((seed & _MASK64) ^ splitmix64(_label_hash(label)))


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream addressed by ``(seed, label path)``.

    Child streams are derived by hashing, never by drawing from the parent, so
    the samples a worker sees do not depend on scheduling order.
    """

    seed: int
    path: tuple = ()

    def child(self, label: Union[str, int]) -> "RngStream":
        return RngStream(self.seed, self.path + (label,))

    @property
    def key(self) -> int:
        k = self.seed & _MASK64
        for label in self.path:
            k = derive_seed(k, label)
        return k

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.key))


def gaussian_sample(shape: Sequence[int], stream: RngStream) -> np.ndarray:
    """I.i.d. standard normal array; identical for identical streams."""
    return stream.generator().standard_normal(tuple(shape))


# -- metrics ------------------------------------------------------------------

def psnr(a, b) -> float:
    """PSNR in dB for images in [0, 1]; both inputs are clamped first."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((np.clip(a, 0.0, 1.0) - np.clip(b, 0.0, 1.0)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * np.log10(mse))


@dataclass(frozen=True)
class MetricRecord:
    psnr: float
    bit_accuracy: float
    detected: bool

    def __post_init__(self):
        if not 0.0 <= self.bit_accuracy <= 1.0:
            raise ValueError(f"bit_accuracy out of range: {self.bit_accuracy}")
        if self.psnr < 0.0:
            raise ValueError(f"negative psnr: {self.psnr}")


# -- PPM / PGM ----------------------------------------------------------------

def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageFormatError("unexpected end of header", pos)
    return buf[start:pos], pos


def decode_pnm(buf: bytes) -> np.ndarray:
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}", 0)
    channels = 3 if magic == b"P6" else 1
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise ImageFormatError(f"bad header field {tok!r}", pos - len(tok))
        fields.append(int(tok))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ImageFormatError("non-positive image dimensions", pos)
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 is supported, got {maxval}", pos)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ImageFormatError("missing whitespace after header", pos)
    pos += 1
    need = width * height * channels
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise ImageFormatError(f"truncated payload: expected {need} bytes, got {len(payload)}", pos + len(payload))
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return arr.astype(np.float64) / 255.0


def encode_pnm(image) -> bytes:
    img = as_image(image)
    h, w, c = img.shape
    q = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    magic = b"P6" if c == 3 else b"P5"
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def read_image(path: Union[str, os.PathLike]) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pnm(fh.read())


def write_image(image, path: Union[str, os.PathLike]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pnm(image))


def luminance(image: np.ndarray) -> np.ndarray:
    """BT.601 luma of ``(..., H, W, C)``; single-channel inputs pass through."""
    if image.shape[-1] == 1:
        return image[..., 0]
    return image @ np.array([0.299, 0.587, 0.114])
