"""PNG helpers and the raw float-map binary format.

Raw maps are flat little-endian binaries with a small header:
magic "GMAP", u32 version, u8 dtype code (1 = float64), u8 ndim,
then ndim x u32 dimensions, then the C-order payload.
"""

from __future__ import annotations

import struct

import numpy as np
from PIL import Image

from .errors import ValidationError

_MAGIC = b"GMAP"
_VERSION = 1
_DTYPES = {1: np.dtype("<f8")}


def save_png_rgb(path, img: np.ndarray):
    """Float [0,1] (H,W,3) -> 8-bit PNG."""
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="RGB").save(path)


def load_png_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_png_gray(path, img: np.ndarray, normalize: bool = False):
    arr = np.asarray(img, dtype=np.float64)
    if normalize:
        lo, hi = float(arr.min()), float(arr.max())
        arr = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
    arr = np.clip(arr, 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="L").save(path)


def load_png_gray(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return arr / 255.0


def write_rawmap(path, arr: np.ndarray):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<BB", 1, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def read_rawmap(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValidationError(f"{path}: bad raw-map magic")
        (version,) = struct.unpack("<I", f.read(4))
        if version != _VERSION:
            raise ValidationError(f"{path}: unsupported raw-map version {version}")
        code, ndim = struct.unpack("<BB", f.read(2))
        if code not in _DTYPES:
            raise ValidationError(f"{path}: unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
        data = np.frombuffer(f.read(), dtype=_DTYPES[code])
    if data.size != int(np.prod(shape)):
        raise ValidationError(f"{path}: payload size does not match header shape")
    return data.reshape(shape).copy()
