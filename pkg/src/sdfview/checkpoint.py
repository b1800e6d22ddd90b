"""Single-file binary checkpoints.

Layout: magic "GNVS", u32 version, then length-prefixed named blobs in a
fixed (sorted) order. Each blob is [u32 name_len][name][u8 kind][payload]
with kind 0 = raw bytes (JSON metadata) and kind 1 = ndarray
([u8 dtype_len][dtype str][u8 ndim][u64 dims...][C-order little-endian
data]). Writing is deterministic, so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ValidationError

MAGIC = b"GNVS"
VERSION = 1

_KIND_BYTES = 0
_KIND_ARRAY = 1


def _write_blob(fh, name: str, payload):
    nb = name.encode()
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    if isinstance(payload, np.ndarray):
        arr = np.ascontiguousarray(payload)
        dt = arr.dtype.newbyteorder("<")
        arr = arr.astype(dt, copy=False)
        ds = dt.str.encode()
        fh.write(struct.pack("<B", _KIND_ARRAY))
        fh.write(struct.pack("<B", len(ds)))
        fh.write(ds)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        raw = arr.tobytes()
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
    else:
        fh.write(struct.pack("<B", _KIND_BYTES))
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)


def save_checkpoint(path, meta: dict, arrays: dict[str, np.ndarray]):
    """Write metadata (JSON-serializable) plus named arrays, sorted order."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        _write_blob(fh, "meta", json.dumps(meta, sort_keys=True).encode())
        for name in sorted(arrays):
            _write_blob(fh, name, arrays[name])


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValidationError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValidationError(f"{path}: unsupported checkpoint version {version}")
        meta = None
        arrays = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            (nlen,) = struct.unpack("<I", head)
            name = fh.read(nlen).decode()
            (kind,) = struct.unpack("<B", fh.read(1))
            if kind == _KIND_BYTES:
                (size,) = struct.unpack("<Q", fh.read(8))
                payload = fh.read(size)
                if name == "meta":
                    meta = json.loads(payload.decode())
                else:
                    arrays[name] = payload
            elif kind == _KIND_ARRAY:
                (dlen,) = struct.unpack("<B", fh.read(1))
                dtype = np.dtype(fh.read(dlen).decode())
                (ndim,) = struct.unpack("<B", fh.read(1))
                shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
                (size,) = struct.unpack("<Q", fh.read(8))
                arrays[name] = np.frombuffer(fh.read(size), dtype=dtype).reshape(shape).copy()
            else:
                raise ValidationError(f"{path}: unknown blob kind {kind}")
    if meta is None:
        raise ValidationError(f"{path}: checkpoint missing metadata blob")
    return meta, arrays
