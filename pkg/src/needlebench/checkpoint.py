"""Single-file binary checkpoint: versioned header + named f64 table.

Layout (all little-endian):

    magic   4 bytes  b"NBCK"
    version u16      currently 1
    count   u32      number of entries
    entry * count:
        name_len u16, name utf-8
        ndim     u8,  dims u32 * ndim
        payload  f64 * prod(dims), C order
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"NBCK"
VERSION = 1


class CheckpointError(IOError):
    """File is not a valid checkpoint of a supported version."""


def save_params(path: str | Path, params: dict[str, np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<I", len(params)))
        for name, arr in params.items():
            # asarray keeps 0-d shapes; ascontiguousarray would promote them
            arr = np.asarray(arr, dtype="<f8", order="C")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.tobytes(order="C"))


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (count,) = struct.unpack_from("<I", blob, 6)
    off = 10
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{ndim}I", blob, off) if ndim else ()
        off += 4 * ndim
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).copy()
        off += 8 * n
        out[name] = arr.reshape(dims)
    if off != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after parameter table")
    return out
