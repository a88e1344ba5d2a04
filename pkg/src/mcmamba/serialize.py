"""Binary weight container.

Layout (all integers little-endian)::

    b"MCMB"  u32 version
    repeated until EOF:
        u32 name_len, name (UTF-8), u8 dtype tag (0 = f64, 1 = f32),
        u32 rank, rank * u32 dims, raw little-endian values
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = ["MAGIC", "VERSION", "save_weights", "load_weights", "dumps", "loads"]

MAGIC = b"MCMB"
VERSION = 1
_TAGS = {np.dtype("float64"): 0, np.dtype("float32"): 1}
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


def dumps(weights: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION)]
    for name, value in weights.items():
        arr = np.asarray(value)
        if arr.dtype not in _TAGS:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<BI", _TAGS[arr.dtype], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[_TAGS[arr.dtype]]).tobytes())
    return b"".join(out)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise ValueError("not a weight container (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise ValueError(f"unsupported weight container version {version}")
    pos = 8
    weights: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            name = blob[pos + 4 : pos + 4 + n].decode("utf-8")
            pos += 4 + n
            tag, rank = struct.unpack_from("<BI", blob, pos)
            pos += 5
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            dtype = _DTYPES[tag]
            count = int(np.prod(dims)) if rank else 1
            end = pos + count * dtype.itemsize
            if end > len(blob):
                raise ValueError(f"record {name!r} runs past end of data")
            weights[name] = np.frombuffer(blob[pos:end], dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
            pos = end
    except (struct.error, KeyError) as exc:
        raise ValueError(f"corrupt weight container at byte {pos}: {exc}") from exc
    return weights


def save_weights(path: str | Path, weights: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(weights))


def load_weights(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
