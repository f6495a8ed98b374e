"""
Little-endian named-array container shared by corpus and checkpoint files.

Layout::

    magic      4 bytes
    version    u32
    count      u32
    count x entry:
        name_len  u32
        name      utf-8 bytes
        dtype     u8   (0 = f8, 1 = i8, 2 = u1)
        rank      u32
        extents   rank x u64
        payload   prod(extents) items, little-endian
"""

from __future__ import annotations

import json
import struct

import numpy as np

DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8"), 2: np.dtype("u1")}
CODES = {"f": 0, "i": 1, "u": 2, "b": 2}


class FormatError(ValueError):
    pass


def _code(arr):
    kind = arr.dtype.kind
    if kind not in CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    return CODES[kind]


def dumps(magic: bytes, version: int, arrays: dict) -> bytes:
    out = [magic, struct.pack("<II", version, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _code(arr)
        arr = np.asarray(arr, dtype=DTYPES[code])  # tobytes() writes C order
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BI", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def loads(buf: bytes, magic: bytes):
    """Returns ``(version, {name: array})``."""
    if buf[:4] != magic:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {magic!r}")
    pos = 4
    version, count = struct.unpack_from("<II", buf, pos)
    pos += 8
    arrays = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            code, rank = struct.unpack_from("<BI", buf, pos)
            pos += 5
            shape = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            dt = DTYPES[code]
            size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + size > len(buf):
                raise FormatError(f"truncated payload for {name!r}")
            arrays[name] = np.frombuffer(buf, dtype=dt, count=size // dt.itemsize,
                                         offset=pos).reshape(shape).copy()
            pos += size
    except (struct.error, KeyError) as exc:
        raise FormatError(f"corrupt container: {exc}") from exc
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after the last entry")
    return version, arrays


def json_array(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def array_json(arr):
    return json.loads(bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8"))
