"""Binary parameter-store format.

Layout (all integers little-endian)::

    magic       8 bytes   b"WKTSPS01"
    count       uint32    number of records
    record * count:
        name_len    uint16
        name        name_len bytes, UTF-8
        ndim        uint8
        dims        uint32 * ndim
        values      float64 little-endian * prod(dims), row-major
"""

import struct
from pathlib import Path

import numpy as np

from .errors import ParseError

MAGIC = b"WKTSPS01"


def dump_bytes(records) -> bytes:
    """Serialise an iterable of ``(name, array)`` pairs."""
    records = list(records)
    parts = [MAGIC, struct.pack("<I", len(records))]
    for name, arr in records:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def load_bytes(buf: bytes) -> list:
    if buf[:8] != MAGIC:
        raise ParseError("not a weakts parameter store (bad magic)")
    (count,) = struct.unpack_from("<I", buf, 8)
    pos = 12
    out = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        dims = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = int(np.prod(dims, dtype=np.int64))
        values = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).astype(np.float64)
        pos += 8 * size
        out.append((name, values.reshape(dims)))
    if pos != len(buf):
        raise ParseError(f"trailing bytes after {count} records")
    return out


def save(path, records):
    Path(path).write_bytes(dump_bytes(records))


def load(path) -> list:
    return load_bytes(Path(path).read_bytes())
