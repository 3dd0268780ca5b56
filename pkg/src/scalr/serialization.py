"""Binary weight snapshots.

Layout (all little-endian)::

    b"SCLR"  u16 version  u16 len  kind (utf-8)
    u32 n_meta    { u16 len  key (utf-8)  i64 value } * n_meta
    u32 n_arrays  { u16 len  name (utf-8)  u8 ndim  u64 dim * ndim  f64 data } * n_arrays

Arrays are stored flat in C order, so a write/read cycle is bit-exact.
"""
import io
import struct

import numpy as np

from .errors import ParseError

MAGIC = b"SCLR"
VERSION = 1


def _write_str(buf, s):
    raw = s.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def dumps(kind, meta, arrays):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    _write_str(buf, kind)
    buf.write(struct.pack("<I", len(meta)))
    for key, value in meta.items():
        _write_str(buf, key)
        buf.write(struct.pack("<q", int(value)))
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.require(np.asarray(arr, dtype="<f8"), requirements="C")
        _write_str(buf, name)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ParseError(f"truncated snapshot at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def string(self):
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def loads(data):
    """Inverse of :func:`dumps`; returns ``(kind, meta, arrays)``."""
    r = _Reader(bytes(data))
    if r.take(4) != MAGIC:
        raise ParseError("not a snapshot file (bad magic)")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise ParseError(f"unsupported snapshot version {version}")
    kind = r.string()
    meta = {}
    (n_meta,) = r.unpack("<I")
    for _ in range(n_meta):
        key = r.string()
        (meta[key],) = r.unpack("<q")
    arrays = {}
    (n_arrays,) = r.unpack("<I")
    for _ in range(n_arrays):
        name = r.string()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        raw = r.take(8 * count)
        arrays[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(r.data):
        raise ParseError(f"{len(r.data) - r.pos} trailing bytes after snapshot")
    return kind, meta, arrays


def save(path, kind, meta, arrays):
    with open(path, "wb") as fh:
        fh.write(dumps(kind, meta, arrays))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
