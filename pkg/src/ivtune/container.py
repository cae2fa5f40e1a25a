"""IVTN named-tensor container.

Layout, all integers little-endian::

    b"IVTN"                     magic
    u32 version                 currently 1
    u32 entry count
    per entry:
        u32 name length, UTF-8 name bytes
        u8  dtype code          0 = float32, 1 = float64
        u32 rank
        u64 dim * rank
        raw little-endian values, row-major
"""

import struct
from pathlib import Path

import numpy as np

MAGIC = b"IVTN"
VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


class FormatError(ValueError):
    """Raised for malformed or unsupported container files."""


def encode(tensors):
    """Serialise ``{name: array}`` (insertion order kept) to bytes."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    seen = set()
    for name, arr in tensors.items():
        if not name:
            raise ValueError("tensor names must be non-empty")
        if name in seen:
            raise ValueError(f"duplicate tensor name {name!r}")
        seen.add(name)
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in DTYPE_CODES:
            raise ValueError(f"{name}: unsupported dtype {arr.dtype}; only float32/float64")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BI", DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf):
    """Parse bytes produced by :func:`encode` into ``{name: array}``."""
    r = _Reader(memoryview(buf))
    if bytes(r.take(4, "magic")) != MAGIC:
        raise FormatError("bad magic; not an IVTN container")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    out = {}
    for i in range(count):
        (name_len,) = r.unpack("<I", f"entry {i} name length")
        try:
            name = bytes(r.take(name_len, f"entry {i} name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"entry {i}: name is not UTF-8") from exc
        if not name or name in out:
            raise FormatError(f"entry {i}: empty or duplicate name {name!r}")
        code, rank = r.unpack("<BI", f"{name} dtype/rank")
        if code not in CODE_DTYPES:
            raise FormatError(f"{name}: unknown dtype code {code}")
        dims = r.unpack(f"<{rank}Q", f"{name} dims")
        dt = CODE_DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        raw = r.take(nbytes, f"{name} values")
        out[name] = np.frombuffer(raw, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes after last entry")
    return out


def save_container(path, tensors):
    Path(path).write_bytes(encode(tensors))


def load_container(path):
    return decode(Path(path).read_bytes())
