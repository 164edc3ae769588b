"""Little-endian binary helpers and atomic file writes."""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError


def write_atomic(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Reader:
    """Cursor over a byte buffer that reports offsets in its errors."""

    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def need(self, n: int):
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"{self.what}: truncated, expected at least {self.pos + n} bytes but file has {len(self.buf)}",
                len(self.buf),
            )

    def magic(self, expected: bytes):
        self.need(len(expected))
        got = self.buf[self.pos : self.pos + len(expected)]
        if got != expected:
            raise FormatError(f"{self.what}: bad magic {got!r}, expected {expected!r}", self.pos)
        self.pos += len(expected)

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        self.need(size)
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals if len(vals) > 1 else vals[0]

    def raw(self, n: int) -> bytes:
        self.need(n)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def array(self, shape, dtype="<f8") -> np.ndarray:
        dt = np.dtype(dtype)
        count = int(np.prod(shape))
        data = self.raw(count * dt.itemsize)
        return np.frombuffer(data, dtype=dt).reshape(shape).copy()

    def finish(self):
        if self.pos != len(self.buf):
            raise FormatError(
                f"{self.what}: {len(self.buf) - self.pos} trailing bytes after payload", self.pos
            )


def f64le(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()
