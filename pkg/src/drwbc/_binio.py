"""Little-endian binary envelope shared by datasets, weight tables and checkpoints.

Every file starts with an 8-byte magic and a u32 schema version. The payload
after that is a flat sequence of fixed-width scalars and length-prefixed
float64 arrays.
"""

from __future__ import annotations

import io
import struct

import numpy as np


class FormatError(ValueError):
    """Base class for malformed binary files."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class Writer:
    def __init__(self, magic: bytes, version: int):
        if len(magic) != 8:
            raise ValueError("magic must be 8 bytes")
        self._buf = io.BytesIO()
        self._buf.write(magic)
        self.u32(version)

    def u8(self, v: int) -> None:
        self._buf.write(struct.pack("<B", v))

    def u32(self, v: int) -> None:
        self._buf.write(struct.pack("<I", v))

    def u64(self, v: int) -> None:
        self._buf.write(struct.pack("<Q", v))

    def i64(self, v: int) -> None:
        self._buf.write(struct.pack("<q", v))

    def f64(self, v: float) -> None:
        self._buf.write(struct.pack("<d", v))

    def text(self, s: str) -> None:
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self._buf.write(raw)

    def array(self, a: np.ndarray) -> None:
        flat = np.ascontiguousarray(a, dtype="<f8").ravel()
        self.u64(flat.size)
        self._buf.write(flat.tobytes())

    def getvalue(self) -> bytes:
        return self._buf.getvalue()

    def dump(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.getvalue())


class Reader:
    def __init__(self, data: bytes, magic: bytes, version: int):
        self._data = data
        self._pos = 0
        head = self._take(8)
        if head != magic:
            raise BadMagicError(f"bad magic {head!r}, expected {magic!r}")
        found = self.u32()
        if found != version:
            raise VersionMismatchError(f"schema version {found}, expected {version}")

    @classmethod
    def open(cls, path, magic: bytes, version: int) -> "Reader":
        with open(path, "rb") as fh:
            return cls(fh.read(), magic, version)

    def _take(self, n: int) -> bytes:
        end = self._pos + n
        if end > len(self._data):
            raise TruncatedFileError(
                f"truncated file: wanted {n} bytes at offset {self._pos}, "
                f"only {len(self._data) - self._pos} left"
            )
        out = self._data[self._pos:end]
        self._pos = end
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self._take(1))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def i64(self) -> int:
        return struct.unpack("<q", self._take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def text(self) -> str:
        n = self.u32()
        try:
            return self._take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"malformed header string: {exc}") from exc

    def array(self, shape=None) -> np.ndarray:
        n = self.u64()
        raw = self._take(8 * n)
        a = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        if shape is not None:
            if int(np.prod(shape)) != n:
                raise FormatError(f"array of {n} values does not fit shape {shape}")
            a = a.reshape(shape)
        return a

    def at_end(self) -> bool:
        return self._pos == len(self._data)

    def expect_end(self) -> None:
        if not self.at_end():
            raise FormatError(f"{len(self._data) - self._pos} trailing bytes")
