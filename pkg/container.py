from __future__ import annotations

# container.py
import struct
import zlib
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    """Raised when a binary file has the wrong magic, shape, length or checksum."""


MAGIC_LEN = 8


class Writer:
    """Little-endian byte builder; ``seal`` appends the CRC32 of everything written."""

    def __init__(self, magic: bytes) -> None:
        if len(magic) != MAGIC_LEN:
            raise ValueError(f"magic must be {MAGIC_LEN} bytes, got {magic!r}")
        self._parts: list[bytes] = [magic]

    def u16(self, value: int) -> None:
        self._parts.append(struct.pack("<H", value))

    def u32(self, value: int) -> None:
        self._parts.append(struct.pack("<I", value))

    def u64(self, value: int) -> None:
        self._parts.append(struct.pack("<Q", value))

    def f64(self, value: float) -> None:
        self._parts.append(struct.pack("<d", value))

    def raw(self, data: bytes) -> None:
        self._parts.append(data)

    def f64_block(self, arr: np.ndarray) -> None:
        self._parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    def u8_block(self, arr: np.ndarray) -> None:
        self._parts.append(np.ascontiguousarray(arr, dtype=np.uint8).tobytes())

    def seal(self) -> bytes:
        body = b"".join(self._parts)
        return body + struct.pack("<I", zlib.crc32(body))


class Reader:
    """Cursor over a sealed container. Every read checks the remaining length."""

    def __init__(self, data: bytes, magic: bytes) -> None:
        if len(data) < MAGIC_LEN + 4:
            raise FormatError(f"file too short ({len(data)} bytes)")
        if data[:MAGIC_LEN] != magic:
            raise FormatError(f"bad magic {data[:MAGIC_LEN]!r}, expected {magic!r}")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(body) != crc:
            raise FormatError("CRC32 mismatch (file truncated or corrupted)")
        self._body = body
        self._pos = MAGIC_LEN

    def _take(self, n: int) -> bytes:
        if self._pos + n > len(self._body):
            raise FormatError(f"unexpected end of data at byte {self._pos} (wanted {n} more)")
        out = self._body[self._pos : self._pos + n]
        self._pos += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def f64_block(self, shape: tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(self._take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)

    def u8_block(self, shape: tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(self._take(count), dtype=np.uint8).copy().reshape(shape)

    def finish(self) -> None:
        if self._pos != len(self._body):
            raise FormatError(f"{len(self._body) - self._pos} trailing bytes after payload")


def write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)


def read_bytes(path: Path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    return path.read_bytes()
