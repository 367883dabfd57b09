"""Little-endian record codec shared by the PPTVDAT1 dataset and PPTVMDL1 checkpoint formats."""

from io import BytesIO
from logging import getLogger
from math import prod
from pathlib import Path

import numpy as np

from ensocast.core.constants import MAX_ELEMENTS, MAX_EXTENT
from ensocast.core.exceptions import BadMagicError, ExtentOverflowError, FormatError, TruncatedPayloadError
from ensocast.utils.types import FloatArray, PathLike

logger = getLogger(__name__)


class RecordWriter:
    """Accumulates little-endian records in memory and writes them in one call."""

    def __init__(self, magic: bytes) -> None:
        """Start a payload with the given magic bytes."""
        self._buffer = BytesIO()
        self._buffer.write(magic)

    def u8(self, value: int) -> None:
        """Write an unsigned byte."""
        self._buffer.write(np.array([value], dtype="<u1").tobytes())

    def u32(self, value: int) -> None:
        """Write an unsigned 32-bit integer."""
        self._buffer.write(np.array([value], dtype="<u4").tobytes())

    def u64(self, value: int) -> None:
        """Write an unsigned 64-bit integer."""
        self._buffer.write(np.array([value], dtype="<u8").tobytes())

    def f64(self, value: float) -> None:
        """Write a 64-bit float."""
        self._buffer.write(np.array([value], dtype="<f8").tobytes())

    def floats(self, values: FloatArray) -> None:
        """Write raw 64-bit floats in row-major order."""
        self._buffer.write(np.ascontiguousarray(values, dtype="<f8").tobytes())

    def text(self, value: str) -> None:
        """Write a u64 length-prefixed UTF-8 string."""
        data = value.encode("utf-8")
        self.u64(len(data))
        self._buffer.write(data)

    def name(self, value: str) -> None:
        """Write a u32 length-prefixed UTF-8 name."""
        data = value.encode("utf-8")
        self.u32(len(data))
        self._buffer.write(data)

    def getvalue(self) -> bytes:
        """Get the encoded payload."""
        return self._buffer.getvalue()

    def save(self, path: PathLike) -> None:
        """Write the payload to ``path``."""
        payload = self.getvalue()
        Path(path).write_bytes(payload)
        logger.debug(f"Wrote {len(payload)} bytes to {path}")


class RecordReader:
    """Sequential reader that raises format errors instead of returning partial data."""

    def __init__(self, payload: bytes, magic: bytes) -> None:
        """Check the magic bytes and position the cursor after them.

        Raises:
            BadMagicError: If the payload does not start with ``magic``.
        """
        if payload[: len(magic)] != magic:
            raise BadMagicError(f"Bad magic: expected {magic!r}, found {payload[: len(magic)]!r}")
        self._payload = payload
        self._pos = len(magic)

    @classmethod
    def open(cls, path: PathLike, magic: bytes) -> "RecordReader":
        """Read a whole file and check its magic."""
        return cls(Path(path).read_bytes(), magic)

    @property
    def exhausted(self) -> bool:
        """Whether every byte has been consumed."""
        return self._pos >= len(self._payload)

    @property
    def remaining(self) -> int:
        """Number of bytes not consumed yet."""
        return len(self._payload) - self._pos

    def require(self, size: int, what: str) -> None:
        """Raise :class:`TruncatedPayloadError` unless ``size`` more bytes are available; consumes nothing."""
        if size > self.remaining:
            msg = f"Truncated payload: needed {size} bytes for {what} at offset {self._pos}, "
            raise TruncatedPayloadError(msg + f"only {self.remaining} left")

    def _take(self, size: int, what: str) -> bytes:
        self.require(size, what)
        end = self._pos + size
        chunk = self._payload[self._pos : end]
        self._pos = end
        return chunk

    def u8(self, what: str) -> int:
        """Read an unsigned byte."""
        return int(np.frombuffer(self._take(1, what), dtype="<u1")[0])

    def u32(self, what: str) -> int:
        """Read an unsigned 32-bit integer."""
        return int(np.frombuffer(self._take(4, what), dtype="<u4")[0])

    def u64(self, what: str) -> int:
        """Read an unsigned 64-bit integer."""
        return int(np.frombuffer(self._take(8, what), dtype="<u8")[0])

    def f64(self, what: str) -> float:
        """Read a 64-bit float."""
        return float(np.frombuffer(self._take(8, what), dtype="<f8")[0])

    def extent(self, what: str) -> int:
        """Read a u64 extent and check it against :data:`MAX_EXTENT`."""
        value = self.u64(what)
        if value > MAX_EXTENT:
            raise ExtentOverflowError(f"Extent overflow: {what}={value} exceeds {MAX_EXTENT}")
        return value

    def floats(self, shape: tuple[int, ...], what: str) -> FloatArray:
        """Read raw 64-bit floats into a native-endian array of ``shape``."""
        count = prod(shape)
        if count > MAX_ELEMENTS:
            raise ExtentOverflowError(f"Extent overflow: {what} declares {count} elements")
        raw = np.frombuffer(self._take(8 * count, what), dtype="<f8")
        return raw.astype(np.float64).reshape(shape)

    def text(self, what: str) -> str:
        """Read a u64 length-prefixed UTF-8 string."""
        size = self.u64(what)
        if size > MAX_ELEMENTS:
            raise ExtentOverflowError(f"Extent overflow: {what} declares {size} bytes")
        return self._decode(self._take(size, what), what)

    def name(self, what: str) -> str:
        """Read a u32 length-prefixed UTF-8 name."""
        return self._decode(self._take(self.u32(what), what), what)

    @staticmethod
    def _decode(data: bytes, what: str) -> str:
        try:
            return data.decode("utf-8")
        except UnicodeDecodeError as err:
            raise FormatError(f"{what} is not valid UTF-8: {err}") from err


__all__ = ["RecordReader", "RecordWriter"]
