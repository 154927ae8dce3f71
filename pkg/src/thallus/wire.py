"""Little-endian primitive encodings shared by every control-plane payload.

strings are ``u32 length + UTF-8``, lists are ``u32 count + elements``, UUIDs
are 16 raw bytes and a schema is ``u32 field count`` followed by
``(string name, u8 type tag, u8 nullable)`` per field.
"""

from __future__ import annotations

import struct

from .columnar import DataType, Field, Schema
from .errors import FormatError

_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class Writer:
    def __init__(self):
        self._parts: list[bytes] = []

    def u8(self, v: int) -> "Writer":
        self._parts.append(_U8.pack(v))
        return self

    def u16(self, v: int) -> "Writer":
        self._parts.append(_U16.pack(v))
        return self

    def u32(self, v: int) -> "Writer":
        self._parts.append(_U32.pack(v))
        return self

    def u64(self, v: int) -> "Writer":
        self._parts.append(_U64.pack(v))
        return self

    def raw(self, b) -> "Writer":
        self._parts.append(bytes(b))
        return self

    def uuid(self, b: bytes) -> "Writer":
        if len(b) != 16:
            raise ValueError(f"UUID must be 16 bytes, got {len(b)}")
        return self.raw(b)

    def string(self, s: str) -> "Writer":
        data = s.encode("utf-8")
        return self.u32(len(data)).raw(data)

    def short_string(self, s: str) -> "Writer":
        data = s.encode("utf-8")
        return self.u16(len(data)).raw(data)

    def u64_list(self, values) -> "Writer":
        values = list(values)
        self.u32(len(values))
        self._parts.append(struct.pack(f"<{len(values)}Q", *values))
        return self

    def schema(self, schema: Schema) -> "Writer":
        self.u32(len(schema))
        for f in schema:
            self.string(f.name).u8(int(f.dtype)).u8(1 if f.nullable else 0)
        return self

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data, offset: int = 0):
        self._view = memoryview(data).cast("B") if not isinstance(data, (bytes, bytearray)) else memoryview(data)
        self.pos = offset

    @property
    def remaining(self) -> int:
        return len(self._view) - self.pos

    def _take(self, n: int) -> memoryview:
        if n < 0 or self.pos + n > len(self._view):
            raise FormatError(f"truncated payload: need {n} bytes at offset {self.pos}, have {self.remaining}")
        out = self._view[self.pos:self.pos + n]
        self.pos += n
        return out

    def _unpack(self, st: struct.Struct) -> int:
        return st.unpack(self._take(st.size))[0]

    def u8(self) -> int:
        return self._unpack(_U8)

    def u16(self) -> int:
        return self._unpack(_U16)

    def u32(self) -> int:
        return self._unpack(_U32)

    def u64(self) -> int:
        return self._unpack(_U64)

    def raw(self, n: int) -> memoryview:
        return self._take(n)

    def uuid(self) -> bytes:
        return bytes(self._take(16))

    def string(self) -> str:
        return self._decode(self._take(self.u32()))

    def short_string(self) -> str:
        return self._decode(self._take(self.u16()))

    @staticmethod
    def _decode(view) -> str:
        try:
            return bytes(view).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"invalid UTF-8 string: {exc}") from None

    def u64_list(self) -> list[int]:
        n = self.u32()
        return list(struct.unpack(f"<{n}Q", self._take(8 * n)))

    def schema(self) -> Schema:
        fields = []
        for _ in range(self.u32()):
            name = self.string()
            tag = self.u8()
            nullable = self.u8()
            try:
                dtype = DataType(tag)
            except ValueError:
                raise FormatError(f"unknown type tag {tag}") from None
            if nullable not in (0, 1):
                raise FormatError(f"bad nullable flag {nullable}")
            try:
                fields.append(Field(name, dtype, bool(nullable)))
            except ValueError as exc:
                raise FormatError(str(exc)) from None
        try:
            return Schema(tuple(fields))
        except ValueError as exc:
            raise FormatError(str(exc)) from None

    def expect_end(self) -> None:
        if self.remaining:
            raise FormatError(f"{self.remaining} trailing bytes")


def encode_schema(schema: Schema) -> bytes:
    return Writer().schema(schema).getvalue()


def decode_schema(data) -> Schema:
    r = Reader(data)
    schema = r.schema()
    r.expect_end()
    return schema
