"""classes.dex reader: string table, method references, and code items.

Only what the feature extractors need is decoded. Every read is bounds
checked so malformed input surfaces as a structured error.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

from ..errors import (
    BadMagic,
    IndexOutOfRange,
    OverlongVarint,
    TruncatedFile,
    TruncatedVarint,
)

HEADER_SIZE = 0x70
DEX_MAGICS = (b"dex\n035\0", b"dex\n037\0", b"dex\n038\0", b"dex\n039\0")
NO_INDEX = 0xFFFFFFFF


@dataclass(frozen=True)
class MethodRef:
    class_descriptor: str
    name: str
    shorty: str


@dataclass(frozen=True)
class CodeItem:
    method_idx: int
    insns: tuple[int, ...]


@dataclass(frozen=True)
class DexFile:
    string_table: tuple[str, ...]
    method_refs: tuple[MethodRef, ...]
    code_items: tuple[CodeItem, ...]


def read_uleb128(data: bytes, offset: int) -> tuple[int, int]:
    """Decode an unsigned LEB128 value of at most five bytes."""
    result = 0
    for i in range(5):
        if offset + i >= len(data) or offset + i < 0:
            raise TruncatedVarint(f"varint at {offset} runs past end of data")
        byte = data[offset + i]
        if i == 4 and byte > 0x0F:
            raise OverlongVarint(f"varint at {offset} exceeds 32 bits")
        result |= (byte & 0x7F) << (7 * i)
        if not byte & 0x80:
            return result, offset + i + 1
    raise OverlongVarint(f"varint at {offset} longer than 5 bytes")  # pragma: no cover


class _Reader:
    def __init__(self, data: bytes):
        self.data = data

    def unpack(self, fmt: str, offset: int, section: str) -> tuple:
        size = struct.calcsize(fmt)
        if offset < 0 or offset + size > len(self.data):
            raise TruncatedFile(section)
        return struct.unpack_from("<" + fmt, self.data, offset)

    def table(self, offset: int, count: int, item: str, section: str) -> list[tuple]:
        size = struct.calcsize("<" + item)
        if count and (offset < 0 or offset + count * size > len(self.data)):
            raise TruncatedFile(section)
        return list(struct.iter_unpack("<" + item, self.data[offset:offset + count * size]))

    def uleb(self, offset: int, section: str) -> tuple[int, int]:
        try:
            return read_uleb128(self.data, offset)
        except TruncatedVarint:
            raise TruncatedFile(section) from None


def _index(table: str, seq, idx: int):
    if idx >= len(seq):
        raise IndexOutOfRange(table, idx)
    return seq[idx]


def parse_dex(data: bytes) -> DexFile:
    data = bytes(data)
    magic = data[:8]
    if not any(m.startswith(magic) for m in DEX_MAGICS):
        raise BadMagic(f"not a DEX file: {magic!r}")
    if len(data) < HEADER_SIZE:
        raise TruncatedFile("header")
    r = _Reader(data)
    (string_ids_size, string_ids_off, type_ids_size, type_ids_off,
     proto_ids_size, proto_ids_off, _field_ids_size, _field_ids_off,
     method_ids_size, method_ids_off, class_defs_size, class_defs_off) = r.unpack("12I", 0x38, "header")

    strings = []
    for (off,) in r.table(string_ids_off, string_ids_size, "I", "string_ids"):
        _utf16_len, start = r.uleb(off, "string_data")
        end = data.find(b"\0", start)
        if end < 0:
            raise TruncatedFile("string_data")
        # MUTF-8 is read as UTF-8; only the common subset round-trips
        strings.append(data[start:end].decode("utf-8", errors="replace"))

    types = [_index("string_ids", strings, i) for (i,) in
             r.table(type_ids_off, type_ids_size, "I", "type_ids")]
    shorties = [_index("string_ids", strings, shorty) for shorty, _ret, _params in
                r.table(proto_ids_off, proto_ids_size, "III", "proto_ids")]
    methods = tuple(
        MethodRef(_index("type_ids", types, cls), _index("string_ids", strings, name),
                  _index("proto_ids", shorties, proto))
        for cls, proto, name in r.table(method_ids_off, method_ids_size, "HHI", "method_ids")
    )

    code_items = []
    for class_def in r.table(class_defs_off, class_defs_size, "8I", "class_defs"):
        _index("type_ids", types, class_def[0])
        class_data_off = class_def[6]
        if class_data_off:
            code_items.extend(_class_code(r, class_data_off, len(methods)))
    return DexFile(tuple(strings), methods, tuple(code_items))


def _class_code(r: _Reader, offset: int, n_methods: int) -> list[CodeItem]:
    sizes = []
    pos = offset
    for _ in range(4):
        value, pos = r.uleb(pos, "class_data")
        sizes.append(value)
    static_fields, instance_fields, direct, virtual = sizes
    for _ in range(static_fields + instance_fields):
        _, pos = r.uleb(pos, "class_data")
        _, pos = r.uleb(pos, "class_data")
    out = []
    for count in (direct, virtual):
        method_idx = 0
        for _ in range(count):
            diff, pos = r.uleb(pos, "class_data")
            _access, pos = r.uleb(pos, "class_data")
            code_off, pos = r.uleb(pos, "class_data")
            method_idx += diff
            if method_idx >= n_methods:
                raise IndexOutOfRange("method_ids", method_idx)
            if code_off:
                out.append(_code_item(r, code_off, method_idx))
    return out


def _code_item(r: _Reader, offset: int, method_idx: int) -> CodeItem:
    (_regs, _ins, _outs, _tries, _debug, insns_size) = r.unpack("HHHHII", offset, "code_item")
    start = offset + 16
    if start + 2 * insns_size > len(r.data):
        raise TruncatedFile("code_item")
    units = struct.unpack_from(f"<{insns_size}H", r.data, start)
    return CodeItem(method_idx, units)


def merge(dexes: list[DexFile]) -> DexFile:
    """Concatenate multidex files in load order into one logical DexFile."""
    strings: list[str] = []
    methods: list[MethodRef] = []
    code: list[CodeItem] = []
    for dex in dexes:
        base = len(methods)
        strings.extend(dex.string_table)
        methods.extend(dex.method_refs)
        code.extend(CodeItem(c.method_idx + base, c.insns) for c in dex.code_items)
    return DexFile(tuple(strings), tuple(methods), tuple(code))
