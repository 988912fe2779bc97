"""AndroidManifest.xml reader for both binary AXML and plain-text XML.

Both decoders build the same small element tree, and a single walker turns
that tree into :class:`ManifestInfo`, so equivalent documents compare equal
regardless of encoding.
"""
from __future__ import annotations

import struct
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import Any, Callable

from ..errors import MalformedAxml, MalformedXml, MissingPackage

RES_XML_TYPE = 0x0003
RES_STRING_POOL_TYPE = 0x0001
RES_XML_RESOURCE_MAP_TYPE = 0x0180
RES_XML_START_NAMESPACE_TYPE = 0x0100
RES_XML_END_NAMESPACE_TYPE = 0x0101
RES_XML_START_ELEMENT_TYPE = 0x0102
RES_XML_END_ELEMENT_TYPE = 0x0103
RES_XML_CDATA_TYPE = 0x0104

UTF8_FLAG = 0x100
NO_INDEX = 0xFFFFFFFF

TYPE_REFERENCE = 0x01
TYPE_STRING = 0x03
TYPE_FLOAT = 0x04
TYPE_INT_DEC = 0x10
TYPE_INT_HEX = 0x11
TYPE_INT_BOOLEAN = 0x12

# framework attribute ids are authoritative when names are stripped
ANDROID_ATTR_IDS = {
    0x01010003: "name",
    0x0101021B: "versionCode",
    0x0101021C: "versionName",
}

COMPONENT_TAGS = ("activity", "service", "receiver", "provider")
PERMISSION_TAGS = ("uses-permission", "uses-permission-sdk-23")


@dataclass
class ManifestInfo:
    package_name: str
    version_code: int
    version_name: str
    permissions: list[str] = field(default_factory=list)
    components: list[tuple[str, str]] = field(default_factory=list)
    intent_filters: list[str] = field(default_factory=list)
    features: list[str] = field(default_factory=list)


@dataclass
class _Node:
    tag: str
    attrs: dict[str, Any]
    children: list["_Node"] = field(default_factory=list)


def parse_manifest(data: bytes) -> ManifestInfo:
    data = bytes(data)
    if len(data) >= 2 and struct.unpack_from("<H", data)[0] == RES_XML_TYPE:
        root = _parse_axml(data)
        fail: Callable[[str], Exception] = lambda why: MalformedAxml(0, why)
    else:
        root = _parse_text(data)
        fail = lambda why: MalformedXml(0, why)
    return _walk(root, fail)


# ---------------------------------------------------------------------------
# binary XML

class _Axml:
    def __init__(self, data: bytes):
        self.data = data
        self.strings: list[str] = []
        self.resmap: list[int] = []

    def unpack(self, fmt: str, offset: int, limit: int) -> tuple:
        size = struct.calcsize(fmt)
        if offset < 0 or offset + size > limit:
            raise MalformedAxml(offset, f"read of {size} bytes past chunk end {limit:#x}")
        return struct.unpack_from(fmt, self.data, offset)

    def string(self, idx: int, at: int) -> str | None:
        if idx == NO_INDEX:
            return None
        if idx >= len(self.strings):
            raise MalformedAxml(at, f"string index {idx} out of range")
        return self.strings[idx]

    def read_pool(self, pos: int, header_size: int, end: int) -> None:
        if header_size < 28:
            raise MalformedAxml(pos, "string pool header too small")
        count, style_count, flags, strings_start, _ = self.unpack("<IIIII", pos + 8, end)
        table = pos + header_size
        if table + 4 * (count + style_count) > end:
            raise MalformedAxml(pos, "string pool offsets overrun chunk")
        offsets = struct.unpack_from(f"<{count}I", self.data, table)
        base = pos + strings_start
        utf8 = bool(flags & UTF8_FLAG)
        self.strings = [self._pool_string(base + off, end, utf8) for off in offsets]

    def _pool_string(self, at: int, end: int, utf8: bool) -> str:
        if utf8:
            _, at = self._len8(at, end)
            n, at = self._len8(at, end)
            if at + n > end:
                raise MalformedAxml(at, "string overruns pool")
            return self.data[at:at + n].decode("utf-8", errors="replace")
        (n,) = self.unpack("<H", at, end)
        at += 2
        if n & 0x8000:
            (lo,) = self.unpack("<H", at, end)
            n = ((n & 0x7FFF) << 16) | lo
            at += 2
        if at + 2 * n > end:
            raise MalformedAxml(at, "string overruns pool")
        return self.data[at:at + 2 * n].decode("utf-16-le", errors="replace")

    def _len8(self, at: int, end: int) -> tuple[int, int]:
        (n,) = self.unpack("<B", at, end)
        if n & 0x80:
            (lo,) = self.unpack("<B", at + 1, end)
            return ((n & 0x7F) << 8) | lo, at + 2
        return n, at + 1

    def value(self, raw_idx: int, dtype: int, data: int, at: int) -> Any:
        if dtype == TYPE_STRING:
            return self.string(data, at)
        if dtype in (TYPE_INT_DEC, TYPE_INT_HEX):
            return data - (1 << 32) if data & 0x80000000 else data
        if dtype == TYPE_INT_BOOLEAN:
            return data != 0
        if dtype == TYPE_REFERENCE:
            return f"@0x{data:08x}"
        if dtype == TYPE_FLOAT:
            return struct.unpack("<f", struct.pack("<I", data))[0]
        if raw_idx != NO_INDEX:
            return self.string(raw_idx, at)
        return data

    def attr_name(self, name_idx: int, at: int) -> str:
        if name_idx < len(self.resmap) and self.resmap[name_idx] in ANDROID_ATTR_IDS:
            return ANDROID_ATTR_IDS[self.resmap[name_idx]]
        name = self.string(name_idx, at)
        if name is None:
            raise MalformedAxml(at, "attribute without a name")
        return name


def _parse_axml(data: bytes) -> _Node:
    ax = _Axml(data)
    if len(data) < 8:
        raise MalformedAxml(0, "truncated file header")
    _, header_size, total = struct.unpack_from("<HHI", data)
    if total > len(data):
        raise MalformedAxml(0, f"declared size {total} exceeds input length {len(data)}")
    if header_size < 8 or header_size > total:
        raise MalformedAxml(0, "bad file header size")

    root: _Node | None = None
    stack: list[_Node] = []
    pos = header_size
    while pos < total:
        ctype, chsize, csize = ax.unpack("<HHI", pos, total)
        if chsize < 8 or csize < chsize or pos + csize > total:
            raise MalformedAxml(pos, "bad chunk header")
        end = pos + csize
        if ctype == RES_STRING_POOL_TYPE:
            ax.read_pool(pos, chsize, end)
        elif ctype == RES_XML_RESOURCE_MAP_TYPE:
            n = (csize - chsize) // 4
            ax.resmap = list(struct.unpack_from(f"<{n}I", data, pos + chsize))
        elif ctype == RES_XML_START_ELEMENT_TYPE:
            node = _start_element(ax, pos, chsize, end)
            if stack:
                stack[-1].children.append(node)
            elif root is None:
                root = node
            else:
                raise MalformedAxml(pos, "second root element")
            stack.append(node)
        elif ctype == RES_XML_END_ELEMENT_TYPE:
            if chsize < 16:
                raise MalformedAxml(pos, "element header too small")
            _, name_idx = ax.unpack("<II", pos + chsize, end)
            name = ax.string(name_idx, pos)
            if not stack or stack[-1].tag != name:
                raise MalformedAxml(pos, f"unbalanced end element {name!r}")
            stack.pop()
        # namespaces and CDATA carry nothing the manifest walker needs
        pos = end
    if root is None:
        raise MalformedAxml(pos, "no root element")
    if stack:
        raise MalformedAxml(pos, f"unclosed element {stack[-1].tag!r}")
    return root


def _start_element(ax: _Axml, pos: int, chsize: int, end: int) -> _Node:
    if chsize < 16:
        raise MalformedAxml(pos, "element header too small")
    body = pos + chsize
    _ns, name_idx, attr_start, attr_size, attr_count = ax.unpack("<IIHHH", body, end)
    tag = ax.string(name_idx, pos)
    if tag is None:
        raise MalformedAxml(pos, "element without a name")
    if attr_count and attr_size < 20:
        raise MalformedAxml(pos, "attribute record too small")
    base = body + attr_start
    if base + attr_count * attr_size > end:
        raise MalformedAxml(pos, "attributes overrun chunk")
    attrs: dict[str, Any] = {}
    for i in range(attr_count):
        at = base + i * attr_size
        _ans, aname, raw, _size, _res0, dtype, value = struct.unpack_from("<IIIHBBI", ax.data, at)
        attrs[ax.attr_name(aname, at)] = ax.value(raw, dtype, value, at)
    return _Node(tag, attrs)


# ---------------------------------------------------------------------------
# plain XML

def _local(name: str) -> str:
    return name.rsplit("}", 1)[-1]


def _parse_text(data: bytes) -> _Node:
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        raise MalformedXml(exc.position[0], str(exc)) from exc
    except (ValueError, LookupError, RecursionError) as exc:
        raise MalformedXml(0, str(exc)) from exc

    def convert(el: ET.Element) -> _Node:
        return _Node(_local(el.tag), {_local(k): v for k, v in el.attrib.items()})

    top = convert(root)
    pending = [(root, top)]
    while pending:
        el, node = pending.pop()
        for child in el:
            if isinstance(child.tag, str):
                sub = convert(child)
                node.children.append(sub)
                pending.append((child, sub))
    return top


# ---------------------------------------------------------------------------
# shared walker

def _walk(root: _Node, fail: Callable[[str], Exception]) -> ManifestInfo:
    if root.tag != "manifest":
        raise MissingPackage(f"root element is {root.tag!r}, not 'manifest'")
    package = root.attrs.get("package")
    if not isinstance(package, str) or not package:
        raise MissingPackage("manifest has no package attribute")

    raw_code = root.attrs.get("versionCode", 0)
    if isinstance(raw_code, bool):
        raise fail("versionCode is not an integer")
    try:
        version_code = int(raw_code)
    except (TypeError, ValueError):
        raise fail(f"versionCode {raw_code!r} is not an integer") from None
    version_name = root.attrs.get("versionName")

    info = ManifestInfo(package, version_code, "" if version_name is None else str(version_name))

    # explicit stack: fuzzed input may nest arbitrarily deep
    pending = [(child, "manifest") for child in reversed(root.children)]
    while pending:
        node, parent = pending.pop()
        name = node.attrs.get("name")
        name = None if name is None else str(name)
        if node.tag in PERMISSION_TAGS and parent == "manifest":
            if name and name not in info.permissions:
                info.permissions.append(name)
        elif node.tag == "uses-feature" and parent == "manifest":
            if name:
                info.features.append(name)
        elif node.tag in COMPONENT_TAGS and parent == "application":
            if name:
                info.components.append((node.tag, name))
        elif node.tag == "action" and parent == "intent-filter":
            if name:
                info.intent_filters.append(name)
        pending.extend((child, node.tag) for child in reversed(node.children))
    return info
