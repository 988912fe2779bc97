"""Minimal ZIP reader for APK containers.

Walks the central directory, supports stored (0) and deflate (8) entries,
verifies CRC-32. No ZIP64, no encryption, no spanning.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

from ..errors import CorruptEntry, CrcMismatch, NotAZip, UnsupportedCompression

_EOCD_SIG = b"PK\x05\x06"
_CDIR_SIG = b"PK\x01\x02"
_LOCAL_SIG = b"PK\x03\x04"
_EOCD = struct.Struct("<4sHHHHIIH")
_CDIR = struct.Struct("<4sHHHHHHIIIHHHHHII")
_LOCAL = struct.Struct("<4sHHHHHIIIHH")

# top-level APK layout; directories are matched by prefix
WELL_KNOWN = (
    "AndroidManifest.xml",
    "classes.dex",
    "resources.arsc",
    "res/",
    "assets/",
    "lib/",
    "META-INF/",
)


@dataclass(frozen=True)
class ZipEntry:
    path: str
    size: int
    crc32: int
    data: bytes


@dataclass
class ApkContainer:
    entries: list[ZipEntry]
    well_known: dict[str, bool] = field(default_factory=dict)

    def get(self, path: str) -> bytes | None:
        for entry in self.entries:
            if entry.path == path:
                return entry.data
        return None

    def paths(self) -> list[str]:
        return [e.path for e in self.entries]

    def dex_entries(self) -> list[ZipEntry]:
        """classes.dex, classes2.dex, ... in multidex load order."""
        found = {}
        for e in self.entries:
            name = e.path
            if name == "classes.dex":
                found[1] = e
            elif name.startswith("classes") and name.endswith(".dex") and name[7:-4].isdigit():
                idx = int(name[7:-4])
                if idx >= 2:
                    found[idx] = e
        return [found[k] for k in sorted(found)]


def _find_eocd(data: bytes) -> int:
    # comment is at most 65535 bytes, so the record sits in the tail
    lo = max(0, len(data) - _EOCD.size - 0xFFFF)
    pos = data.rfind(_EOCD_SIG, lo)
    while pos >= 0:
        if pos + _EOCD.size <= len(data):
            comment_len = struct.unpack_from("<H", data, pos + 20)[0]
            if pos + _EOCD.size + comment_len == len(data):
                return pos
        pos = data.rfind(_EOCD_SIG, lo, pos)
    raise NotAZip("end of central directory record not found")


def _decode_name(raw: bytes, flags: int) -> str:
    if flags & 0x800:
        return raw.decode("utf-8", errors="replace")
    return raw.decode("cp437")


def open_apk(data: bytes) -> ApkContainer:
    data = bytes(data)
    if not data:
        raise NotAZip("empty input")
    eocd = _find_eocd(data)
    (_, disk, cd_disk, _n_here, n_total, cd_size, cd_off, _) = _EOCD.unpack_from(data, eocd)
    if disk != 0 or cd_disk != 0:
        raise NotAZip("multi-disk archives are not supported")
    if n_total == 0xFFFF or cd_off == 0xFFFFFFFF or cd_size == 0xFFFFFFFF:
        raise NotAZip("ZIP64 archives are not supported")
    if cd_off + cd_size > eocd:
        raise NotAZip("central directory out of range")

    entries: list[ZipEntry] = []
    seen: set[str] = set()
    pos = cd_off
    for _ in range(n_total):
        if pos + _CDIR.size > eocd:
            raise NotAZip("truncated central directory")
        (sig, _vmade, _vneed, flags, method, _t, _d, crc, csize, usize,
         name_len, extra_len, comment_len, _dstart, _iattr, _eattr, local_off) = _CDIR.unpack_from(data, pos)
        if sig != _CDIR_SIG:
            raise NotAZip(f"bad central directory signature at {pos:#x}")
        name_end = pos + _CDIR.size + name_len
        if name_end > eocd:
            raise NotAZip("truncated central directory")
        path = _decode_name(data[pos + _CDIR.size:name_end], flags)
        pos = name_end + extra_len + comment_len
        if path in seen:
            raise NotAZip(f"duplicate entry {path!r}")
        seen.add(path)
        if csize == 0xFFFFFFFF or usize == 0xFFFFFFFF or local_off == 0xFFFFFFFF:
            raise NotAZip("ZIP64 entries are not supported")
        if flags & 0x1:
            raise UnsupportedCompression(method, path)
        if method not in (0, 8):
            raise UnsupportedCompression(method, path)
        entries.append(ZipEntry(path, usize, crc, _read_entry(data, path, method, local_off, csize, usize, crc)))

    well_known = {
        key: any(p == key or (key.endswith("/") and p.startswith(key)) for p in seen)
        for key in WELL_KNOWN
    }
    return ApkContainer(entries, well_known)


def _read_entry(data: bytes, path: str, method: int, local_off: int,
                csize: int, usize: int, crc: int) -> bytes:
    if local_off + _LOCAL.size > len(data):
        raise CorruptEntry(path, "local header out of range")
    fields = _LOCAL.unpack_from(data, local_off)
    if fields[0] != _LOCAL_SIG:
        raise CorruptEntry(path, "bad local header signature")
    start = local_off + _LOCAL.size + fields[9] + fields[10]
    if start + csize > len(data):
        raise CorruptEntry(path, "compressed data out of range")
    raw = data[start:start + csize]
    if method == 0:
        if csize != usize:
            raise CorruptEntry(path, "stored entry size mismatch")
        out = raw
    else:
        inflater = zlib.decompressobj(-15)
        try:
            out = inflater.decompress(raw, usize + 1)
        except zlib.error as exc:
            raise CorruptEntry(path, f"deflate: {exc}") from exc
        if len(out) != usize:
            raise CorruptEntry(path, "inflated size mismatch")
    if zlib.crc32(out) != crc:
        raise CrcMismatch(path)
    return out
