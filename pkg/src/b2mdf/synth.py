"""Builders for synthetic fixtures: DEX files, AXML and text manifests, APKs.

Real APKs are not redistributable, so tests and demo scripts assemble small
but structurally faithful ones here. Everything is deterministic: the same
arguments always give the same bytes.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
import xml.etree.ElementTree as ET
import zipfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .ledger import Participant, Registry, Role, public_key_bytes, signing_key_from_seed

ANDROID_NS = "http://schemas.android.com/apk/res/android"
ANDROID_ATTRS = {"name": 0x01010003, "versionCode": 0x0101021B, "versionName": 0x0101021C}
NO_INDEX = 0xFFFFFFFF


# ---------------------------------------------------------------------------
# DEX

@dataclass
class SynthMethod:
    class_descriptor: str
    name: str
    shorty: str = "V"
    # None marks an external reference (a method_id with no code here)
    insns: list[int] | None = None
    registers: int = 4


_RETURN_TYPES = {"V": "V", "Z": "Z", "B": "B", "S": "S", "C": "C", "I": "I",
                 "J": "J", "F": "F", "D": "D", "L": "Ljava/lang/Object;"}


def _uleb(value: int) -> bytes:
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def _align(buf: bytearray, n: int) -> None:
    while len(buf) % n:
        buf.append(0)


def build_dex(methods: list[SynthMethod], extra_strings: list[str] = (), version: bytes = b"035") -> bytes:
    """Assemble a minimal valid classes.dex holding ``methods``.

    Method ids are sorted by (class, name, shorty) as the format requires;
    code items are emitted in that order too.
    """
    methods = sorted(methods, key=lambda m: (m.class_descriptor, m.name, m.shorty))
    type_names = {m.class_descriptor for m in methods} | {_RETURN_TYPES[m.shorty[0]] for m in methods}
    strings = sorted(set(extra_strings) | type_names | {m.name for m in methods} | {m.shorty for m in methods})
    sidx = {s: i for i, s in enumerate(strings)}
    types = sorted(type_names)
    tidx = {t: i for i, t in enumerate(types)}
    shorties = sorted({m.shorty for m in methods})
    pidx = {s: i for i, s in enumerate(shorties)}
    defined = sorted({m.class_descriptor for m in methods if m.insns is not None})

    string_ids_off = 0x70
    type_ids_off = string_ids_off + 4 * len(strings)
    proto_ids_off = type_ids_off + 4 * len(types)
    method_ids_off = proto_ids_off + 12 * len(shorties)
    class_defs_off = method_ids_off + 8 * len(methods)
    data_off = class_defs_off + 32 * len(defined)

    data = bytearray()
    string_offs = []
    for s in strings:
        string_offs.append(data_off + len(data))
        data += _uleb(len(s)) + s.encode("utf-8") + b"\0"
    _align(data, 4)
    code_offs: dict[int, int] = {}
    for i, m in enumerate(methods):
        if m.insns is None:
            continue
        _align(data, 4)
        code_offs[i] = data_off + len(data)
        data += struct.pack("<HHHHII", m.registers, 0, 0, 0, 0, len(m.insns))
        data += struct.pack(f"<{len(m.insns)}H", *m.insns)
    class_data_offs = {}
    for cls in defined:
        class_data_offs[cls] = data_off + len(data)
        own = [i for i, m in enumerate(methods) if m.class_descriptor == cls and m.insns is not None]
        data += _uleb(0) + _uleb(0) + _uleb(len(own)) + _uleb(0)
        prev = 0
        for i in own:
            data += _uleb(i - prev) + _uleb(0x1) + _uleb(code_offs[i])
            prev = i
    _align(data, 4)
    map_off = data_off + len(data)
    data += struct.pack("<I", 1) + struct.pack("<HHII", 0x0000, 0, 1, 0)

    body = bytearray()
    body += b"".join(struct.pack("<I", off) for off in string_offs)
    body += b"".join(struct.pack("<I", sidx[t]) for t in types)
    for s in shorties:
        body += struct.pack("<III", sidx[s], tidx[_RETURN_TYPES[s[0]]], 0)
    for m in methods:
        body += struct.pack("<HHI", tidx[m.class_descriptor], pidx[m.shorty], sidx[m.name])
    for cls in defined:
        body += struct.pack("<8I", tidx[cls], 0x1, NO_INDEX, 0, NO_INDEX, 0, class_data_offs[cls], 0)
    file_size = data_off + len(data)

    header = bytearray(0x70)
    header[0:8] = b"dex\n" + version + b"\0"
    struct.pack_into("<III", header, 0x20, file_size, 0x70, 0x12345678)
    struct.pack_into("<III", header, 0x2C, 0, 0, map_off)
    struct.pack_into("<12I", header, 0x38,
                     len(strings), string_ids_off, len(types), type_ids_off,
                     len(shorties), proto_ids_off, 0, 0,
                     len(methods), method_ids_off, len(defined), class_defs_off)
    struct.pack_into("<II", header, 0x68, len(data), data_off)
    out = bytearray(header + body + data)
    out[12:32] = hashlib.sha1(out[32:]).digest()
    struct.pack_into("<I", out, 8, zlib.adler32(bytes(out[12:])))
    return bytes(out)


# ---------------------------------------------------------------------------
# manifests

@dataclass
class Element:
    tag: str
    attrs: dict[str, Any] = field(default_factory=dict)
    children: list["Element"] = field(default_factory=list)


def manifest_tree(package: str, version_code: int, version_name: str = "1.0", *,
                  permissions: list[str] = (), features: list[str] = (),
                  components: list[tuple[str, str, list[str]]] = ()) -> Element:
    """A typical manifest; components are (tag, name, intent-filter actions)."""
    root = Element("manifest", {"package": package, "versionCode": version_code, "versionName": version_name})
    root.children += [Element("uses-permission", {"name": p}) for p in permissions]
    root.children += [Element("uses-feature", {"name": f}) for f in features]
    app = Element("application", {"label": package})
    for tag, name, actions in components:
        comp = Element(tag, {"name": name})
        if actions:
            comp.children.append(Element("intent-filter", {}, [Element("action", {"name": a}) for a in actions]))
        app.children.append(comp)
    root.children.append(app)
    return root


def _is_android(name: str) -> bool:
    return name in ANDROID_ATTRS or name in ("label", "exported")


def to_text_xml(root: Element) -> bytes:
    ET.register_namespace("android", ANDROID_NS)

    def build(el: Element) -> ET.Element:
        attrib = {}
        for k, v in el.attrs.items():
            key = f"{{{ANDROID_NS}}}{k}" if _is_android(k) else k
            attrib[key] = str(v).lower() if isinstance(v, bool) else str(v)
        node = ET.Element(el.tag, attrib)
        node.extend(build(c) for c in el.children)
        return node

    tree = build(root)
    ET.indent(tree)
    return ('<?xml version="1.0" encoding="utf-8"?>\n' + ET.tostring(tree, encoding="unicode") + "\n").encode("utf-8")


def _pool_chunk(strings: list[str], utf8: bool) -> bytes:
    offsets, blob = [], bytearray()
    for s in strings:
        offsets.append(len(blob))
        if utf8:
            raw = s.encode("utf-8")
            for n in (len(s), len(raw)):
                blob += bytes([n]) if n < 0x80 else bytes([0x80 | (n >> 8), n & 0xFF])
            blob += raw + b"\0"
        else:
            raw = s.encode("utf-16-le")
            blob += struct.pack("<H", len(raw) // 2) + raw + b"\0\0"
    _align(blob, 4)
    header_size = 28
    strings_start = header_size + 4 * len(strings)
    size = strings_start + len(blob)
    head = struct.pack("<HHIIIIII", 0x0001, header_size, size, len(strings), 0,
                       0x100 if utf8 else 0, strings_start, 0)
    return head + b"".join(struct.pack("<I", o) for o in offsets) + bytes(blob)


def to_axml(root: Element, *, utf8: bool = False, strip_names: bool = False) -> bytes:
    """Binary AXML encoding of ``root``.

    ``strip_names`` blanks the pooled names of framework attributes, as
    obfuscators do, leaving only the resource map to identify them.
    """
    # framework attribute names go first so their pool index matches the resource map
    res_names = sorted(ANDROID_ATTRS, key=ANDROID_ATTRS.get)
    strings: list[str] = [("" if strip_names else n) for n in res_names]
    index: dict[str, int] = {}

    def intern(s: str) -> int:
        if s not in index:
            index[s] = len(strings)
            strings.append(s)
        return index[s]

    def attr_name(name: str) -> int:
        return res_names.index(name) if name in ANDROID_ATTRS else intern(name)

    ns_prefix, ns_uri = intern("android"), intern(ANDROID_NS)
    body = bytearray()
    body += struct.pack("<HHIII", 0x0100, 16, 24, 1, NO_INDEX) + struct.pack("<II", ns_prefix, ns_uri)
    stack = [(root, False)]
    while stack:
        el, closing = stack.pop()
        name = intern(el.tag)
        if closing:
            body += struct.pack("<HHIII", 0x0103, 16, 24, 1, NO_INDEX) + struct.pack("<II", NO_INDEX, name)
            continue
        attrs = []
        for k, v in el.attrs.items():
            ns = ns_uri if _is_android(k) else NO_INDEX
            if isinstance(v, bool):
                attrs.append((ns, attr_name(k), NO_INDEX, 0x12, 0xFFFFFFFF if v else 0))
            elif isinstance(v, int):
                attrs.append((ns, attr_name(k), NO_INDEX, 0x10, v & 0xFFFFFFFF))
            else:
                s = intern(str(v))
                attrs.append((ns, attr_name(k), s, 0x03, s))
        size = 16 + 20 + 20 * len(attrs)
        body += struct.pack("<HHIII", 0x0102, 16, size, 1, NO_INDEX)
        body += struct.pack("<IIHHHHHH", NO_INDEX, name, 20, 20, len(attrs), 0, 0, 0)
        for ns, an, raw, dtype, value in attrs:
            body += struct.pack("<IIIHBBI", ns, an, raw, 8, 0, dtype, value)
        stack.append((el, True))
        stack.extend((c, False) for c in reversed(el.children))
    body += struct.pack("<HHIII", 0x0101, 16, 24, 1, NO_INDEX) + struct.pack("<II", ns_prefix, ns_uri)

    pool = _pool_chunk(strings, utf8)
    resmap = struct.pack("<HHI", 0x0180, 8, 8 + 4 * len(res_names))
    resmap += b"".join(struct.pack("<I", ANDROID_ATTRS[n]) for n in res_names)
    total = 8 + len(pool) + len(resmap) + len(body)
    return struct.pack("<HHI", 0x0003, 8, total) + pool + resmap + bytes(body)


# ---------------------------------------------------------------------------
# APK

_FIXED_TIME = (1980, 1, 1, 0, 0, 0)


def build_apk(entries: dict[str, bytes], *, deflate: tuple[str, ...] = ("classes.dex", "AndroidManifest.xml")) -> bytes:
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for path in sorted(entries):
            info = zipfile.ZipInfo(path, date_time=_FIXED_TIME)
            info.compress_type = zipfile.ZIP_DEFLATED if path in deflate or path.endswith(".dex") else zipfile.ZIP_STORED
            info.external_attr = 0o644 << 16
            zf.writestr(info, entries[path])
    return buf.getvalue()


@dataclass
class AppSpec:
    package: str
    version_code: int
    version_name: str
    permissions: list[str]
    methods: list[SynthMethod]
    strings: list[str] = field(default_factory=list)
    components: list[tuple[str, str, list[str]]] = field(default_factory=list)
    binary_manifest: bool = True

    def manifest(self) -> Element:
        return manifest_tree(self.package, self.version_code, self.version_name,
                             permissions=self.permissions, components=self.components)

    def apk(self) -> bytes:
        tree = self.manifest()
        return build_apk({
            "AndroidManifest.xml": to_axml(tree) if self.binary_manifest else to_text_xml(tree),
            "classes.dex": build_dex(self.methods, self.strings),
            "resources.arsc": b"\x02\x00\x0c\x00" + bytes(8),
            "META-INF/MANIFEST.MF": b"Manifest-Version: 1.0\r\n\r\n",
        })


# ---------------------------------------------------------------------------
# demo corpus

def demo_seed(participant_id: str) -> bytes:
    return hashlib.sha256(b"b2mdf-demo-key:" + participant_id.encode()).digest()


PARTICIPANTS = (
    ("fe-opcodes", Role.FEATURE_EXTRACTOR),
    ("fe-permissions", Role.FEATURE_EXTRACTOR),
    ("fe-api", Role.FEATURE_EXTRACTOR),
    ("fe-commands", Role.FEATURE_EXTRACTOR),
    ("fe-syscalls", Role.FEATURE_EXTRACTOR),
    ("fe-resources", Role.FEATURE_EXTRACTOR),
    ("de-behav", Role.DETECTION_ENGINE),
    ("de-perm", Role.DETECTION_ENGINE),
    ("de-sig", Role.DETECTION_ENGINE),
    ("tp-vendor", Role.THIRD_PARTY),
    ("da-agent", Role.DETERMINANT_AGENT),
)

EXTRACTORS = {
    "opcodes": "fe-opcodes",
    "permissions": "fe-permissions",
    "api_calls": "fe-api",
    "commands": "fe-commands",
    "syscall_ngrams": "fe-syscalls",
    "resources": "fe-resources",
}

_MAIN = ("activity", ".MainActivity", ["android.intent.action.MAIN"])
_ACT = "Landroid/app/Activity;"


def _benign_methods(cls: str) -> list[SynthMethod]:
    return [
        SynthMethod(cls, "<init>", "V", [0x1070, 0x0000, 0x0000, 0x000E]),  # invoke-direct {v0}; return-void
        SynthMethod(cls, "onCreate", "I", [0x0012, 0x1112, 0x000F]),  # const/4 v0; const/4 v1; return v0
        SynthMethod(_ACT, "<init>", "V"),
    ]


def demo_apps() -> list[AppSpec]:
    notes = "Lcom/example/notes/MainActivity;"
    torch = "Lcom/example/torch/MainActivity;"
    wall = "Lcom/example/wallpaper/Loader;"
    tm, sms = "Landroid/telephony/TelephonyManager;", "Landroid/telephony/SmsManager;"
    # invoke-virtual, move-result-object, packed-switch (to +4), return-void, then the payload
    payload = [0x106E, 0x0000, 0x0000, 0x000C, 0x002B, 0x0004, 0x0000, 0x000E,
               0x0100, 0x0001, 0x0000, 0x0000, 0x0003, 0x0000]
    return [
        AppSpec("com.example.notes", 1, "1.0", ["android.permission.INTERNET"],
                _benign_methods(notes), ["Notes"], [_MAIN]),
        AppSpec("com.example.notes", 2, "1.1",
                ["android.permission.INTERNET", "android.permission.WRITE_EXTERNAL_STORAGE"],
                _benign_methods(notes) + [SynthMethod(notes, "save", "V", [0x001A, 0x0000, 0x000E])],
                ["Notes", "notes.db"], [_MAIN], binary_manifest=False),
        AppSpec("com.example.torch", 1, "2.0",
                ["android.permission.CAMERA", "android.permission.READ_PHONE_STATE",
                 "android.permission.SEND_SMS", "android.permission.RECEIVE_BOOT_COMPLETED"],
                _benign_methods(torch) + [
                    SynthMethod(torch, "leak", "V", [0x106E, 0x0004, 0x0001, 0x000C, 0x106E, 0x0005, 0x0001, 0x000E]),
                    SynthMethod(tm, "getDeviceId", "L"),
                    SynthMethod(sms, "sendTextMessage", "V"),
                ],
                ["/system/bin/su", "chmod 777 /data/local/tmp/x", "mount -o remount,rw /system"],
                [_MAIN, ("receiver", ".BootReceiver", ["android.intent.action.BOOT_COMPLETED"])]),
        AppSpec("com.example.wallpaper", 3, "3.0",
                ["android.permission.INTERNET", "android.permission.SET_WALLPAPER"],
                _benign_methods(wall) + [SynthMethod(wall, "fetch", "V", payload)],
                ["wallpapers", "chmod 755 /data/data/com.example.wallpaper/files/p"],
                [_MAIN, ("service", ".Sync", [])]),
    ]


# syscall traces and resource samples per (package, version)
_TRACES = {
    ("com.example.notes", 1): "open, read, write, fstat, read, close",
    ("com.example.notes", 2): "open, read, write, fstat, read, write, close",
    ("com.example.torch", 1): "open, read, fork, execve, fork, execve, socket, connect, write, fork, close",
    ("com.example.wallpaper", 3): "open, socket, connect, read, write, close",
}
_SAMPLE_ROWS = {
    ("com.example.notes", 1): [(2.5, 2.0, 0.5, 8192, 2048, 6144), (3.5, 3.0, 0.5, 8192, 1024, 7168)],
    ("com.example.notes", 2): [(2.0, 1.5, 0.5, 8192, 2048, 6144), (4.0, 3.5, 0.5, 8192, 2048, 6144)],
    ("com.example.torch", 1): [(40.0, 25.0, 15.0, 16384, 512, 15872), (70.0, 45.0, 25.0, 16384, 256, 16128),
                                (65.0, 40.0, 25.0, 16384, 128, 16256)],
    ("com.example.wallpaper", 3): [(10.0, 8.0, 2.0, 8192, 4096, 4096)],
}
_METRICS = ("total_cpu", "user_cpu", "kernel_cpu", "total_heap_size", "total_heap_free", "total_heap_allocated")


def _samples_csv(rows) -> str:
    return ",".join(_METRICS) + "\n" + "".join(",".join(repr(float(v)) for v in row) + "\n" for row in rows)


def write_corpus(out: str | Path) -> dict:
    """Write the demo corpus (APKs, traces, registry, keys, config) under ``out``.

    Returns an index of what was written, also saved as ``index.json``.
    """
    out = Path(out)
    for sub in ("apks", "traces", "samples"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    keys = {pid: demo_seed(pid).hex() for pid, _ in PARTICIPANTS}
    registry = Registry(Participant(pid, role, public_key_bytes(signing_key_from_seed(demo_seed(pid))))
                        for pid, role in PARTICIPANTS)
    registry.save(out / "registry.json")
    _dump(out / "keys.json", keys)

    index = []
    wallpaper_dex = None
    for app in demo_apps():
        stem = f"{app.package}-{app.version_code}"
        apk = app.apk()
        (out / "apks" / f"{stem}.apk").write_bytes(apk)
        (out / "traces" / f"{stem}.txt").write_text(_TRACES[(app.package, app.version_code)] + "\n")
        (out / "samples" / f"{stem}.csv").write_text(_samples_csv(_SAMPLE_ROWS[(app.package, app.version_code)]))
        if app.package == "com.example.wallpaper":
            wallpaper_dex = hashlib.sha256(build_dex(app.methods, app.strings)).hexdigest()
        index.append({"app_id": app.package, "version_code": app.version_code,
                      "apk": f"apks/{stem}.apk", "trace": f"traces/{stem}.txt",
                      "samples": f"samples/{stem}.csv"})

    engines = [
        {"id": "de-sig", "kind": "Signature", "threshold": 0.5,
         "blacklist": [{"digest": wallpaper_dex, "family": "Dropper.Wallfetch"}]},
        {"id": "de-perm", "kind": "Heuristic", "threshold": 0.5, "weights": {
            "perm:SEND_SMS": 2.0, "perm:READ_PHONE_STATE": 1.5, "perm:RECEIVE_BOOT_COMPLETED": 0.5,
            "perm:INTERNET": 0.2, "perm:SET_WALLPAPER": 2.5,
            "api:Landroid/telephony/TelephonyManager;->getDeviceId": 1.0,
            "api:Landroid/telephony/SmsManager;->sendTextMessage": 1.0,
            "cmd:/system/bin/su": 1.5, "cmd:chmod": 0.5, "cmd:mount": 0.5,
            "__bias": -3.0}},
        {"id": "de-behav", "kind": "Heuristic", "threshold": 0.5, "weights": {
            "sys2:fork|execve": 1.2, "sys2:socket|connect": 0.8,
            "res:total_cpu.mean": 0.05, "res:kernel_cpu.max": 0.05,
            "__bias": -3.0}},
    ]
    _dump(out / "watchlists.json", {
        "api_watchlist": [{"class_contains": c, "method": m} for c, m in
                          (("Landroid/telephony/TelephonyManager;", "getDeviceId"),
                           ("Landroid/telephony/TelephonyManager;", "getSubscriberId"),
                           ("Landroid/telephony/SmsManager;", "sendTextMessage"),
                           ("Landroid/content/pm/PackageManager;", "installPackage"))],
        "command_watchlist": ["/system/bin/su", "chmod", "mount", "chown"],
    })
    _dump(out / "scenario.json", {"seed": 7, "drop_probability": 0.0, "max_delay_ticks": 3,
                                  "faulty_engines": [], "engines": ["de-behav", "de-perm", "de-sig"]})
    _dump(out / "config.json", {
        "store": "store", "registry": "registry.json", "keys": "keys.json",
        "extractors": EXTRACTORS, "engines": engines, "watchlists": "watchlists.json",
        "ngram_n": 2, "scenario": "scenario.json", "determinant_threshold": 0.5,
    })
    _dump(out / "index.json", {"apps": index})
    return {"apps": index}


def _dump(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
