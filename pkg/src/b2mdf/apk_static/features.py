"""The four static feature extractors and their ledger payloads."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .dex import DexFile
from .manifest import ManifestInfo
from .opcodes import decode_opcodes

DEFAULT_COMMAND_WATCHLIST = ("chmod", "mount", "/system/bin/su", "chown")

DEFAULT_API_WATCHLIST = (
    ("Landroid/telephony/TelephonyManager;", "getDeviceId"),
    ("Landroid/telephony/TelephonyManager;", "getSubscriberId"),
    ("Landroid/telephony/TelephonyManager;", "getLine1Number"),
    ("Landroid/telephony/SmsManager;", "sendTextMessage"),
    ("Landroid/content/pm/PackageManager;", "getInstalledPackages"),
    ("Landroid/content/pm/PackageManager;", "installPackage"),
)


def pattern_key(class_contains: str, method: str) -> str:
    return f"{class_contains}->{method}"


@dataclass(frozen=True)
class Watchlists:
    api: tuple[tuple[str, str], ...] = DEFAULT_API_WATCHLIST
    commands: tuple[str, ...] = DEFAULT_COMMAND_WATCHLIST

    @classmethod
    def load(cls, path: str | Path) -> "Watchlists":
        doc = json.loads(Path(path).read_text("utf-8"))
        api = doc.get("api_watchlist")
        cmds = doc.get("command_watchlist")
        return cls(
            api=DEFAULT_API_WATCHLIST if api is None
            else tuple((item["class_contains"], item["method"]) for item in api),
            commands=DEFAULT_COMMAND_WATCHLIST if cmds is None else tuple(cmds),
        )


@dataclass
class OpcodeSequenceFeature:
    app_id: str
    version_code: int
    opcodes: list[int]
    opcode_histogram: list[int] = field(default_factory=lambda: [0] * 256)

    def to_payload(self, apk_sha256: bytes | None = None, dex_sha256: bytes | None = None) -> dict:
        return {
            "kind": "opcodes",
            "app_id": self.app_id,
            "version_code": self.version_code,
            "apk_sha256": apk_sha256,
            "dex_sha256": dex_sha256,
            "opcodes": self.opcodes,
            "histogram": self.opcode_histogram,
        }


@dataclass
class PermissionFeature:
    app_id: str
    version_code: int
    permissions: list[str]

    def to_payload(self, apk_sha256: bytes | None = None) -> dict:
        return {"kind": "permissions", "app_id": self.app_id, "version_code": self.version_code,
                "apk_sha256": apk_sha256, "permissions": self.permissions}


@dataclass
class ApiCallFeature:
    app_id: str
    version_code: int
    hits: list[tuple[str, int]]

    def to_payload(self, apk_sha256: bytes | None = None) -> dict:
        return {"kind": "api_calls", "app_id": self.app_id, "version_code": self.version_code,
                "apk_sha256": apk_sha256,
                "hits": [{"pattern": p, "count": c} for p, c in self.hits]}


@dataclass
class CommandFeature:
    app_id: str
    version_code: int
    hits: list[tuple[str, int]]

    def to_payload(self, apk_sha256: bytes | None = None) -> dict:
        return {"kind": "commands", "app_id": self.app_id, "version_code": self.version_code,
                "apk_sha256": apk_sha256,
                "hits": [{"command": c, "count": n} for c, n in self.hits]}


def extract_opcode_sequence(dex: DexFile, app_id: str = "", version_code: int = 0) -> OpcodeSequenceFeature:
    # method order, then instruction order; no separator between methods
    opcodes: list[int] = []
    for item in dex.code_items:
        opcodes.extend(decode_opcodes(item.insns))
    histogram = [0] * 256
    for op in opcodes:
        histogram[op] += 1
    return OpcodeSequenceFeature(app_id, version_code, opcodes, histogram)


def extract_api_calls(dex: DexFile, watchlist=DEFAULT_API_WATCHLIST,
                      app_id: str = "", version_code: int = 0) -> ApiCallFeature:
    """Count method_ids entries matching each (class substring, method name) pattern.

    The method_ids table is deduplicated by the DEX format, so a reference
    invoked from many call sites counts once.
    """
    hits = []
    for class_contains, method in watchlist:
        n = sum(1 for ref in dex.method_refs
                if class_contains in ref.class_descriptor and ref.name == method)
        if n:
            hits.append((pattern_key(class_contains, method), n))
    return ApiCallFeature(app_id, version_code, hits)


def extract_commands(dex: DexFile, command_watchlist=DEFAULT_COMMAND_WATCHLIST,
                     app_id: str = "", version_code: int = 0) -> CommandFeature:
    hits = []
    for command in command_watchlist:
        n = sum(1 for s in dex.string_table if command in s)
        if n:
            hits.append((command, n))
    return CommandFeature(app_id, version_code, hits)


def extract_permissions(manifest: ManifestInfo) -> PermissionFeature:
    return PermissionFeature(manifest.package_name, manifest.version_code, list(dict.fromkeys(manifest.permissions)))
