from .container import ApkContainer, ZipEntry, open_apk
from .dex import CodeItem, DexFile, MethodRef, merge, parse_dex, read_uleb128
from .features import (
    DEFAULT_API_WATCHLIST,
    DEFAULT_COMMAND_WATCHLIST,
    ApiCallFeature,
    CommandFeature,
    OpcodeSequenceFeature,
    PermissionFeature,
    Watchlists,
    extract_api_calls,
    extract_commands,
    extract_opcode_sequence,
    extract_permissions,
    pattern_key,
)
from .manifest import ManifestInfo, parse_manifest
from .opcodes import WIDTHS, decode_opcodes

__all__ = [
    "ApkContainer", "ZipEntry", "open_apk",
    "CodeItem", "DexFile", "MethodRef", "merge", "parse_dex", "read_uleb128",
    "DEFAULT_API_WATCHLIST", "DEFAULT_COMMAND_WATCHLIST", "Watchlists", "pattern_key",
    "ApiCallFeature", "CommandFeature", "OpcodeSequenceFeature", "PermissionFeature",
    "extract_api_calls", "extract_commands", "extract_opcode_sequence", "extract_permissions",
    "ManifestInfo", "parse_manifest", "WIDTHS", "decode_opcodes",
]
