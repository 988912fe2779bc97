"""Exception hierarchy shared by every layer.

Anything deriving from :class:`B2mdfError` is a *domain* error: the CLI maps it
to exit status 1 and reports ``type(err).__name__`` plus ``err.detail()``.
"""
from __future__ import annotations


class B2mdfError(Exception):
    def detail(self) -> dict:
        return {"message": str(self)}


# ledger

class UnencodableValue(B2mdfError):
    pass


class Unauthorized(B2mdfError):
    def __init__(self, participant: str, role: str, kind: str):
        super().__init__(f"{participant} ({role}) may not append to {kind}")
        self.participant, self.role, self.kind = participant, role, kind


class StaleChain(B2mdfError):
    pass


class SignatureFailure(B2mdfError):
    pass


class MissingChain(B2mdfError):
    def __init__(self, app_id: str, kind: str):
        super().__init__(f"no {kind} chain for {app_id}")
        self.app_id, self.kind = app_id, kind


class AppendRejected(B2mdfError):
    pass


# apk_static

class ApkError(B2mdfError):
    """Structured parse failure for APK, manifest, or DEX input."""


class NotAZip(ApkError):
    pass


class CrcMismatch(ApkError):
    def __init__(self, path: str):
        super().__init__(f"CRC-32 mismatch in {path!r}")
        self.path = path


class UnsupportedCompression(ApkError):
    def __init__(self, method: int, path: str = ""):
        super().__init__(f"unsupported compression method {method} for {path!r}")
        self.method, self.path = method, path


class CorruptEntry(ApkError):
    def __init__(self, path: str, reason: str):
        super().__init__(f"{path!r}: {reason}")
        self.path, self.reason = path, reason


class MissingManifest(ApkError):
    pass


class MalformedAxml(ApkError):
    def __init__(self, offset: int, reason: str):
        super().__init__(f"offset {offset:#x}: {reason}")
        self.offset, self.reason = offset, reason


class MalformedXml(ApkError):
    def __init__(self, line: int, reason: str = ""):
        super().__init__(f"line {line}: {reason}")
        self.line = line


class MissingPackage(ApkError):
    pass


class TruncatedVarint(ApkError):
    pass


class OverlongVarint(ApkError):
    pass


class BadMagic(ApkError):
    pass


class TruncatedFile(ApkError):
    def __init__(self, section: str):
        super().__init__(f"truncated in {section}")
        self.section = section


class IndexOutOfRange(ApkError):
    def __init__(self, table: str, index: int):
        super().__init__(f"{table}[{index}] out of range")
        self.table, self.index = table, index


class UnknownOpcode(ApkError):
    def __init__(self, value: int, offset: int):
        super().__init__(f"unknown opcode {value:#04x} at code unit {offset}")
        self.value, self.offset = value, offset


class TruncatedInstruction(ApkError):
    def __init__(self, offset: int):
        super().__init__(f"instruction at code unit {offset} overruns insns")
        self.offset = offset


# dynamic_features

class TraceError(B2mdfError):
    pass


class EmptyTrace(TraceError):
    pass


class BadToken(TraceError):
    def __init__(self, position: int, token: str):
        super().__init__(f"token {position} has embedded whitespace: {token!r}")
        self.position = position


class EmptyFile(TraceError):
    pass


class BadHeader(TraceError):
    pass


class RaggedRow(TraceError):
    def __init__(self, line: int):
        super().__init__(f"line {line}: wrong number of columns")
        self.line = line


class NonNumeric(TraceError):
    def __init__(self, line: int, column: str):
        super().__init__(f"line {line}: non-numeric value in column {column!r}")
        self.line, self.column = line, column


class NoSamples(TraceError):
    pass


# engines

class EngineError(B2mdfError):
    pass


class ConflictingBlocks(EngineError):
    pass


class UnknownFeatureKey(EngineError):
    pass


class NonFiniteScore(EngineError):
    pass


# consensus

class InvalidParticipantCount(B2mdfError):
    pass


class NoScoreRecord(B2mdfError):
    pass


# pipeline

class ConfigError(B2mdfError):
    pass


class AlreadyIngested(B2mdfError):
    pass


class VersionRegression(B2mdfError):
    pass


class DuplicateVersion(B2mdfError):
    pass


class MissingFeatures(B2mdfError):
    pass


class AlreadyScanned(B2mdfError):
    pass


class NoScores(B2mdfError):
    pass


class UnreadableStore(B2mdfError):
    pass
