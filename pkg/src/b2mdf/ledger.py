"""Hash-linked append-only chains, one per (app, chain kind).

Every block is serialized as canonical JSON (sorted keys, no whitespace, bytes
as lowercase hex) so digests are reproducible byte-for-byte. Blocks are signed
with Ed25519 over the SHA-256 digest of the canonical header.
"""
from __future__ import annotations

import enum
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Iterator

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .errors import (
    InvalidParticipantCount,
    MissingChain,
    SignatureFailure,
    StaleChain,
    Unauthorized,
    UnencodableValue,
)

ZERO_HASH = bytes(32)


class ChainKind(str, enum.Enum):
    DIPB = "DIPB"
    DEPB = "DEPB"
    CB = "CB"


class Role(str, enum.Enum):
    FEATURE_EXTRACTOR = "FeatureExtractor"
    DETECTION_ENGINE = "DetectionEngine"
    THIRD_PARTY = "ThirdParty"
    DETERMINANT_AGENT = "DeterminantAgent"


class Action(str, enum.Enum):
    APPEND = "Append"
    READ = "Read"


class Reason(str, enum.Enum):
    LINK_MISMATCH = "LinkMismatch"
    PAYLOAD_HASH_MISMATCH = "PayloadHashMismatch"
    BAD_SIGNATURE = "BadSignature"
    UNAUTHORIZED_AUTHOR = "UnauthorizedAuthor"
    HEIGHT_GAP = "HeightGap"
    QUORUM_SHORTFALL = "QuorumShortfall"
    # stored record is not a canonical block encoding
    MALFORMED = "Malformed"


# ---------------------------------------------------------------------------
# canonical encoding

def _prepare(value: Any) -> Any:
    if value is None or isinstance(value, (bool, str)):
        return value
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        if not math.isfinite(value):
            raise UnencodableValue(f"non-finite number {value!r}")
        return value
    if isinstance(value, (bytes, bytearray, memoryview)):
        return bytes(value).hex()
    if isinstance(value, enum.Enum):
        return _prepare(value.value)
    if isinstance(value, (list, tuple)):
        return [_prepare(v) for v in value]
    if isinstance(value, dict):
        out = {}
        for k, v in value.items():
            if not isinstance(k, str):
                raise UnencodableValue(f"record key must be a string, got {type(k).__name__}")
            out[k] = _prepare(v)
        return out
    raise UnencodableValue(f"cannot encode {type(value).__name__}")


def canonical_bytes(payload: Any) -> bytes:
    """Deterministic JSON encoding of a structured value.

    Keys are sorted by code point, which coincides with UTF-8 byte order.
    """
    try:
        text = json.dumps(
            _prepare(payload),
            sort_keys=True,
            separators=(",", ":"),
            ensure_ascii=False,
            allow_nan=False,
        )
    except (ValueError, RecursionError) as exc:
        raise UnencodableValue(str(exc)) from exc
    try:
        return text.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise UnencodableValue("string is not valid Unicode") from exc


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


# ---------------------------------------------------------------------------
# identities and keys

def signing_key_from_seed(seed: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(seed)


def public_key_bytes(key: Ed25519PrivateKey) -> bytes:
    return key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)


@dataclass(frozen=True)
class Participant:
    id: str
    role: Role
    public_key: bytes

    @cached_property
    def verifier(self) -> Ed25519PublicKey:
        return Ed25519PublicKey.from_public_bytes(self.public_key)

    def verify(self, signature: bytes, message: bytes) -> bool:
        try:
            self.verifier.verify(signature, message)
        except (InvalidSignature, ValueError):
            return False
        return True


class Registry:
    """Known participants keyed by id."""

    def __init__(self, participants: Iterable[Participant] = ()):
        self._by_id: dict[str, Participant] = {}
        for p in participants:
            self.add(p)

    def add(self, participant: Participant) -> None:
        if participant.id in self._by_id:
            raise ValueError(f"duplicate participant id {participant.id!r}")
        self._by_id[participant.id] = participant

    def get(self, participant_id: str) -> Participant | None:
        return self._by_id.get(participant_id)

    def __getitem__(self, participant_id: str) -> Participant:
        return self._by_id[participant_id]

    def __contains__(self, participant_id: object) -> bool:
        return participant_id in self._by_id

    def __iter__(self) -> Iterator[Participant]:
        return iter(sorted(self._by_id.values(), key=lambda p: p.id))

    def __len__(self) -> int:
        return len(self._by_id)

    def with_role(self, role: Role) -> list[Participant]:
        return [p for p in self if p.role == role]

    def to_json(self) -> list[dict]:
        return [{"id": p.id, "role": p.role.value, "public_key": p.public_key.hex()} for p in self]

    @classmethod
    def from_json(cls, items: list[dict]) -> "Registry":
        return cls(
            Participant(item["id"], Role(item["role"]), bytes.fromhex(item["public_key"]))
            for item in items
        )

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_bytes(canonical_bytes(self.to_json()) + b"\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Registry":
        return cls.from_json(json.loads(Path(path).read_text("utf-8")))


# ---------------------------------------------------------------------------
# authorization

_APPEND_RIGHTS = {
    Role.FEATURE_EXTRACTOR: {ChainKind.DIPB},
    Role.DETECTION_ENGINE: {ChainKind.DEPB, ChainKind.CB},
    Role.THIRD_PARTY: set(),
    Role.DETERMINANT_AGENT: set(),
}


def authorize(role: Role, chain_kind: ChainKind, action: Action) -> bool:
    # read permission is public to registered participants
    if Action(action) is Action.READ:
        return True
    return ChainKind(chain_kind) in _APPEND_RIGHTS[Role(role)]


def quorum_threshold(n: int) -> int:
    """Smallest signature count that is at least two thirds of ``n``."""
    if n < 1:
        raise InvalidParticipantCount(f"consortium size must be >= 1, got {n}")
    return (2 * n + 2) // 3


# ---------------------------------------------------------------------------
# blocks

@dataclass(frozen=True)
class BlockHeader:
    app_id: str
    chain_kind: ChainKind
    height: int
    prev_hash: bytes
    payload_hash: bytes
    author_id: str
    timestamp: int

    def to_json(self) -> dict:
        return {
            "app_id": self.app_id,
            "author_id": self.author_id,
            "chain_kind": self.chain_kind.value,
            "height": self.height,
            "payload_hash": self.payload_hash.hex(),
            "prev_hash": self.prev_hash.hex(),
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "BlockHeader":
        _expect_keys(obj, {"app_id", "author_id", "chain_kind", "height",
                           "payload_hash", "prev_hash", "timestamp"})
        return cls(
            app_id=_typed(obj["app_id"], str),
            chain_kind=ChainKind(obj["chain_kind"]),
            height=_typed(obj["height"], int),
            prev_hash=_digest(obj["prev_hash"]),
            payload_hash=_digest(obj["payload_hash"]),
            author_id=_typed(obj["author_id"], str),
            timestamp=_typed(obj["timestamp"], int),
        )

    def digest(self) -> bytes:
        return sha256(canonical_bytes(self.to_json()))


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    payload: bytes
    signatures: tuple[tuple[str, bytes], ...] = ()

    def digest(self) -> bytes:
        return self.header.digest()

    @cached_property
    def content(self) -> dict:
        return json.loads(self.payload)

    def to_json(self) -> dict:
        return {
            "header": self.header.to_json(),
            "payload": self.content,
            "signatures": [{"id": pid, "sig": sig.hex()} for pid, sig in self.signatures],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Block":
        _expect_keys(obj, {"header", "payload", "signatures"})
        sigs = signatures_from_json(obj["signatures"])
        return cls(BlockHeader.from_json(obj["header"]), canonical_bytes(obj["payload"]), sigs)

    def serialize(self) -> bytes:
        return canonical_bytes(self.to_json())

    @classmethod
    def deserialize(cls, line: bytes) -> "Block":
        """Strict inverse of :meth:`serialize`; rejects non-canonical input."""
        obj = json.loads(line.decode("utf-8"))
        block = cls.from_json(_typed(obj, dict))
        if block.serialize() != line:
            raise ValueError("record is not in canonical form")
        return block


def block_digest(block: Block) -> bytes:
    return block.digest()


def signatures_from_json(items: Any) -> tuple[tuple[str, bytes], ...]:
    sigs = []
    for item in _typed(items, list):
        _expect_keys(item, {"id", "sig"})
        sig = bytes.fromhex(_typed(item["sig"], str))
        if len(sig) != 64 or sig.hex() != item["sig"]:
            raise ValueError("signature must be 128 lowercase hex characters")
        sigs.append((_typed(item["id"], str), sig))
    return tuple(sigs)


def _expect_keys(obj: Any, keys: set[str]) -> None:
    if not isinstance(obj, dict) or set(obj) != keys:
        raise ValueError(f"expected record with keys {sorted(keys)}")


def _typed(value: Any, kind: type) -> Any:
    if kind is int and isinstance(value, bool):
        raise ValueError("expected integer")
    if not isinstance(value, kind):
        raise ValueError(f"expected {kind.__name__}")
    return value


def _digest(text: Any) -> bytes:
    raw = bytes.fromhex(_typed(text, str))
    if len(raw) != 32 or raw.hex() != text:
        raise ValueError("digest must be 64 lowercase hex characters")
    return raw


# ---------------------------------------------------------------------------
# chains

@dataclass
class Chain:
    app_id: str
    kind: ChainKind
    blocks: list[Block] = field(default_factory=list)
    # (height, detail) of the first stored record that failed to decode
    damaged: tuple[int, str] | None = None

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def tip_digest(self) -> bytes:
        return self.blocks[-1].digest() if self.blocks else ZERO_HASH

    def next_timestamp(self) -> int:
        """Logical clock: one past the latest block's timestamp."""
        return self.blocks[-1].header.timestamp + 1 if self.blocks else 0

    def to_jsonl(self) -> bytes:
        return b"".join(b.serialize() + b"\n" for b in self.blocks)

    @classmethod
    def from_jsonl(cls, app_id: str, kind: ChainKind, data: bytes) -> "Chain":
        chain = cls(app_id, ChainKind(kind))
        if not data:
            return chain
        lines = data.split(b"\n")
        if lines[-1] == b"":
            lines.pop()
        else:
            chain.damaged = (len(lines) - 1, "missing line terminator")
            lines = lines[:-1]
        for i, line in enumerate(lines):
            try:
                chain.blocks.append(Block.deserialize(line))
            except (ValueError, UnicodeDecodeError, RecursionError) as exc:
                chain.damaged = (i, str(exc) or type(exc).__name__)
                del chain.blocks[i:]
                break
        return chain


@dataclass(frozen=True)
class ValidationReport:
    valid: bool
    first_bad_height: int | None = None
    reason: Reason | None = None
    detail: str = ""

    def to_json(self) -> dict:
        return {
            "valid": self.valid,
            "first_bad_height": self.first_bad_height,
            "reason": self.reason.value if self.reason else None,
            "detail": self.detail,
        }


def _fail(height: int, reason: Reason, detail: str = "") -> ValidationReport:
    return ValidationReport(False, height, reason, detail)


def _check_links(chain: Chain) -> ValidationReport:
    prev = ZERO_HASH
    for i, block in enumerate(chain.blocks):
        h = block.header
        if h.height != i:
            return _fail(i, Reason.HEIGHT_GAP, f"height {h.height} at position {i}")
        if h.prev_hash != prev or h.app_id != chain.app_id or h.chain_kind != chain.kind:
            return _fail(i, Reason.LINK_MISMATCH)
        if sha256(block.payload) != h.payload_hash:
            return _fail(i, Reason.PAYLOAD_HASH_MISMATCH)
        prev = block.digest()
    if chain.damaged is not None:
        return _fail(chain.damaged[0], Reason.MALFORMED, chain.damaged[1])
    return ValidationReport(True)


def verify_chain(chain: Chain, registry: Registry, quorum_n: int | None = None) -> ValidationReport:
    """Audit a chain, returning the first failing block.

    Per block, in order: height continuity, prev-hash linkage, payload hash,
    signatures, author authorization, and (CB only) the signature quorum.
    ``quorum_n`` defaults to the number of registered detection engines.
    """
    if chain.kind is ChainKind.CB:
        n = quorum_n if quorum_n is not None else len(registry.with_role(Role.DETECTION_ENGINE))
        need = quorum_threshold(n) if n >= 1 else None
    prev = ZERO_HASH
    for i, block in enumerate(chain.blocks):
        h = block.header
        if h.height != i:
            return _fail(i, Reason.HEIGHT_GAP, f"height {h.height} at position {i}")
        if h.prev_hash != prev or h.app_id != chain.app_id or h.chain_kind != chain.kind:
            return _fail(i, Reason.LINK_MISMATCH)
        if sha256(block.payload) != h.payload_hash:
            return _fail(i, Reason.PAYLOAD_HASH_MISMATCH)
        digest = block.digest()

        signer_ids = [pid for pid, _ in block.signatures]
        if len(set(signer_ids)) != len(signer_ids):
            return _fail(i, Reason.BAD_SIGNATURE, "duplicate signer")
        if h.author_id not in signer_ids:
            return _fail(i, Reason.BAD_SIGNATURE, "author signature missing")
        if chain.kind is not ChainKind.CB and len(signer_ids) != 1:
            return _fail(i, Reason.BAD_SIGNATURE, "private-chain blocks carry only the author's signature")
        for pid, sig in block.signatures:
            signer = registry.get(pid)
            if signer is None or not signer.verify(sig, digest):
                return _fail(i, Reason.BAD_SIGNATURE, f"signature by {pid!r} does not verify")

        for pid in signer_ids:
            if not authorize(registry[pid].role, chain.kind, Action.APPEND):
                return _fail(i, Reason.UNAUTHORIZED_AUTHOR, pid)

        if chain.kind is ChainKind.CB and (need is None or len(signer_ids) < need):
            return _fail(i, Reason.QUORUM_SHORTFALL, f"{len(signer_ids)} signatures, need {need}")
        prev = digest
    if chain.damaged is not None:
        return _fail(chain.damaged[0], Reason.MALFORMED, chain.damaged[1])
    return ValidationReport(True)


def next_header(chain: Chain, payload: Any, author_id: str, timestamp: int) -> tuple[BlockHeader, bytes]:
    """Header and canonical payload bytes for the block that would extend ``chain``."""
    body = canonical_bytes(payload)
    header = BlockHeader(
        app_id=chain.app_id,
        chain_kind=chain.kind,
        height=len(chain.blocks),
        prev_hash=chain.tip_digest,
        payload_hash=sha256(body),
        author_id=author_id,
        timestamp=timestamp,
    )
    return header, body


def sign(key: Ed25519PrivateKey, digest: bytes) -> bytes:
    try:
        return key.sign(digest)
    except Exception as exc:  # backend failures only
        raise SignatureFailure(str(exc)) from exc


def commit_block(chain: Chain, block: Block, author: Participant) -> Block:
    """Attach a fully signed block, re-checking authorization and linkage."""
    if not authorize(author.role, chain.kind, Action.APPEND):
        raise Unauthorized(author.id, author.role.value, chain.kind.value)
    report = _check_links(chain)
    if not report.valid:
        raise StaleChain(f"chain {chain.app_id}/{chain.kind.value} fails verification: {report.reason.value}")
    h = block.header
    if h.height != len(chain.blocks) or h.prev_hash != chain.tip_digest:
        raise StaleChain("block does not extend the current tip")
    if h.app_id != chain.app_id or h.chain_kind != chain.kind or h.author_id != author.id:
        raise StaleChain("block header does not belong to this chain")
    chain.blocks.append(block)
    return block


def append_block(
    chain: Chain,
    payload: Any,
    author: Participant,
    signing_key: Ed25519PrivateKey,
    timestamp: int,
) -> Block:
    if not authorize(author.role, chain.kind, Action.APPEND):
        raise Unauthorized(author.id, author.role.value, chain.kind.value)
    header, body = next_header(chain, payload, author.id, timestamp)
    digest = header.digest()
    sig = sign(signing_key, digest)
    if not author.verify(sig, digest):
        raise SignatureFailure(f"signing key does not match registered key of {author.id!r}")
    return commit_block(chain, Block(header, body, ((author.id, sig),)), author)


def get_blocks(chain: Chain, kind: str | None = None, version: int | None = None) -> list[Block]:
    out = []
    for block in chain.blocks:
        content = block.content
        if not isinstance(content, dict):
            continue
        if kind is not None and content.get("kind") != kind:
            continue
        if version is not None and content.get("version_code") != version:
            continue
        out.append(block)
    return out


# ---------------------------------------------------------------------------
# persistence

class ChainStore:
    """All chains of a deployment; ``root=None`` keeps everything in memory.

    On disk each chain lives at ``<root>/<app_id>/<kind>.chain`` as JSON Lines.
    """

    SUFFIX = ".chain"

    def __init__(self, root: str | os.PathLike | None = None):
        self.root = Path(root) if root is not None else None
        self._chains: dict[tuple[str, ChainKind], Chain] = {}

    def _path(self, app_id: str, kind: ChainKind) -> Path:
        assert self.root is not None
        return self.root / app_id / f"{kind.value}{self.SUFFIX}"

    def exists(self, app_id: str, kind: ChainKind) -> bool:
        kind = ChainKind(kind)
        if (app_id, kind) in self._chains:
            return True
        return self.root is not None and self._path(app_id, kind).is_file()

    def get(self, app_id: str, kind: ChainKind, create: bool = False) -> Chain:
        kind = ChainKind(kind)
        key = (app_id, kind)
        if key not in self._chains:
            if self.root is not None and self._path(app_id, kind).is_file():
                self._chains[key] = Chain.from_jsonl(app_id, kind, self._path(app_id, kind).read_bytes())
            elif create:
                _check_app_id(app_id)
                self._chains[key] = Chain(app_id, kind)
            else:
                raise MissingChain(app_id, kind.value)
        return self._chains[key]

    def append(self, app_id: str, kind: ChainKind, payload: Any, author: Participant,
               signing_key: Ed25519PrivateKey, timestamp: int | None = None) -> Block:
        chain = self.get(app_id, kind, create=True)
        ts = chain.next_timestamp() if timestamp is None else timestamp
        block = append_block(chain, payload, author, signing_key, ts)
        self._persist(chain, block)
        return block

    def commit(self, block: Block, author: Participant) -> Block:
        chain = self.get(block.header.app_id, block.header.chain_kind, create=True)
        commit_block(chain, block, author)
        self._persist(chain, block)
        return block

    def _persist(self, chain: Chain, block: Block) -> None:
        if self.root is None:
            return
        path = self._path(chain.app_id, chain.kind)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "ab") as fh:
            fh.write(block.serialize() + b"\n")

    def apps(self) -> list[str]:
        names = {app for app, _ in self._chains}
        if self.root is not None and self.root.is_dir():
            for child in self.root.iterdir():
                if child.is_dir() and any(child.glob(f"*{self.SUFFIX}")):
                    names.add(child.name)
        return sorted(names)

    def chains(self) -> list[Chain]:
        out = []
        for app in self.apps():
            for kind in ChainKind:
                if self.exists(app, kind):
                    out.append(self.get(app, kind))
        return out

    def resolve(self, app_id: str, digest: bytes) -> Block | None:
        """Find the block of ``app_id`` (any chain kind) with the given digest."""
        for kind in ChainKind:
            if not self.exists(app_id, kind):
                continue
            for block in self.get(app_id, kind).blocks:
                if block.digest() == digest:
                    return block
        return None


def _check_app_id(app_id: str) -> None:
    if not app_id or app_id in {".", ".."} or "/" in app_id or "\\" in app_id or "\0" in app_id:
        raise ValueError(f"unusable app id {app_id!r}")
