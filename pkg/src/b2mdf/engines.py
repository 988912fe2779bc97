"""Detection engines: feature vectors in, per-version malice scores out.

Two reference engines ship: a digest blacklist (signature) and a logistic
linear scorer (heuristic). Anything that maps a :class:`FeatureVector` to a
:class:`ScoreRecord` can stand in for the heuristic one.
"""
from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable

from .errors import (
    ConflictingBlocks,
    EngineError,
    MissingFeatures,
    NonFiniteScore,
    UnknownFeatureKey,
)
from .ledger import Block, ChainKind, ChainStore, canonical_bytes, get_blocks

BIAS_KEY = "__bias"


class EngineKind(str, enum.Enum):
    SIGNATURE = "Signature"
    HEURISTIC = "Heuristic"


class Verdict(str, enum.Enum):
    MALICIOUS = "Malicious"
    BENIGN = "Benign"

    def inverted(self) -> "Verdict":
        return Verdict.BENIGN if self is Verdict.MALICIOUS else Verdict.MALICIOUS


@dataclass(frozen=True)
class FeatureVector:
    entries: tuple[tuple[str, float], ...]
    schema_id: str

    def as_dict(self) -> dict[str, float]:
        return dict(self.entries)

    def __getitem__(self, key: str) -> float:
        return self.as_dict()[key]


@dataclass(frozen=True)
class ScoreRecord:
    engine_id: str
    app_id: str
    version_code: int
    malice_score: float
    verdict: Verdict
    evidence: tuple[bytes, ...]
    detail: str = ""
    threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.malice_score <= 1.0:
            raise EngineError(f"malice score {self.malice_score} outside [0, 1]")
        expected = Verdict.MALICIOUS if self.malice_score >= self.threshold else Verdict.BENIGN
        if Verdict(self.verdict) is not expected:
            raise EngineError("verdict disagrees with score and threshold")
        if self.verdict is Verdict.MALICIOUS and not self.evidence:
            raise EngineError("a Malicious verdict needs at least one evidence digest")

    def to_payload(self) -> dict:
        return {
            "kind": "score",
            "engine_id": self.engine_id,
            "app_id": self.app_id,
            "version_code": self.version_code,
            "malice_score": float(self.malice_score),
            "verdict": self.verdict.value,
            "threshold": float(self.threshold),
            "evidence": list(self.evidence),
            "detail": self.detail,
        }

    @classmethod
    def from_payload(cls, obj: dict) -> "ScoreRecord":
        return cls(
            engine_id=obj["engine_id"],
            app_id=obj["app_id"],
            version_code=obj["version_code"],
            malice_score=obj["malice_score"],
            verdict=Verdict(obj["verdict"]),
            evidence=tuple(bytes.fromhex(h) for h in obj["evidence"]),
            detail=obj["detail"],
            threshold=obj["threshold"],
        )


@dataclass(frozen=True)
class EngineConfig:
    engine_id: str
    kind: EngineKind
    threshold: float = 0.5
    weights: dict[str, float] = field(default_factory=dict)
    blacklist: tuple[bytes, ...] = ()
    # blacklisted digest -> family name, surfaced as "family:<name>"
    families: dict[bytes, str] = field(default_factory=dict)
    family: str | None = None
    schema: tuple[str, ...] | None = None

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise EngineError(f"{self.engine_id}: threshold must lie in (0, 1)")
        if EngineKind(self.kind) is EngineKind.SIGNATURE and self.weights:
            raise EngineError(f"{self.engine_id}: signature engines take a blacklist, not weights")
        if EngineKind(self.kind) is EngineKind.HEURISTIC and self.blacklist:
            raise EngineError(f"{self.engine_id}: heuristic engines take weights, not a blacklist")

    def feature_schema(self) -> tuple[str, ...]:
        if self.schema is not None:
            return tuple(self.schema)
        return tuple(sorted(k for k in self.weights if k != BIAS_KEY))

    @classmethod
    def from_json(cls, obj: dict) -> "EngineConfig":
        blacklist, families = [], {}
        for item in obj.get("blacklist", []):
            if isinstance(item, dict):
                digest = bytes.fromhex(item["digest"])
                if item.get("family"):
                    families[digest] = item["family"]
            else:
                digest = bytes.fromhex(item)
            blacklist.append(digest)
        schema = obj.get("schema")
        return cls(
            engine_id=obj["id"],
            kind=EngineKind(obj["kind"]),
            threshold=float(obj.get("threshold", 0.5)),
            weights={k: float(v) for k, v in obj.get("weights", {}).items()},
            blacklist=tuple(blacklist),
            families=families,
            family=obj.get("family"),
            schema=None if schema is None else tuple(schema),
        )


# ---------------------------------------------------------------------------
# feature assembly

def _schema_id(schema: Iterable[str]) -> str:
    return hashlib.sha256(canonical_bytes(sorted(schema))).hexdigest()[:16]


def _permission_match(perms: list[str], name: str) -> bool:
    return any(p == name or p.endswith("." + name) for p in perms)


def _lookup(key: str, by_kind: dict[str, dict]) -> float:
    prefix, sep, rest = key.partition(":")
    if not sep:
        raise UnknownFeatureKey(key)
    if prefix == "perm":
        block = by_kind.get("permissions")
        return 1 if block and _permission_match(block["permissions"], rest) else 0
    if prefix == "cmd":
        block = by_kind.get("commands")
        hits = {h["command"]: h["count"] for h in block["hits"]} if block else {}
        return hits.get(rest, 0)
    if prefix == "api":
        block = by_kind.get("api_calls")
        hits = {h["pattern"]: h["count"] for h in block["hits"]} if block else {}
        return hits.get(rest, 0)
    if prefix == "op":
        try:
            op = int(rest, 16)
        except ValueError:
            raise UnknownFeatureKey(key) from None
        if not 0 <= op <= 0xFF:
            raise UnknownFeatureKey(key)
        block = by_kind.get("opcodes")
        return block["histogram"][op] if block else 0
    if prefix.startswith("sys") and prefix[3:].isdigit():
        block = by_kind.get("syscall_ngrams")
        if not block or block["n"] != int(prefix[3:]):
            return 0
        return block["counts"].get(rest, 0)
    if prefix == "res":
        block = by_kind.get("resources")
        return block["values"].get(rest, 0) if block else 0
    raise UnknownFeatureKey(key)


def assemble_feature_vector(dipb_blocks: list[Block], schema: Iterable[str]) -> FeatureVector:
    """Project feature blocks of one (app, version) onto an ordered key schema.

    Keys are ``perm:<NAME>``, ``cmd:<token>``, ``api:<pattern>``,
    ``op:<hex>``, ``sys<n>:<a>|<b>...`` and ``res:<metric>.<agg>``. Missing
    features read as 0.
    """
    by_kind: dict[str, dict] = {}
    identity = None
    for block in dipb_blocks:
        content = block.content
        kind = content.get("kind")
        ident = (content.get("app_id"), content.get("version_code"))
        if identity is not None and ident != identity:
            raise ConflictingBlocks(f"blocks span several app versions: {identity} and {ident}")
        identity = ident
        if kind in by_kind:
            raise ConflictingBlocks(f"two {kind!r} blocks for version {ident[1]}")
        by_kind[kind] = content
    keys = sorted(set(schema))
    entries = tuple((k, _lookup(k, by_kind)) for k in keys)
    return FeatureVector(entries, _schema_id(keys))


# ---------------------------------------------------------------------------
# engines

def logistic(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def signature_scan(apk_digest: bytes | None, dex_digest: bytes | None, cfg: EngineConfig, *,
                   app_id: str = "", version_code: int = 0,
                   evidence: Iterable[bytes] = ()) -> ScoreRecord:
    """Score 1.0 when either digest is blacklisted, 0.0 otherwise."""
    if cfg.kind is not EngineKind.SIGNATURE:
        raise EngineError(f"{cfg.engine_id} is not a signature engine")
    blacklist = set(cfg.blacklist)
    hit = None
    for label, digest in (("apk", apk_digest), ("dex", dex_digest)):
        if digest is not None and digest in blacklist:
            hit = (label, digest)
            break
    if hit is None:
        score, detail = 0.0, "no blacklist hit"
    else:
        score = 1.0
        family = cfg.families.get(hit[1])
        detail = f"family:{family}" if family else f"blacklisted {hit[0]} digest {hit[1].hex()}"
    verdict = Verdict.MALICIOUS if score >= cfg.threshold else Verdict.BENIGN
    return ScoreRecord(cfg.engine_id, app_id, version_code, score, verdict,
                       tuple(evidence), detail, cfg.threshold)


def heuristic_score(v: FeatureVector, cfg: EngineConfig, *, app_id: str = "",
                    version_code: int = 0, evidence: Iterable[bytes] = ()) -> ScoreRecord:
    """logistic(w . v + bias); weights missing from ``cfg`` count as 0."""
    if cfg.kind is not EngineKind.HEURISTIC:
        raise EngineError(f"{cfg.engine_id} is not a heuristic engine")
    values = v.as_dict()
    unknown = sorted(k for k in cfg.weights if k != BIAS_KEY and k not in values)
    if unknown:
        raise UnknownFeatureKey(f"weights reference keys outside the schema: {unknown}")
    terms = [cfg.weights[k] * x for k, x in v.entries if k in cfg.weights]
    terms.append(cfg.weights.get(BIAS_KEY, 0.0))
    try:
        z = math.fsum(terms)
    except (OverflowError, ValueError):
        z = math.nan
    if not math.isfinite(z):
        raise NonFiniteScore(f"{cfg.engine_id}: w.v + bias is not finite")
    score = logistic(z)
    verdict = Verdict.MALICIOUS if score >= cfg.threshold else Verdict.BENIGN
    if verdict is Verdict.MALICIOUS and cfg.family:
        detail = f"family:{cfg.family}"
    else:
        detail = f"w.v+b={z:.6g}"
    return ScoreRecord(cfg.engine_id, app_id, version_code, score, verdict,
                       tuple(evidence), detail, cfg.threshold)


def _digest_field(blocks: list[Block], name: str) -> bytes | None:
    for block in blocks:
        value = block.content.get(name)
        if value:
            return bytes.fromhex(value)
    return None


def run_engine(engine: EngineConfig, ipb_store: ChainStore, app_id: str, version_code: int) -> ScoreRecord:
    """Score one app version from its DIPB feature blocks (read-only).

    Evidence is the digest of every feature block read.
    """
    chain = ipb_store.get(app_id, ChainKind.DIPB)
    blocks = get_blocks(chain, version=version_code)
    if not blocks:
        raise MissingFeatures(f"no feature blocks for {app_id} version {version_code}")
    evidence = tuple(b.digest() for b in blocks)
    if engine.kind is EngineKind.SIGNATURE:
        opcode_blocks = [b for b in blocks if b.content.get("kind") == "opcodes"]
        return signature_scan(
            _digest_field(opcode_blocks or blocks, "apk_sha256"),
            _digest_field(opcode_blocks, "dex_sha256"),
            engine, app_id=app_id, version_code=version_code, evidence=evidence,
        )
    vector = assemble_feature_vector(blocks, engine.feature_schema())
    return heuristic_score(vector, engine, app_id=app_id, version_code=version_code, evidence=evidence)
