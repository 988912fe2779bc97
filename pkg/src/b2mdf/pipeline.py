"""End-to-end lifecycle: ingest an APK, scan it, decide, export, audit.

Each stage is a plain function over a :class:`DeploymentConfig`; the CLI is a
thin wrapper. One invocation holds an advisory lock on the store directory.
"""
from __future__ import annotations

import contextlib
import fcntl
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from . import dynamic_features as dyn
from .apk_static import (
    Watchlists,
    extract_api_calls,
    extract_commands,
    extract_opcode_sequence,
    extract_permissions,
    merge,
    open_apk,
    parse_dex,
    parse_manifest,
)
from .consensus import (
    RoundOutcome,
    SimNetConfig,
    decision_from_block,
    latest_score,
    load_scenario,
    run_round,
)
from .engines import EngineConfig, run_engine
from .errors import (
    AlreadyIngested,
    AlreadyScanned,
    B2mdfError,
    ConfigError,
    DuplicateVersion,
    MissingChain,
    MissingFeatures,
    MissingManifest,
    NoScores,
    UnreadableStore,
    VersionRegression,
)
from .ledger import (
    Block,
    BlockHeader,
    Chain,
    ChainKind,
    ChainStore,
    Reason,
    Registry,
    Role,
    ValidationReport,
    ZERO_HASH,
    canonical_bytes,
    get_blocks,
    sha256,
    signatures_from_json,
    signing_key_from_seed,
    verify_chain,
)

log = logging.getLogger(__name__)

STATIC_KINDS = ("opcodes", "permissions", "api_calls", "commands")
DYNAMIC_KINDS = ("syscall_ngrams", "resources")
EXPORT_FORMAT = "b2mdf-dipb-export/1"
STORE_ENV = "B2MDF_STORE"


# ---------------------------------------------------------------------------
# configuration

@dataclass
class DeploymentConfig:
    store_path: Path
    registry_path: Path
    keys_path: Path
    extractors: dict[str, str]
    engines: list[EngineConfig]
    watchlists: Watchlists = field(default_factory=Watchlists)
    ngram_n: int = 2
    resource_schema: tuple[str, ...] = dyn.DEFAULT_RESOURCE_SCHEMA
    scenario_path: Path | None = None
    # informational: the agent trusts the committed block verbatim
    determinant_threshold: float = 0.5

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DeploymentConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text("utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_json(doc, path.parent)

    @classmethod
    def from_json(cls, doc: dict, base: Path = Path(".")) -> "DeploymentConfig":
        def resolve(p: str | None) -> Path | None:
            return None if p is None else (base / p).resolve()

        try:
            missing = [k for k in ("store", "registry", "keys", "extractors", "engines") if k not in doc]
            if missing:
                raise ConfigError(f"config lacks {missing}")
            store = os.environ.get(STORE_ENV) or doc["store"]
            cfg = cls(
                store_path=Path(store) if os.environ.get(STORE_ENV) else resolve(store),
                registry_path=resolve(doc["registry"]),
                keys_path=resolve(doc["keys"]),
                extractors=dict(doc["extractors"]),
                engines=[EngineConfig.from_json(e) for e in doc["engines"]],
                watchlists=Watchlists.load(resolve(doc["watchlists"])) if doc.get("watchlists") else Watchlists(),
                ngram_n=int(doc.get("ngram_n", 2)),
                resource_schema=tuple(doc.get("resource_schema", dyn.DEFAULT_RESOURCE_SCHEMA)),
                scenario_path=resolve(doc.get("scenario")),
                determinant_threshold=float(doc.get("determinant_threshold", 0.5)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
        if not 1 <= cfg.ngram_n <= 5:
            raise ConfigError("ngram_n must lie in 1..5")
        for p in (cfg.registry_path, cfg.keys_path):
            if not p.is_file():
                raise ConfigError(f"missing file {p}")
        unknown = set(cfg.extractors) - set(STATIC_KINDS + DYNAMIC_KINDS)
        if unknown or any(k not in cfg.extractors for k in STATIC_KINDS):
            raise ConfigError("extractors must name an identity for each feature kind")
        return cfg

    def registry(self) -> Registry:
        return load_registry(self.registry_path)

    def keys(self) -> dict[str, Ed25519PrivateKey]:
        return load_keys(self.keys_path)

    def store(self) -> ChainStore:
        return ChainStore(self.store_path)


def load_registry(path: str | os.PathLike) -> Registry:
    try:
        return Registry.load(path)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"cannot load registry {path}: {exc}") from exc


def load_keys(path: str | os.PathLike) -> dict[str, Ed25519PrivateKey]:
    """Key file: JSON object mapping participant id to a 32-byte hex seed."""
    try:
        doc = json.loads(Path(path).read_text("utf-8"))
        return {pid: signing_key_from_seed(bytes.fromhex(seed)) for pid, seed in doc.items()}
    except (OSError, ValueError, AttributeError, TypeError) as exc:
        raise ConfigError(f"cannot load keys {path}: {exc}") from exc


@contextlib.contextmanager
def store_lock(root: Path) -> Iterator[None]:
    root.mkdir(parents=True, exist_ok=True)
    with open(root / ".lock", "a") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def _snapshot_registry(cfg: DeploymentConfig) -> None:
    target = cfg.store_path / "registry.json"
    if not target.exists():
        target.write_bytes(cfg.registry_path.read_bytes())


# ---------------------------------------------------------------------------
# app records and verdicts

@dataclass(frozen=True)
class AppRecord:
    app_id: str
    versions: tuple[int, ...]
    current_version: int


def app_record(store: ChainStore, app_id: str) -> AppRecord | None:
    """Versions seen on the app's DIPB, in ingestion order."""
    if not store.exists(app_id, ChainKind.DIPB):
        return None
    versions: list[int] = []
    for block in store.get(app_id, ChainKind.DIPB).blocks:
        v = block.content.get("version_code")
        if v not in versions:
            versions.append(v)
    if not versions:
        return None
    return AppRecord(app_id, tuple(versions), max(versions))


@dataclass(frozen=True)
class FinalVerdict:
    app_id: str
    version_code: int
    verdict: str
    aggregate_score: float | None = None
    endorsing_engines: tuple[str, ...] = ()
    family_tag: str | None = None

    def to_json(self) -> dict:
        return {
            "app_id": self.app_id,
            "version_code": self.version_code,
            "verdict": self.verdict,
            "aggregate_score": self.aggregate_score,
            "endorsing_engines": list(self.endorsing_engines),
            "family_tag": self.family_tag,
        }


def verdict_from_block(block: Block) -> FinalVerdict:
    decision = decision_from_block(block)
    endorsers = tuple(sorted(pid for pid, _ in block.signatures))
    family = None
    for engine_id in endorsers:
        detail = decision.records.get(engine_id, {}).get("detail", "")
        if detail.startswith("family:"):
            family = detail[len("family:"):]
            break
    return FinalVerdict(decision.app_id, decision.version_code, decision.proposed_verdict.value,
                        decision.aggregate_score, endorsers, family)


def determine(store: ChainStore, app_id: str, version_code: int) -> FinalVerdict | None:
    """Determinant Agent: read the app's CB and report the committed verdict, if any."""
    if not store.exists(app_id, ChainKind.CB):
        return None
    blocks = get_blocks(store.get(app_id, ChainKind.CB), kind="decision", version=version_code)
    return verdict_from_block(blocks[-1]) if blocks else None


# ---------------------------------------------------------------------------
# stages

@dataclass
class IngestResult:
    app_id: str
    version_code: int
    blocks: list[Block]

    def to_json(self) -> dict:
        return {"app_id": self.app_id, "version_code": self.version_code,
                "appended": [{"height": b.header.height, "kind": b.content["kind"],
                              "digest": b.digest().hex()} for b in self.blocks]}


def extract_features(apk_bytes: bytes, cfg: DeploymentConfig,
                     trace_text: str | None = None, samples_text: str | None = None) -> tuple[str, int, list[tuple[str, dict]]]:
    """Run every configured feature extractor; returns (app_id, version, [(kind, payload)])."""
    apk = open_apk(apk_bytes)
    manifest_data = apk.get("AndroidManifest.xml")
    if manifest_data is None:
        raise MissingManifest("APK has no AndroidManifest.xml")
    manifest = parse_manifest(manifest_data)
    app_id, version = manifest.package_name, manifest.version_code
    dex_entries = apk.dex_entries()
    dex = merge([parse_dex(e.data) for e in dex_entries])
    apk_digest = sha256(apk_bytes)
    dex_digest = sha256(dex_entries[0].data) if dex_entries else None

    wl = cfg.watchlists
    payloads = [
        ("opcodes", extract_opcode_sequence(dex, app_id, version).to_payload(apk_digest, dex_digest)),
        ("permissions", extract_permissions(manifest).to_payload(apk_digest)),
        ("api_calls", extract_api_calls(dex, wl.api, app_id, version).to_payload(apk_digest)),
        ("commands", extract_commands(dex, wl.commands, app_id, version).to_payload(apk_digest)),
    ]
    if trace_text is not None:
        trace = dyn.parse_syscall_trace(trace_text, app_id, version)
        payloads.append(("syscall_ngrams", dyn.syscall_ngrams(trace, cfg.ngram_n).to_payload()))
    if samples_text is not None:
        samples = dyn.parse_resource_samples(samples_text, app_id, version)
        payloads.append(("resources", dyn.resource_features(samples, cfg.resource_schema).to_payload()))
    return app_id, version, payloads


def ingest(apk_path: str | os.PathLike, trace_path: str | os.PathLike | None,
           samples_path: str | os.PathLike | None, config: DeploymentConfig) -> IngestResult:
    apk_bytes = Path(apk_path).read_bytes()
    trace = Path(trace_path).read_text("utf-8") if trace_path else None
    samples = Path(samples_path).read_text("utf-8") if samples_path else None
    # everything is parsed before the first append so a bad input leaves no partial version
    app_id, version, payloads = extract_features(apk_bytes, config, trace, samples)
    for kind, _ in payloads:
        if kind not in config.extractors:
            raise ConfigError(f"no extractor identity configured for {kind}")

    registry, keys = config.registry(), config.keys()
    store = config.store()
    with store_lock(config.store_path):
        _snapshot_registry(config)
        record = app_record(store, app_id)
        if record is not None:
            if version in record.versions:
                existing = get_blocks(store.get(app_id, ChainKind.DIPB), version=version)
                digests = {b.content.get("apk_sha256") for b in existing}
                if sha256(apk_bytes).hex() in digests:
                    raise AlreadyIngested(f"{app_id} version {version} already ingested")
                raise DuplicateVersion(f"{app_id} version {version} was ingested from different APK bytes")
            if version < record.current_version:
                raise VersionRegression(f"{app_id} version {version} < current {record.current_version}")
        blocks = []
        for kind, payload in payloads:
            fe = registry.get(config.extractors[kind])
            if fe is None:
                raise ConfigError(f"extractor {config.extractors[kind]!r} is not registered")
            blocks.append(store.append(app_id, ChainKind.DIPB, payload, fe, keys[fe.id]))
        log.info("ingested %s v%d: %d feature blocks", app_id, version, len(blocks))
    return IngestResult(app_id, version, blocks)


@dataclass
class ScanResult:
    app_id: str
    version_code: int
    blocks: list[Block]
    errors: dict[str, str]

    def to_json(self) -> dict:
        return {
            "app_id": self.app_id,
            "version_code": self.version_code,
            "appended": [{"engine_id": b.content["engine_id"], "height": b.header.height,
                          "malice_score": b.content["malice_score"], "verdict": b.content["verdict"],
                          "digest": b.digest().hex()} for b in self.blocks],
            "errors": self.errors,
        }


def scan(app_id: str, version_code: int, config: DeploymentConfig) -> ScanResult:
    registry, keys = config.registry(), config.keys()
    store = config.store()
    if not store.exists(app_id, ChainKind.DIPB) or \
            not get_blocks(store.get(app_id, ChainKind.DIPB), version=version_code):
        raise MissingFeatures(f"no feature blocks for {app_id} version {version_code}; run ingest first")
    appended, errors = [], {}
    with store_lock(config.store_path):
        for engine in config.engines:
            try:
                if latest_score(store, app_id, version_code, engine.engine_id) is not None:
                    raise AlreadyScanned(f"{engine.engine_id} already scored this version")
                participant = registry.get(engine.engine_id)
                if participant is None:
                    raise ConfigError(f"engine {engine.engine_id!r} is not registered")
                record = run_engine(engine, store, app_id, version_code)
                appended.append(store.append(app_id, ChainKind.DEPB, record.to_payload(),
                                             participant, keys[engine.engine_id]))
            except B2mdfError as exc:
                errors[engine.engine_id] = f"{type(exc).__name__}: {exc}"
    return ScanResult(app_id, version_code, appended, errors)


def decide_round(app_id: str, version_code: int, scenario: SimNetConfig | None,
                 config: DeploymentConfig) -> tuple[FinalVerdict, RoundOutcome | None]:
    """Final verdict plus the round outcome (None when the CB already held a decision)."""
    store = config.store()
    if not store.exists(app_id, ChainKind.DEPB) or \
            not get_blocks(store.get(app_id, ChainKind.DEPB), kind="score", version=version_code):
        raise NoScores(f"no score records for {app_id} version {version_code}; run scan first")
    existing = determine(store, app_id, version_code)
    if existing is not None:
        return existing, None
    if scenario is None:
        scenario = load_scenario(config.scenario_path)[0] if config.scenario_path else SimNetConfig()
    registry, keys = config.registry(), config.keys()
    consortium = [p.id for p in registry.with_role(Role.DETECTION_ENGINE)]
    with store_lock(config.store_path):
        outcome = run_round(scenario, consortium, app_id, version_code, store, registry, keys)
    if outcome.committed_block is None:
        return FinalVerdict(app_id, version_code, "Undecided"), outcome
    return verdict_from_block(outcome.committed_block), outcome


def decide(app_id: str, version_code: int, scenario: SimNetConfig | None,
           config: DeploymentConfig) -> FinalVerdict:
    return decide_round(app_id, version_code, scenario, config)[0]


# ---------------------------------------------------------------------------
# third-party export

def export_document(store: ChainStore, app_id: str, version_code: int | None) -> bytes:
    """Whole DIPB chain proof (headers, digests, signatures) plus the version's payloads."""
    chain = store.get(app_id, ChainKind.DIPB)
    if not chain.blocks:
        raise MissingChain(app_id, ChainKind.DIPB.value)
    entries = []
    for block in chain.blocks:
        include = version_code is None or block.content.get("version_code") == version_code
        entries.append({
            "header": block.header.to_json(),
            "digest": block.digest().hex(),
            "signatures": [{"id": pid, "sig": sig.hex()} for pid, sig in block.signatures],
            "payload": block.content if include else None,
        })
    doc = {"format": EXPORT_FORMAT, "app_id": app_id, "chain_kind": ChainKind.DIPB.value,
           "version_code": version_code, "blocks": entries}
    return canonical_bytes(doc) + b"\n"


def export_features(app_id: str, version_code: int | None, output_path: str | os.PathLike,
                    store: ChainStore) -> Path:
    data = export_document(store, app_id, version_code)
    out = Path(output_path)
    out.write_bytes(data)
    return out


def verify_export(data: bytes, registry: Registry) -> ValidationReport:
    """Check an export file using nothing but its own bytes and the registry."""
    try:
        doc = json.loads(data.decode("utf-8"))
        if not data.endswith(b"\n") or canonical_bytes(doc) + b"\n" != data:
            raise ValueError("export is not canonical")
        if set(doc) != {"format", "app_id", "chain_kind", "version_code", "blocks"} \
                or doc["format"] != EXPORT_FORMAT or doc["chain_kind"] != ChainKind.DIPB.value:
            raise ValueError("unexpected export envelope")
    except (ValueError, UnicodeDecodeError) as exc:
        return ValidationReport(False, 0, Reason.MALFORMED, str(exc))

    chain = Chain(doc["app_id"], ChainKind.DIPB)
    prev = ZERO_HASH
    for i, entry in enumerate(doc["blocks"]):
        try:
            if not isinstance(entry, dict) or set(entry) != {"header", "digest", "signatures", "payload"}:
                raise ValueError("unexpected block entry")
            header = BlockHeader.from_json(entry["header"])
            digest = header.digest()
            if entry["digest"] != digest.hex():
                return ValidationReport(False, i, Reason.LINK_MISMATCH, "listed digest differs from header digest")
            payload = entry["payload"]
            wanted = doc["version_code"] is None or (isinstance(payload, dict) and payload.get("version_code") == doc["version_code"])
            if payload is None:
                body = None
            else:
                if not wanted:
                    raise ValueError("payload of another version included")
                body = canonical_bytes(payload)
            sigs = signatures_from_json(entry["signatures"])
        except (ValueError, TypeError, KeyError) as exc:
            return ValidationReport(False, i, Reason.MALFORMED, str(exc))
        if header.height != i:
            return ValidationReport(False, i, Reason.HEIGHT_GAP)
        if header.prev_hash != prev or header.app_id != chain.app_id or header.chain_kind is not ChainKind.DIPB:
            return ValidationReport(False, i, Reason.LINK_MISMATCH)
        if body is not None and sha256(body) != header.payload_hash:
            return ValidationReport(False, i, Reason.PAYLOAD_HASH_MISMATCH)
        if len(sigs) != 1 or sigs[0][0] != header.author_id:
            return ValidationReport(False, i, Reason.BAD_SIGNATURE)
        signer = registry.get(header.author_id)
        if signer is None or not signer.verify(sigs[0][1], digest):
            return ValidationReport(False, i, Reason.BAD_SIGNATURE)
        if signer.role is not Role.FEATURE_EXTRACTOR:
            return ValidationReport(False, i, Reason.UNAUTHORIZED_AUTHOR)
        prev = digest
    return ValidationReport(True)


# ---------------------------------------------------------------------------
# audit

@dataclass
class StoreReport:
    chains: dict[str, ValidationReport]

    @property
    def ok(self) -> bool:
        return all(r.valid for r in self.chains.values())

    def to_json(self) -> dict:
        return {"ok": self.ok, "chains": {k: v.to_json() for k, v in sorted(self.chains.items())}}


def verify_store(store_path: str | os.PathLike, registry: Registry) -> StoreReport:
    root = Path(store_path)
    if not root.is_dir():
        raise UnreadableStore(f"{root} is not a directory")
    store = ChainStore(root)
    reports = {}
    try:
        for chain in store.chains():
            reports[f"{chain.app_id}/{chain.kind.value}"] = verify_chain(chain, registry)
    except OSError as exc:
        raise UnreadableStore(str(exc)) from exc
    return StoreReport(reports)
