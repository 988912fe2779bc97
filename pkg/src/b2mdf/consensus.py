"""Consortium-chain decision rounds over a seeded, simulated network.

A detection engine proposes a verdict block for one app version; peers that
can resolve the cited evidence and whose own recorded verdict agrees co-sign
it; when the round ends the block is appended to the app's CB if at least
ceil(2n/3) distinct engines signed. All randomness (drops, delays) comes from one seeded generator,
so a (seed, config, store) triple fixes the transcript exactly.
"""
from __future__ import annotations

import enum
import heapq
import json
import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from .engines import ScoreRecord, Verdict
from .errors import AppendRejected, B2mdfError, NoScoreRecord, StaleChain, Unauthorized
from .ledger import (
    Block,
    BlockHeader,
    ChainKind,
    ChainStore,
    Registry,
    Role,
    canonical_bytes,
    get_blocks,
    next_header,
    quorum_threshold,
    sha256,
    sign,
)

__all__ = [
    "Behavior", "ConsensusDecision", "Proposal", "ProposalStatus", "Refusal",
    "RoundOutcome", "SimNetConfig", "TranscriptEvent",
    "decision_from_block", "latest_score", "propose_decision", "quorum_threshold",
    "run_round", "select_proposer", "try_commit", "validate_proposal",
]


class Behavior(str, enum.Enum):
    FLIP_VERDICT = "FlipVerdict"
    SILENT = "Silent"


class ProposalStatus(str, enum.Enum):
    PENDING = "Pending"
    COMMITTED = "Committed"
    FAILED = "Failed"


class Refusal(str, enum.Enum):
    EVIDENCE_UNRESOLVED = "EvidenceUnresolved"
    VERDICT_DISAGREEMENT = "VerdictDisagreement"
    NO_OWN_SCORE = "NoOwnScore"


@dataclass(frozen=True)
class ConsensusDecision:
    app_id: str
    version_code: int
    proposed_verdict: Verdict
    evidence: tuple[bytes, ...]
    proposer_id: str
    # every consortium engine's recorded score for this version, so the
    # committed block alone determines the aggregate over its signers
    records: dict[str, dict]
    consortium_size: int
    aggregate_score: float | None = None

    def to_payload(self) -> dict:
        return {
            "kind": "decision",
            "app_id": self.app_id,
            "version_code": self.version_code,
            "proposed_verdict": self.proposed_verdict.value,
            "evidence": list(self.evidence),
            "proposer_id": self.proposer_id,
            "records": self.records,
            "consortium_size": self.consortium_size,
        }

    def aggregate_over(self, signers: Iterable[str]) -> float:
        scores = [Fraction(self.records[s]["score"]) for s in signers]
        return float(sum(scores) / len(scores))


def decision_from_block(block: Block) -> ConsensusDecision:
    """Rebuild a committed decision, filling the aggregate from the block's signers."""
    c = block.content
    decision = ConsensusDecision(
        app_id=c["app_id"],
        version_code=c["version_code"],
        proposed_verdict=Verdict(c["proposed_verdict"]),
        evidence=tuple(bytes.fromhex(h) for h in c["evidence"]),
        proposer_id=c["proposer_id"],
        records=c["records"],
        consortium_size=c["consortium_size"],
    )
    signers = [pid for pid, _ in block.signatures]
    return ConsensusDecision(**{**decision.__dict__, "aggregate_score": decision.aggregate_over(signers)})


@dataclass
class Proposal:
    decision: ConsensusDecision
    header: BlockHeader
    payload: bytes
    collected: list[tuple[str, bytes]] = field(default_factory=list)
    status: ProposalStatus = ProposalStatus.PENDING

    @property
    def digest(self) -> bytes:
        return self.header.digest()

    def signers(self) -> list[str]:
        return [pid for pid, _ in self.collected]


@dataclass(frozen=True)
class SimNetConfig:
    seed: int = 0
    drop_probability: float = 0.0
    max_delay_ticks: int = 0
    faulty_engines: dict[str, Behavior] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.drop_probability < 1.0:
            raise ValueError("drop_probability must lie in [0, 1)")
        if self.max_delay_ticks < 0:
            raise ValueError("max_delay_ticks must be >= 0")

    @classmethod
    def from_json(cls, obj: dict) -> "SimNetConfig":
        faulty = obj.get("faulty_engines", [])
        if isinstance(faulty, dict):
            faulty = [{"id": k, "behavior": v} for k, v in faulty.items()]
        return cls(
            seed=int(obj.get("seed", 0)),
            drop_probability=float(obj.get("drop_probability", 0.0)),
            max_delay_ticks=int(obj.get("max_delay_ticks", 0)),
            faulty_engines={f["id"]: Behavior(f["behavior"]) for f in faulty},
        )


@dataclass(frozen=True)
class TranscriptEvent:
    tick: int
    actor: str
    event: str
    detail: str

    def to_json(self) -> dict:
        return {"tick": self.tick, "actor": self.actor, "event": self.event, "detail": self.detail}


@dataclass
class RoundOutcome:
    status: ProposalStatus
    committed_block: Block | None
    transcript: list[TranscriptEvent]
    signatures_obtained: int
    quorum: int
    decision: ConsensusDecision | None = None

    def transcript_jsonl(self) -> bytes:
        return b"".join(canonical_bytes(e.to_json()) + b"\n" for e in self.transcript)


# ---------------------------------------------------------------------------
# single-step operations

def latest_score(store: ChainStore, app_id: str, version_code: int, engine_id: str) -> tuple[Block, ScoreRecord] | None:
    if not store.exists(app_id, ChainKind.DEPB):
        return None
    found = None
    for block in get_blocks(store.get(app_id, ChainKind.DEPB), kind="score", version=version_code):
        if block.content.get("engine_id") == engine_id:
            found = block
    if found is None:
        return None
    return found, ScoreRecord.from_payload(found.content)


def _effective(verdict: Verdict, behavior: Behavior | None) -> Verdict:
    return verdict.inverted() if behavior is Behavior.FLIP_VERDICT else verdict


def propose_decision(
    proposer: str,
    app_id: str,
    version_code: int,
    depb_store: ChainStore,
    signing_key: Ed25519PrivateKey,
    consortium: Iterable[str],
    *,
    timestamp: int | None = None,
    behavior: Behavior | None = None,
) -> Proposal:
    depb = depb_store.get(app_id, ChainKind.DEPB)
    mine = latest_score(depb_store, app_id, version_code, proposer)
    if mine is None:
        raise NoScoreRecord(f"{proposer} has no score for {app_id} version {version_code}")
    members = sorted(set(consortium) | {proposer})
    records = {}
    for engine_id in members:
        found = latest_score(depb_store, app_id, version_code, engine_id)
        if found is not None:
            rec = found[1]
            records[engine_id] = {"score": rec.malice_score, "verdict": rec.verdict.value, "detail": rec.detail}

    evidence = [b.digest() for b in get_blocks(depb, kind="score", version=version_code)]
    evidence += [d for d in mine[1].evidence if d not in evidence]
    decision = ConsensusDecision(
        app_id=app_id,
        version_code=version_code,
        proposed_verdict=_effective(mine[1].verdict, behavior),
        evidence=tuple(evidence),
        proposer_id=proposer,
        records=records,
        consortium_size=len(members),
    )
    cb = depb_store.get(app_id, ChainKind.CB, create=True)
    ts = cb.next_timestamp() if timestamp is None else timestamp
    header, body = next_header(cb, decision.to_payload(), proposer, ts)
    proposal = Proposal(decision, header, body)
    proposal.collected.append((proposer, sign(signing_key, proposal.digest)))
    return proposal


def validate_proposal(
    validator: str,
    proposal: Proposal,
    stores: ChainStore,
    signing_key: Ed25519PrivateKey,
    *,
    behavior: Behavior | None = None,
) -> bytes | Refusal:
    """Co-sign iff every evidence digest resolves and our own verdict agrees."""
    if validator in proposal.signers():
        raise ValueError(f"{validator} already signed this proposal")
    d = proposal.decision
    if sha256(proposal.payload) != proposal.header.payload_hash or \
            proposal.payload != canonical_bytes(d.to_payload()):
        return Refusal.EVIDENCE_UNRESOLVED
    if not d.evidence or any(stores.resolve(d.app_id, h) is None for h in d.evidence):
        return Refusal.EVIDENCE_UNRESOLVED
    mine = latest_score(stores, d.app_id, d.version_code, validator)
    if mine is None:
        return Refusal.NO_OWN_SCORE
    if _effective(mine[1].verdict, behavior) is not d.proposed_verdict:
        return Refusal.VERDICT_DISAGREEMENT
    return sign(signing_key, proposal.digest)


def _valid_signers(proposal: Proposal, registry: Registry) -> list[tuple[str, bytes]]:
    seen, out = set(), []
    for pid, sig in proposal.collected:
        p = registry.get(pid)
        if pid in seen or p is None or p.role is not Role.DETECTION_ENGINE:
            continue
        if p.verify(sig, proposal.digest):
            seen.add(pid)
            out.append((pid, sig))
    return out


def try_commit(proposal: Proposal, n: int, cb_store: ChainStore, registry: Registry) -> Block | None:
    """Append the proposal to the CB once it holds a quorum of valid signatures.

    Returns the committed block, or None while the proposal stays pending.
    """
    if proposal.status is not ProposalStatus.PENDING:
        raise ValueError(f"proposal is {proposal.status.value}")
    valid = _valid_signers(proposal, registry)
    if len(valid) < quorum_threshold(n):
        return None
    block = Block(proposal.header, proposal.payload, tuple(valid))
    proposer = registry.get(proposal.decision.proposer_id)
    if proposer is None:
        raise AppendRejected(f"proposer {proposal.decision.proposer_id!r} is not registered")
    try:
        cb_store.commit(block, proposer)
    except (StaleChain, Unauthorized) as exc:
        raise AppendRejected(str(exc)) from exc
    proposal.status = ProposalStatus.COMMITTED
    return block


def select_proposer(engines: Iterable[str], store: ChainStore, app_id: str, version_code: int) -> str | None:
    """Smallest engine id with a Malicious record, else smallest id with any record."""
    recorded = {}
    for engine_id in sorted(engines):
        found = latest_score(store, app_id, version_code, engine_id)
        if found is not None:
            recorded[engine_id] = found[1].verdict
    malicious = [e for e, v in recorded.items() if v is Verdict.MALICIOUS]
    if malicious:
        return malicious[0]
    return min(recorded) if recorded else None


# ---------------------------------------------------------------------------
# simulated round

@dataclass(order=True)
class _Message:
    deliver_at: int
    seq: int
    kind: str = field(compare=False)
    sender: str = field(compare=False)
    recipient: str = field(compare=False)
    body: bytes = field(compare=False, default=b"")


class _Round:
    def __init__(self, cfg: SimNetConfig, engines: list[str], app_id: str, version_code: int,
                 store: ChainStore, registry: Registry, keys: dict[str, Ed25519PrivateKey]):
        self.cfg = cfg
        self.engines = sorted(set(engines))
        self.app_id, self.version_code = app_id, version_code
        self.store, self.registry, self.keys = store, registry, keys
        self.rng = random.Random(cfg.seed)
        self.queue: list[_Message] = []
        self.seq = 0
        self.now = 0
        self.transcript: list[TranscriptEvent] = []
        self.n = len(self.engines)
        self.quorum = quorum_threshold(self.n)

    def log(self, actor: str, event: str, detail: str = "") -> None:
        self.transcript.append(TranscriptEvent(self.now, actor, event, detail))

    def send(self, kind: str, sender: str, recipient: str, body: bytes = b"") -> None:
        # both draws happen for every message so the stream never depends on outcomes
        dropped = self.rng.random() < self.cfg.drop_probability
        delay = self.rng.randint(0, self.cfg.max_delay_ticks)
        if dropped:
            self.log(sender, "drop", f"{kind} to {recipient}")
            return
        self.seq += 1
        heapq.heappush(self.queue, _Message(self.now + delay, self.seq, kind, sender, recipient, body))
        self.log(sender, "send", f"{kind} to {recipient} arriving at tick {self.now + delay}")

    def outcome(self, status: ProposalStatus, proposal: Proposal | None, block: Block | None) -> RoundOutcome:
        decision = decision_from_block(block) if block is not None else (proposal.decision if proposal else None)
        return RoundOutcome(status, block, self.transcript,
                            len(proposal.collected) if proposal else 0, self.quorum, decision)

    def commit(self, proposal: Proposal) -> Block | None:
        try:
            block = try_commit(proposal, self.n, self.store, self.registry)
        except AppendRejected as exc:
            self.log(proposal.decision.proposer_id, "append-rejected", str(exc))
            proposal.status = ProposalStatus.FAILED
            return None
        if block is not None:
            self.log(proposal.decision.proposer_id, "commit",
                     f"height {block.header.height} with {len(block.signatures)}/{self.n} signatures")
        return block

    def run(self) -> RoundOutcome:
        faulty = self.cfg.faulty_engines
        self.log("sim", "start", f"app {self.app_id} version {self.version_code}, n={self.n}, quorum={self.quorum}, seed={self.cfg.seed}")
        proposer = select_proposer(self.engines, self.store, self.app_id, self.version_code)
        if proposer is None:
            self.log("sim", "fail", "no engine holds a score record")
            return self.outcome(ProposalStatus.FAILED, None, None)
        if faulty.get(proposer) is Behavior.SILENT:
            self.log(proposer, "silent", "selected proposer never broadcasts")
            self.log("sim", "fail", "no proposal")
            return self.outcome(ProposalStatus.FAILED, None, None)
        try:
            proposal = propose_decision(proposer, self.app_id, self.version_code, self.store,
                                        self.keys[proposer], self.engines, behavior=faulty.get(proposer))
        except B2mdfError as exc:
            self.log(proposer, "fail", f"cannot propose: {exc}")
            return self.outcome(ProposalStatus.FAILED, None, None)
        self.log(proposer, "propose",
                 f"{proposal.decision.proposed_verdict.value} digest {proposal.digest.hex()}")

        for peer in self.engines:
            if peer != proposer:
                self.send("ProposalBroadcast", proposer, peer)

        # the round ends once every message is delivered or dropped; the block
        # then carries every signature collected, not just the first quorum
        while self.queue:
            msg = heapq.heappop(self.queue)
            self.now = msg.deliver_at
            if msg.kind == "ProposalBroadcast":
                self.on_proposal(msg.recipient, proposal)
            else:
                self.on_signature(msg, proposal)

        block = self.commit(proposal)
        if block is not None:
            return self.outcome(ProposalStatus.COMMITTED, proposal, block)
        proposal.status = ProposalStatus.FAILED
        self.log("sim", "fail", f"{len(proposal.collected)} of {self.quorum} required signatures")
        return self.outcome(ProposalStatus.FAILED, proposal, None)

    def on_proposal(self, validator: str, proposal: Proposal) -> None:
        behavior = self.cfg.faulty_engines.get(validator)
        if behavior is Behavior.SILENT:
            self.log(validator, "silent", "ignores proposal")
            return
        result = validate_proposal(validator, proposal, self.store, self.keys[validator], behavior=behavior)
        if isinstance(result, Refusal):
            self.log(validator, "refuse", result.value)
            return
        self.log(validator, "endorse", proposal.decision.proposed_verdict.value)
        self.send("SignatureReply", validator, proposal.decision.proposer_id, result)

    def on_signature(self, msg: _Message, proposal: Proposal) -> None:
        signer = self.registry.get(msg.sender)
        if msg.sender in proposal.signers() or signer is None or not signer.verify(msg.body, proposal.digest):
            self.log(msg.recipient, "reject-signature", msg.sender)
            return
        proposal.collected.append((msg.sender, msg.body))
        self.log(msg.recipient, "signature", f"from {msg.sender} ({len(proposal.collected)}/{self.quorum})")


def run_round(cfg: SimNetConfig, engines: Iterable[str], app_id: str, version_code: int,
              stores: ChainStore, registry: Registry, keys: dict[str, Ed25519PrivateKey]) -> RoundOutcome:
    """Run one deterministic decision round; failures are outcomes, not exceptions."""
    return _Round(cfg, list(engines), app_id, version_code, stores, registry, keys).run()


def load_scenario(path) -> tuple[SimNetConfig, list[str] | None]:
    """Scenario file: seed, drop_probability, max_delay_ticks, faulty_engines, engines."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return SimNetConfig.from_json(doc), doc.get("engines")
