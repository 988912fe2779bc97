"""Sweep engine count and faulty-engine count; print which rounds commit the honest verdict."""
import argparse
import hashlib

from b2mdf.consensus import Behavior, ProposalStatus, SimNetConfig, quorum_threshold, run_round
from b2mdf.engines import ScoreRecord, Verdict
from b2mdf.ledger import ChainKind, ChainStore, Participant, Registry, Role, public_key_bytes, signing_key_from_seed

APP = "com.sweep"


def _identity(pid: str, role: Role):
    key = signing_key_from_seed(hashlib.sha256(b"sweep:" + pid.encode()).digest())
    return Participant(pid, role, public_key_bytes(key)), key


def _store(ids: list[str], score: float):
    """In-memory store where every engine has already scored ``APP`` version 1."""
    fe, fe_key = _identity("fe-0", Role.FEATURE_EXTRACTOR)
    engines = {i: _identity(i, Role.DETECTION_ENGINE) for i in ids}
    registry = Registry([fe] + [p for p, _ in engines.values()])
    store = ChainStore()
    feat = store.append(APP, ChainKind.DIPB, {"kind": "permissions", "app_id": APP,
                                              "version_code": 1, "permissions": []}, fe, fe_key)
    verdict = Verdict.MALICIOUS if score >= 0.5 else Verdict.BENIGN
    for i, (p, key) in engines.items():
        rec = ScoreRecord(i, APP, 1, score, verdict, (feat.digest(),), "", 0.5)
        store.append(APP, ChainKind.DEPB, rec.to_payload(), p, key)
    return store, registry, {i: k for i, (_, k) in engines.items()}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--max-n", type=int, default=9)
    ap.add_argument("--behavior", choices=[b.value for b in Behavior], default=Behavior.FLIP_VERDICT.value)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--max-delay", type=int, default=3)
    args = ap.parse_args()
    behavior = Behavior(args.behavior)
    print(f"{'n':>3} {'q':>3} " + " ".join(f"f={f}" for f in range(args.max_n + 1)))
    for n in range(1, args.max_n + 1):
        ids = [f"de-{i:02d}" for i in range(n)]
        cells = []
        for f in range(n + 1):
            store, registry, keys = _store(ids, 0.9)
            cfg = SimNetConfig(seed=args.seed, max_delay_ticks=args.max_delay,
                               faulty_engines={e: behavior for e in ids[n - f:]})
            out = run_round(cfg, ids, APP, 1, store, registry, keys)
            honest = out.status is ProposalStatus.COMMITTED and out.decision.proposed_verdict is Verdict.MALICIOUS
            cells.append(" ok" if honest else "  -")
        print(f"{n:>3} {quorum_threshold(n):>3} " + " ".join(f"{c:>3}" for c in cells))


if __name__ == "__main__":
    main()
