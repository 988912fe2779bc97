"""Acceptance criteria 1-9, one test each.

Every test records a single PASS/FAIL line; the lines are printed in the
pytest terminal summary, and ``python3 tests/test_acceptance.py`` prints them
directly.
"""
from __future__ import annotations

import hashlib
import json
import math
import random
import struct
import sys
import time
from fractions import Fraction
from pathlib import Path

import mpmath

sys.path.insert(0, str(Path(__file__).parent))

from b2mdf.apk_static import extract_opcode_sequence, open_apk, parse_dex, parse_manifest
from b2mdf.consensus import Behavior, ProposalStatus, SimNetConfig, quorum_threshold, run_round
from b2mdf.dynamic_features import parse_syscall_trace, syscall_ngrams
from b2mdf.engines import EngineConfig, EngineKind, FeatureVector, heuristic_score
from b2mdf.errors import B2mdfError, Unauthorized
from b2mdf.ledger import (
    Action,
    ChainKind,
    ChainStore,
    Registry,
    Role,
    authorize,
    next_header,
    sign,
    verify_chain,
    Block,
)
from b2mdf.pipeline import DeploymentConfig, decide, export_document, ingest, scan, verify_export
from b2mdf.synth import SynthMethod, build_dex, demo_apps, manifest_tree, to_axml, to_text_xml, write_corpus

from conftest import make_identity
from consensus_helpers import APP, engine_ids, scored_store

RESULTS: dict[int, str] = {}


def report(k: int, ok: bool, detail: str) -> None:
    RESULTS[k] = f"[{'PASS' if ok else 'FAIL'}] criterion {k}: {detail}"
    assert ok, RESULTS[k]


# ---------------------------------------------------------------------------
# 1. tamper evidence

def _random_chain(rng: random.Random, root: Path, idx: int, people, registry):
    store = ChainStore(root)
    kind = rng.choice(list(ChainKind))
    app = f"com.tamper.app{idx}"
    length = rng.randint(1, 20)
    for i in range(length):
        payload = {"kind": "t", "version_code": rng.randint(1, 3), "i": i,
                   "blob": "".join(rng.choice("abcdef0123456789") for _ in range(rng.randint(0, 40))),
                   "x": rng.random()}
        if kind is ChainKind.DIPB:
            p, key = people["fe"]
            store.append(app, kind, payload, p, key)
        elif kind is ChainKind.DEPB:
            p, key = people["de"]
            store.append(app, kind, payload, p, key)
        else:
            chain = store.get(app, kind, create=True)
            header, body = next_header(chain, payload, "de-a", chain.next_timestamp())
            signers = rng.sample(["de-a", "de-b", "de-c"], rng.randint(2, 3))
            if "de-a" not in signers:
                signers[0] = "de-a"
            sigs = tuple((s, sign(people[{"de-a": "de", "de-b": "de2", "de-c": "de3"}[s]][1], header.digest()))
                         for s in signers)
            store.commit(Block(header, body, sigs), people["de"][0])
    return app, kind


def test_1_tamper_evidence(tmp_path, cast):
    people, registry = cast
    rng = random.Random(20240601)
    start = time.perf_counter()
    detected, near, total = 0, 0, 100
    misses = []
    for idx in range(total):
        root = tmp_path / f"s{idx}"
        app, kind = _random_chain(rng, root, idx, people, registry)
        path = root / app / f"{kind.value}.chain"
        data = bytearray(path.read_bytes())
        pos = rng.randrange(len(data))
        data[pos] ^= rng.randint(1, 255)
        path.write_bytes(bytes(data))
        mutated_height = bytes(data[:pos]).count(b"\n")
        result = verify_chain(ChainStore(root).get(app, kind), registry)
        if not result.valid:
            detected += 1
            if result.first_bad_height is not None and abs(result.first_bad_height - mutated_height) <= 1:
                near += 1
            else:
                misses.append((idx, mutated_height, result.first_bad_height))
        else:
            misses.append((idx, mutated_height, None))
    elapsed = time.perf_counter() - start
    ok = detected == total and near == total and elapsed < 5.0
    report(1, ok, f"{detected}/{total} tampered chains flagged, {near}/{total} at or adjacent to the "
                  f"mutated height, {elapsed:.2f}s (< 5s){'' if not misses else f'; misses {misses[:3]}'}")


# ---------------------------------------------------------------------------
# 2. quorum algebra and fault bound

def test_2_quorum_and_fault_bound():
    start = time.perf_counter()
    algebra = all(quorum_threshold(n) == math.ceil(Fraction(2 * n, 3)) for n in range(1, 101))
    cases, bad = 0, []
    for n in range(1, 10):
        q = quorum_threshold(n)
        ids = engine_ids(n)
        for f in range(n + 1):
            faulty_ids = ids[n - f:]
            for behavior in (Behavior.FLIP_VERDICT, Behavior.SILENT):
                for honest_score in (0.9, 0.1):
                    for seed, delay in ((0, 0), (7, 3)):
                        store, registry, keys = scored_store({e: honest_score for e in ids})
                        cfg = SimNetConfig(seed=seed, max_delay_ticks=delay,
                                           faulty_engines={e: behavior for e in faulty_ids})
                        out = run_round(cfg, ids, APP, 1, store, registry, keys)
                        honest = "Malicious" if honest_score >= 0.5 else "Benign"
                        committed_honest = (out.status is ProposalStatus.COMMITTED and
                                            out.decision.proposed_verdict.value == honest)
                        cases += 1
                        if committed_honest != (n - f >= q):
                            bad.append((n, f, behavior.value, honest, seed))
    elapsed = time.perf_counter() - start
    ok = algebra and not bad and elapsed < 10.0
    report(2, ok, f"quorum_threshold == ceil(2n/3) for n=1..100: {algebra}; fault bound held in "
                  f"{cases - len(bad)}/{cases} rounds (n<=9, all f, FlipVerdict+Silent), {elapsed:.2f}s (< 10s)")


# ---------------------------------------------------------------------------
# 3. parser oracle equivalence

C = "Lfix/C;"
# each fixture: methods as lists of instructions (each instruction a list of code units),
# plus the opcode sequence decoded by hand from the Dalvik format table
DEX_FIXTURES = {
    "add": ([[[0x1012], [0x2112], [0x10B0], [0x000F]]],
            [0x12, 0x12, 0xB0, 0x0F]),
    "wide-constants": ([[[0x0013, 0x0064], [0x0014, 0x5678, 0x1234], [0x0018, 1, 2, 3, 4], [0x0010]]],
                       [0x13, 0x14, 0x18, 0x10]),
    "packed-switch": ([[[0x106E, 0x0000, 0x0000], [0x000C], [0x002B, 0x0004, 0x0000], [0x000E],
                        [0x0100, 0x0001, 0x0000, 0x0000, 0x0003, 0x0000]]],
                      [0x6E, 0x0C, 0x2B, 0x0E]),
    "sparse-and-array": ([[[0x002C, 0x0008, 0x0000], [0x0126, 0x000F, 0x0000], [0x000E], [0x0000],
                           [0x0200, 0x0002, 1, 0, 5, 0, 6, 0, 7, 0],
                           [0x0300, 0x0004, 0x0003, 0x0000, 1, 2, 3, 4, 5, 6]]],
                         [0x2C, 0x26, 0x0E, 0x00]),
    "two-methods": ([[[0x0274, 0x0000, 0x0003], [0x20FA, 0x0000, 0x0010, 0x0001], [0x000E]],
                     [[0x00FF, 0x0000], [0x00FE, 0x0001], [0x0011]]],
                    [0x74, 0xFA, 0x0E, 0xFF, 0xFE, 0x11]),
    "arith-and-branches": ([[[0x01B0], [0x0091, 0x0201], [0x00D8, 0x0507], [0x0032, 0x0003], [0x0028],
                             [0x0029, 0x0001], [0x0001], [0x003C, 0x0002], [0x000E]]],
                           [0xB0, 0x91, 0xD8, 0x32, 0x28, 0x29, 0x01, 0x3C, 0x0E]),
}


def test_3_parser_oracles():
    dex_ok, unit_ok = 0, 0
    for name, (methods, expected) in DEX_FIXTURES.items():
        synth = [SynthMethod(C, f"m{i}", "V", [u for ins in m for u in ins]) for i, m in enumerate(methods)]
        dex = parse_dex(build_dex(synth))
        if extract_opcode_sequence(dex).opcodes == expected:
            dex_ok += 1
        hand_units = [sum(len(ins) for ins in m) for m in methods]
        if [len(c.insns) for c in dex.code_items] == hand_units:
            unit_ok += 1
    trees = [
        manifest_tree("acc.sms", 3, "3", permissions=["android.permission.SEND_SMS", "android.permission.READ_PHONE_STATE"],
                      components=[("activity", ".Main", ["android.intent.action.MAIN"])]),
        manifest_tree("acc.empty", 1),
        manifest_tree("acc.rich", 99, "9.9", permissions=["a.B", "a.C", "a.B"], features=["f.x"],
                      components=[("service", ".S", []), ("receiver", ".R", ["x.Y", "x.Z"]), ("provider", ".P", [])]),
        *(manifest_tree(a.package, a.version_code, a.version_name, permissions=a.permissions,
                        components=a.components) for a in demo_apps()),
    ]
    same = sum(
        parse_manifest(to_axml(t)) == parse_manifest(to_text_xml(t)) == parse_manifest(to_axml(t, utf8=True))
        for t in trees)
    n = len(DEX_FIXTURES)
    ok = n >= 5 and dex_ok == n and unit_ok == n and len(trees) >= 3 and same == len(trees)
    report(3, ok, f"{dex_ok}/{n} DEX fixtures match hand-decoded opcodes, {unit_ok}/{n} consume exactly "
                  f"insns_size; {same}/{len(trees)} manifests identical across AXML and text")


# ---------------------------------------------------------------------------
# 4. reference trace

def test_4_reference_trace():
    trace = parse_syscall_trace("open, read, write, fork, fstat, mprotect, read, fork, write, close")
    uni = syscall_ngrams(trace, 1).counts
    bi = syscall_ngrams(trace, 2).counts
    expected_uni = {"read": 2, "write": 2, "fork": 2, "open": 1, "fstat": 1, "mprotect": 1, "close": 1}
    expected_bi = {"open|read": 1, "read|write": 1, "write|fork": 1, "fork|fstat": 1, "fstat|mprotect": 1,
                   "mprotect|read": 1, "read|fork": 1, "fork|write": 1, "write|close": 1}
    ok = len(trace.calls) == 10 and uni == expected_uni and sum(bi.values()) == 9 and bi == expected_bi
    report(4, ok, f"{len(trace.calls)} calls, unigrams {uni}, {sum(bi.values())} bigrams")


# ---------------------------------------------------------------------------
# 5. fuzz totality

def _fuzz_inputs(rng: random.Random, count: int):
    seeds = [a.apk() for a in demo_apps()[:2]]
    apps = demo_apps()
    seeds += [to_axml(apps[0].manifest()), to_text_xml(apps[2].manifest()), build_dex(apps[2].methods, apps[2].strings)]
    magics = [b"PK\x03\x04", b"dex\n035\0", b"\x03\x00\x08\x00", b"<manifest "]
    for i in range(count):
        mode = i % 4
        if mode == 0:
            size = int(65536 * rng.random() ** 4)
            yield rng.randbytes(size)
        elif mode == 1:
            yield rng.choice(magics) + rng.randbytes(int(4096 * rng.random() ** 2))
        else:
            data = bytearray(rng.choice(seeds))
            for _ in range(rng.randint(1, 8)):
                op = rng.randrange(4)
                if op == 0 and data:
                    data[rng.randrange(len(data))] ^= rng.randint(1, 255)
                elif op == 1 and data:
                    del data[rng.randrange(len(data)):]
                elif op == 2:
                    at = rng.randrange(len(data) + 1)
                    data[at:at] = rng.randbytes(rng.randint(1, 16))
                elif data:
                    at = rng.randrange(max(1, len(data) - 4))
                    struct.pack_into("<I", data, at, rng.choice([0, 0xFFFFFFFF, 0x7FFFFFFF, rng.getrandbits(32)])) \
                        if at + 4 <= len(data) else None
            yield bytes(data[:65536])


def test_5_fuzz_totality():
    rng = random.Random(5)
    crashes, slowest, n = [], 0.0, 0
    start = time.perf_counter()
    for data in _fuzz_inputs(rng, 10_000):
        n += 1
        t0 = time.perf_counter()
        for fn in (open_apk, parse_manifest, parse_dex):
            try:
                fn(data)
            except B2mdfError:
                pass
            except Exception as exc:  # anything else is a totality failure
                crashes.append((fn.__name__, type(exc).__name__, str(exc)[:80]))
        slowest = max(slowest, time.perf_counter() - t0)
    elapsed = time.perf_counter() - start
    ok = n == 10_000 and not crashes and slowest < 1.0
    report(5, ok, f"{n} inputs x 3 parsers, {len(crashes)} unstructured failures, slowest input "
                  f"{slowest * 1000:.1f} ms (< 1000 ms), total {elapsed:.1f}s"
                  + (f"; first {crashes[0]}" if crashes else ""))


# ---------------------------------------------------------------------------
# 6. end-to-end determinism

def _pipeline_run(root: Path) -> tuple[dict[str, bytes], list[dict]]:
    write_corpus(root)
    config = DeploymentConfig.load(root / "config.json")
    index = json.loads((root / "index.json").read_text())["apps"]
    verdicts = []
    for app in index:
        ingest(root / app["apk"], root / app["trace"], root / app["samples"], config)
    for app in index:
        scan(app["app_id"], app["version_code"], config)
        verdicts.append(decide(app["app_id"], app["version_code"], None, config).to_json())
    files = {str(p.relative_to(root / "store")): p.read_bytes()
             for p in sorted((root / "store").rglob("*")) if p.is_file()}
    return files, verdicts


def test_6_determinism(tmp_path, monkeypatch):
    monkeypatch.delenv("B2MDF_STORE", raising=False)
    runs = [_pipeline_run(tmp_path / f"run{i}") for i in range(3)]
    stores_equal = all(r[0] == runs[0][0] for r in runs)
    verdicts_equal = all(json.dumps(r[1], sort_keys=True) == json.dumps(runs[0][1], sort_keys=True) for r in runs)
    chain_files = [k for k in runs[0][0] if k.endswith(".chain")]
    summary = ", ".join(f"{v['app_id']}@{v['version_code']}={v['verdict']}" for v in runs[0][1])
    ok = stores_equal and verdicts_equal and len(chain_files) >= 9
    report(6, ok, f"3 runs: store directories byte-identical={stores_equal} ({len(chain_files)} chain files), "
                  f"verdicts identical={verdicts_equal} [{summary}]")


# ---------------------------------------------------------------------------
# 7. heuristic numeric check

def test_7_logistic_numeric():
    mpmath.mp.dps = 60
    rng = random.Random(77)
    worst = 0.0
    for i in range(50):
        dim = rng.randint(1, 12)
        keys = [f"k{j}" for j in range(dim)]
        weights = {k: rng.uniform(-4, 4) for k in keys}
        bias = rng.uniform(-6, 6)
        vec = {k: float(rng.choice([0, 1, rng.randint(0, 20), rng.uniform(0, 50)])) for k in keys}
        cfg = EngineConfig(f"h{i}", EngineKind.HEURISTIC, 0.5, {**weights, "__bias": bias})
        got = heuristic_score(FeatureVector(tuple(sorted(vec.items())), "s"), cfg, evidence=[b"e"]).malice_score
        z = mpmath.fsum(mpmath.mpf(weights[k]) * mpmath.mpf(vec[k]) for k in keys) + mpmath.mpf(bias)
        want = 1 / (1 + mpmath.exp(-z))
        worst = max(worst, float(abs(mpmath.mpf(got) - want)))
    report(7, worst <= 1e-9, f"50 random weight/vector pairs, max |score - oracle| = {worst:.3e} (<= 1e-9)")


# ---------------------------------------------------------------------------
# 8. role matrix

EXPECTED_APPEND = {
    (Role.FEATURE_EXTRACTOR, ChainKind.DIPB): True,
    (Role.DETECTION_ENGINE, ChainKind.DEPB): True,
    (Role.DETECTION_ENGINE, ChainKind.CB): True,
}


def test_8_role_matrix(tmp_path):
    roles = {Role.FEATURE_EXTRACTOR: "fe", Role.DETECTION_ENGINE: "de",
             Role.THIRD_PARTY: "tp", Role.DETERMINANT_AGENT: "da"}
    ids = {role: make_identity(f"{tag}-m", role) for role, tag in roles.items()}
    registry = Registry(p for p, _ in ids.values())
    good, total = 0, 0
    for role in Role:
        for kind in ChainKind:
            for action in Action:
                total += 1
                expected = True if action is Action.READ else EXPECTED_APPEND.get((role, kind), False)
                if authorize(role, kind, action) != expected:
                    continue
                root = tmp_path / f"{role.value}-{kind.value}-{action.value}"
                store = ChainStore(root)
                # seed the chain with one block from its legitimate writer
                writer = ids[Role.FEATURE_EXTRACTOR if kind is ChainKind.DIPB else Role.DETECTION_ENGINE]
                store.append("com.m", kind, {"seed": True}, *writer)
                path = root / "com.m" / f"{kind.value}.chain"
                before = path.read_bytes()
                p, key = ids[role]
                if action is Action.READ:
                    fine = len(ChainStore(root).get("com.m", kind)) == 1 and path.read_bytes() == before
                else:
                    try:
                        store.append("com.m", kind, {"by": p.id}, p, key)
                        reloaded = ChainStore(root).get("com.m", kind)
                        fine = expected and len(reloaded) == 2 and verify_chain(reloaded, registry).valid
                    except Unauthorized:
                        fine = not expected and path.read_bytes() == before and \
                            len(ChainStore(root).get("com.m", kind)) == 1
                good += fine
    report(8, total == 24 and good == 24,
           f"{good}/{total} (role x chain kind x action) combinations match the matrix; "
           "rejected appends left chain files byte-identical")


# ---------------------------------------------------------------------------
# 9. export verifiability

def standalone_check(data: bytes, registry_doc: list[dict]) -> bool:
    """Independent checker: hashlib + Ed25519 only, nothing from the package."""
    from cryptography.exceptions import InvalidSignature
    from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey

    def enc(obj) -> bytes:
        return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False,
                          allow_nan=False).encode("utf-8")

    def lower_hex(s, n) -> bytes:
        raw = bytes.fromhex(s)
        if len(raw) != n or raw.hex() != s:
            raise ValueError("not canonical hex")
        return raw

    try:
        doc = json.loads(data.decode("utf-8"))
        if enc(doc) + b"\n" != data:
            return False
        if set(doc) != {"format", "app_id", "chain_kind", "version_code", "blocks"}:
            return False
        if doc["format"] != "b2mdf-dipb-export/1" or doc["chain_kind"] != "DIPB":
            return False
        keys = {p["id"]: (p["role"], bytes.fromhex(p["public_key"])) for p in registry_doc}
        prev = "0" * 64
        for i, entry in enumerate(doc["blocks"]):
            if set(entry) != {"header", "digest", "signatures", "payload"}:
                return False
            h = entry["header"]
            digest = hashlib.sha256(enc(h)).hexdigest()
            if entry["digest"] != digest or h["height"] != i or h["prev_hash"] != prev:
                return False
            if h["app_id"] != doc["app_id"] or h["chain_kind"] != "DIPB":
                return False
            payload = entry["payload"]
            if payload is not None:
                if hashlib.sha256(enc(payload)).hexdigest() != h["payload_hash"]:
                    return False
                if doc["version_code"] is not None and payload.get("version_code") != doc["version_code"]:
                    return False
            if len(entry["signatures"]) != 1:
                return False
            s = entry["signatures"][0]
            if set(s) != {"id", "sig"} or s["id"] != h["author_id"]:
                return False
            role, pub = keys[s["id"]]
            if role != "FeatureExtractor":
                return False
            Ed25519PublicKey.from_public_bytes(pub).verify(lower_hex(s["sig"], 64), bytes.fromhex(digest))
            prev = digest
        return True
    except (InvalidSignature, ValueError, KeyError, TypeError, AttributeError):
        return False


def test_9_export_verifiability(tmp_path, monkeypatch):
    monkeypatch.delenv("B2MDF_STORE", raising=False)
    root = tmp_path / "corpus"
    write_corpus(root)
    config = DeploymentConfig.load(root / "config.json")
    for stem in ("com.example.notes-1", "com.example.notes-2"):
        ingest(root / "apks" / f"{stem}.apk", root / "traces" / f"{stem}.txt", root / "samples" / f"{stem}.csv", config)
    registry_doc = json.loads((root / "registry.json").read_text())
    registry = config.registry()
    data = export_document(config.store(), "com.example.notes", 1)
    intact = standalone_check(data, registry_doc) and verify_export(data, registry).valid

    rng = random.Random(9)
    survivors, tried = [], 0
    start = time.perf_counter()
    for pos in range(len(data)):
        for mask in {rng.randint(1, 255), 0x20}:
            mutated = bytearray(data)
            mutated[pos] ^= mask
            tried += 1
            if standalone_check(bytes(mutated), registry_doc) or verify_export(bytes(mutated), registry).valid:
                survivors.append((pos, mask))
    elapsed = time.perf_counter() - start
    ok = intact and not survivors
    report(9, ok, f"intact export verifies={intact}; {tried - len(survivors)}/{tried} single-byte mutations "
                  f"(every position of a {len(data)}-byte export) rejected, {elapsed:.1f}s"
                  + (f"; survivors {survivors[:5]}" if survivors else ""))


if __name__ == "__main__":
    import subprocess
    sys.exit(subprocess.call([sys.executable, "-m", "pytest", __file__, "-q", "-p", "no:cacheprovider"]))
