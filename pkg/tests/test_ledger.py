import hashlib
import json

import pytest

from b2mdf.errors import MissingChain, SignatureFailure, StaleChain, UnencodableValue, Unauthorized
from b2mdf.ledger import (
    ZERO_HASH,
    Action,
    Block,
    Chain,
    ChainKind,
    ChainStore,
    Reason,
    Role,
    append_block,
    authorize,
    block_digest,
    canonical_bytes,
    get_blocks,
    next_header,
    sign,
    verify_chain,
)

from conftest import make_identity


def oracle_digest(header: dict) -> str:
    """Header digest recomputed without the package's encoder."""
    text = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(text.encode()).hexdigest()


class TestCanonicalBytes:
    def test_keys_sorted(self):
        assert canonical_bytes({"b": 1, "a": 2}) == b'{"a":2,"b":1}'

    def test_empty_record(self):
        assert canonical_bytes({}) == b"{}"

    def test_bytes_become_hex(self):
        assert canonical_bytes({"h": bytes(32)}) == b'{"h":"' + b"0" * 64 + b'"}'

    def test_nested_and_unicode(self):
        assert canonical_bytes({"z": [1, {"y": "é", "x": None}], "a": True}) == \
            '{"a":true,"z":[1,{"x":null,"y":"é"}]}'.encode()

    @pytest.mark.parametrize("bad", [float("nan"), float("inf"), {1: "x"}, {"k": object()}, "\ud800"])
    def test_unencodable(self, bad):
        with pytest.raises(UnencodableValue):
            canonical_bytes(bad)


def test_sha256_of_empty_string():
    from b2mdf.ledger import sha256
    assert sha256(b"").hex() == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"


class TestAuthorize:
    @pytest.mark.parametrize("role,kind,expected", [
        (Role.FEATURE_EXTRACTOR, ChainKind.DIPB, True),
        (Role.THIRD_PARTY, ChainKind.DIPB, False),
        (Role.DETECTION_ENGINE, ChainKind.DIPB, False),
        (Role.DETECTION_ENGINE, ChainKind.DEPB, True),
        (Role.DETECTION_ENGINE, ChainKind.CB, True),
        (Role.FEATURE_EXTRACTOR, ChainKind.CB, False),
        (Role.DETERMINANT_AGENT, ChainKind.CB, False),
    ])
    def test_append(self, role, kind, expected):
        assert authorize(role, kind, Action.APPEND) is expected

    @pytest.mark.parametrize("role", list(Role))
    @pytest.mark.parametrize("kind", list(ChainKind))
    def test_read_always_allowed(self, role, kind):
        assert authorize(role, kind, Action.READ)


class TestAppend:
    def test_genesis(self, cast):
        (fe, key), _ = cast[0]["fe"], cast[1]
        chain = Chain("com.a", ChainKind.DIPB)
        block = append_block(chain, {"kind": "permissions", "n": 1}, fe, key, 0)
        assert block.header.height == 0
        assert block.header.prev_hash == ZERO_HASH
        assert block.header.to_json()["prev_hash"] == "0" * 64

    def test_second_block_links_to_oracle_digest(self, cast):
        fe, key = cast[0]["fe"]
        chain = Chain("com.a", ChainKind.DIPB)
        b0 = append_block(chain, {"i": 0}, fe, key, 0)
        b1 = append_block(chain, {"i": 1}, fe, key, 1)
        assert b1.header.height == 1
        assert b1.header.prev_hash.hex() == oracle_digest(b0.header.to_json())
        assert b0.header.payload_hash.hex() == hashlib.sha256(b'{"i":0}').hexdigest()

    def test_third_party_rejected_everywhere(self, cast):
        tp, key = cast[0]["tp"]
        for kind in ChainKind:
            chain = Chain("com.a", kind)
            with pytest.raises(Unauthorized) as err:
                append_block(chain, {}, tp, key, 0)
            assert err.value.participant == "tp-1"
            assert chain.blocks == []

    def test_wrong_key_is_signature_failure(self, cast):
        fe, _ = cast[0]["fe"]
        _, other = cast[0]["de"]
        with pytest.raises(SignatureFailure):
            append_block(Chain("com.a", ChainKind.DIPB), {}, fe, other, 0)

    def test_stale_chain(self, cast):
        fe, key = cast[0]["fe"]
        chain = Chain("com.a", ChainKind.DIPB)
        append_block(chain, {"i": 0}, fe, key, 0)
        append_block(chain, {"i": 1}, fe, key, 1)
        chain.blocks[0] = Block(chain.blocks[0].header, b'{"i":9}', chain.blocks[0].signatures)
        with pytest.raises(StaleChain):
            append_block(chain, {"i": 2}, fe, key, 2)


class TestDigest:
    def test_timestamp_changes_digest(self, cast):
        fe, _ = cast[0]["fe"]
        chain = Chain("com.a", ChainKind.DIPB)
        h0, _ = next_header(chain, {"x": 1}, fe.id, 0)
        h1, _ = next_header(chain, {"x": 1}, fe.id, 1)
        assert h0.digest() != h1.digest()

    def test_deterministic(self, cast):
        fe, key = cast[0]["fe"]
        block = append_block(Chain("com.a", ChainKind.DIPB), {"x": 1}, fe, key, 0)
        assert block_digest(block) == block_digest(block) == bytes.fromhex(oracle_digest(block.header.to_json()))


def _chain(cast, n=4, kind=ChainKind.DIPB):
    who = "fe" if kind is ChainKind.DIPB else "de"
    p, key = cast[0][who]
    chain = Chain("com.a", kind)
    for i in range(n):
        append_block(chain, {"kind": "permissions", "version_code": i % 2, "i": i}, p, key, i)
    return chain


class TestVerifyChain:
    def test_empty_is_valid(self, cast):
        assert verify_chain(Chain("com.a", ChainKind.DIPB), cast[1]).valid

    def test_intact(self, cast):
        assert verify_chain(_chain(cast), cast[1]).valid

    @pytest.mark.parametrize("i", range(4))
    def test_payload_flip(self, cast, i):
        chain = _chain(cast)
        b = chain.blocks[i]
        payload = bytearray(b.payload)
        payload[-2] ^= 0x01
        chain.blocks[i] = Block(b.header, bytes(payload), b.signatures)
        report = verify_chain(chain, cast[1])
        assert (report.valid, report.first_bad_height, report.reason) == (False, i, Reason.PAYLOAD_HASH_MISMATCH)

    def test_bad_signature(self, cast):
        chain = _chain(cast)
        b = chain.blocks[2]
        sig = bytearray(b.signatures[0][1])
        sig[0] ^= 0xFF
        chain.blocks[2] = Block(b.header, b.payload, ((b.signatures[0][0], bytes(sig)),))
        report = verify_chain(chain, cast[1])
        assert (report.first_bad_height, report.reason) == (2, Reason.BAD_SIGNATURE)

    def test_height_gap(self, cast):
        chain = _chain(cast)
        del chain.blocks[1]
        report = verify_chain(chain, cast[1])
        assert (report.first_bad_height, report.reason) == (1, Reason.HEIGHT_GAP)

    def test_unauthorized_author(self, cast):
        # a validly signed block by an engine smuggled onto a DIPB
        people, registry = cast
        de, key = people["de"]
        chain = Chain("com.a", ChainKind.DIPB)
        header, body = next_header(chain, {"x": 1}, de.id, 0)
        chain.blocks.append(Block(header, body, ((de.id, sign(key, header.digest())),)))
        report = verify_chain(chain, registry)
        assert (report.first_bad_height, report.reason) == (0, Reason.UNAUTHORIZED_AUTHOR)

    def test_cb_quorum_shortfall(self, cast):
        people, registry = cast
        de, key = people["de"]
        chain = Chain("com.a", ChainKind.CB)
        header, body = next_header(chain, {"kind": "decision"}, de.id, 0)
        chain.blocks.append(Block(header, body, ((de.id, sign(key, header.digest())),)))
        report = verify_chain(chain, registry, quorum_n=3)
        assert (report.valid, report.reason) == (False, Reason.QUORUM_SHORTFALL)
        # two distinct engine signatures satisfy n = 3
        de2, key2 = people["de2"]
        chain.blocks[0] = Block(header, body, chain.blocks[0].signatures + ((de2.id, sign(key2, header.digest())),))
        assert verify_chain(chain, registry, quorum_n=3).valid

    def test_cb_duplicate_signer(self, cast):
        people, registry = cast
        de, key = people["de"]
        chain = Chain("com.a", ChainKind.CB)
        header, body = next_header(chain, {"kind": "decision"}, de.id, 0)
        sig = sign(key, header.digest())
        chain.blocks.append(Block(header, body, ((de.id, sig), (de.id, sig))))
        assert verify_chain(chain, registry, quorum_n=3).reason is Reason.BAD_SIGNATURE


class TestGetBlocks:
    def test_empty(self):
        assert get_blocks(Chain("com.a", ChainKind.DIPB)) == []

    def test_kind_filter(self, cast):
        fe, key = cast[0]["fe"]
        chain = Chain("com.a", ChainKind.DIPB)
        for kind in ("opcodes", "permissions", "commands"):
            append_block(chain, {"kind": kind, "version_code": 1}, fe, key, len(chain))
        assert [b.content["kind"] for b in get_blocks(chain, kind="permissions")] == ["permissions"]

    def test_version_filter(self, cast):
        de, key = cast[0]["de"]
        chain = Chain("com.a", ChainKind.DEPB)
        for v in (1, 2, 1):
            append_block(chain, {"kind": "score", "version_code": v}, de, key, len(chain))
        assert [b.header.height for b in get_blocks(chain, kind="score", version=1)] == [0, 2]


class TestChainStore:
    def test_missing_chain(self, tmp_path):
        with pytest.raises(MissingChain):
            ChainStore(tmp_path).get("com.a", ChainKind.DIPB)

    def test_roundtrip_through_disk(self, cast, tmp_path):
        fe, key = cast[0]["fe"]
        store = ChainStore(tmp_path)
        for i in range(3):
            store.append("com.a", ChainKind.DIPB, {"i": i, "s": "ü"}, fe, key)
        path = tmp_path / "com.a" / "DIPB.chain"
        reloaded = ChainStore(tmp_path).get("com.a", ChainKind.DIPB)
        assert reloaded.to_jsonl() == path.read_bytes()
        assert [b.header.timestamp for b in reloaded.blocks] == [0, 1, 2]
        assert verify_chain(reloaded, cast[1]).valid

    def test_non_canonical_line_is_malformed(self, cast, tmp_path):
        fe, key = cast[0]["fe"]
        store = ChainStore(tmp_path)
        for i in range(3):
            store.append("com.a", ChainKind.DIPB, {"i": i}, fe, key)
        path = tmp_path / "com.a" / "DIPB.chain"
        lines = path.read_bytes().split(b"\n")
        lines[1] = lines[1].replace(b"{", b"{ ", 1)
        path.write_bytes(b"\n".join(lines))
        report = verify_chain(ChainStore(tmp_path).get("com.a", ChainKind.DIPB), cast[1])
        assert (report.valid, report.first_bad_height, report.reason) == (False, 1, Reason.MALFORMED)

    def test_resolve(self, cast, tmp_path):
        fe, key = cast[0]["fe"]
        store = ChainStore(tmp_path)
        b = store.append("com.a", ChainKind.DIPB, {"i": 0}, fe, key)
        assert ChainStore(tmp_path).resolve("com.a", b.digest()) == b
        assert store.resolve("com.a", bytes(32)) is None

    @pytest.mark.parametrize("bad", ["", "..", "a/b"])
    def test_bad_app_id(self, cast, tmp_path, bad):
        fe, key = cast[0]["fe"]
        with pytest.raises(ValueError):
            ChainStore(tmp_path).append(bad, ChainKind.DIPB, {}, fe, key)


def test_identity_helper_is_deterministic():
    a, _ = make_identity("x", Role.THIRD_PARTY)
    b, _ = make_identity("x", Role.THIRD_PARTY)
    assert a == b
