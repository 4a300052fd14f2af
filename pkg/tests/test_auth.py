import hashlib
import json
import random
from dataclasses import replace
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from v2xtrust.auth import (
    DIGEST_SIZE,
    EXPIRED,
    INVALID_CHALLENGE,
    REPLAY,
    RSU,
    AuthAgent,
    AuthConfig,
    AuthError,
    Authority,
    AuthorityKeys,
    PeerBroadcast,
    PeerVerifier,
    RoundToken,
    TokenRequest,
    VehicleCredential,
    combine,
    compose_hash,
    contains_secret,
    make_broadcast,
    verify_peer,
)

from fleet import KEYS, Entropy, Fleet

GOLDEN = Path(__file__).parent / "data" / "auth_golden.json"


# ---------------------------------------------------------------- composable hash


def test_compose_hash_deterministic_and_compositional():
    a, b = b"alpha", b"beta"
    assert compose_hash([a]) == compose_hash([a])
    assert len(compose_hash([a])) == DIGEST_SIZE
    assert combine(compose_hash([a]), compose_hash([b])) == compose_hash([a, b])


def test_combine_associative_100_triples():
    rng = random.Random(7)
    for _ in range(100):
        a, b, c = (compose_hash([rng.randbytes(rng.randint(0, 40))]) for _ in range(3))
        assert combine(combine(a, b), c) == combine(a, combine(b, c))


def test_compose_rejects_empty():
    with pytest.raises(ValueError):
        compose_hash([])
    with pytest.raises(ValueError):
        combine(b"short")


# ---------------------------------------------------------------- provisioning


def test_provision_roundtrip_and_accept():
    f = Fleet(2)
    a, b = f.agents
    assert verify_peer(b.verifier, a.broadcast(), 1.0)
    assert VehicleCredential.from_bytes(a.credential.to_bytes()) == a.credential


def test_credentials_never_contain_secrets():
    f = Fleet(3)
    blobs = [a.credential.to_bytes() for a in f.agents]
    blobs += [a.token.to_bytes() for a in f.agents]
    blobs += [a.broadcast() for a in f.agents]
    blobs += [a.renewal_request().to_bytes() for a in f.agents]
    blobs.append(repr(f.authority).encode() + repr(KEYS).encode())
    for blob in blobs:
        assert not contains_secret(blob, KEYS)


def test_contains_secret_detects_leak():
    assert contains_secret(b"xx" + KEYS.s_m[5:13] + b"yy", KEYS)


def test_distinct_challenges_over_1000_provisions():
    auth = Authority(KEYS, Entropy(b"many"))
    chals = {auth.provision_vehicle(i.to_bytes(16, "big")).chal_c for i in range(1000)}
    assert len(chals) == 1000


def test_duplicate_or_bad_uuid_rejected():
    auth = Authority(KEYS, Entropy(b"dup"))
    auth.provision_vehicle(b"\x01" * 16)
    with pytest.raises(AuthError):
        auth.provision_vehicle(b"\x01" * 16)
    with pytest.raises(AuthError):
        auth.provision_vehicle(b"short")


# ---------------------------------------------------------------- round signatures


def test_round_signature_refresh():
    auth = Authority(KEYS, Entropy(b"rs"))
    exp = auth.config.expiration_time
    s1 = auth.first_round_signature(0.0)
    with pytest.raises(AuthError):
        auth.refresh_round_signature(s1, exp - 1)
    s2 = auth.refresh_round_signature(s1, exp + 1)
    assert s2.round_num == s1.round_num + 1
    s3 = auth.refresh_round_signature(s2, 2 * exp + 2)
    s4 = auth.refresh_round_signature(s3, 3 * exp + 3)
    assert [s.round_num for s in (s2, s3, s4)] == [2, 3, 4]
    assert len({s.sig_r for s in (s1, s2, s3, s4)}) == 4


# ---------------------------------------------------------------- token issuance


def test_token_bound_to_current_round():
    f = Fleet(1)
    assert f.agents[0].token.bound_round == f.round_sig.round_num


def test_replayed_request_rejected():
    f = Fleet(1)
    req = f.agents[0].renewal_request()
    f.rsu.issue_token(req, (0, 0), 1.0)
    with pytest.raises(AuthError) as exc:
        f.rsu.issue_token(TokenRequest.from_bytes(req.to_bytes()), (0, 0), 2.0)
    assert exc.value.reason == REPLAY


def test_corrupted_challenge_rejected():
    f = Fleet(1)
    cred = f.agents[0].credential
    bad = replace(cred, chal_c=bytes(b ^ 0xFF for b in cred.chal_c))
    with pytest.raises(AuthError) as exc:
        f.rsu.issue_token(TokenRequest.build(bad, b"n" * 16), (0, 0), 1.0)
    assert exc.value.reason == INVALID_CHALLENGE


def test_out_of_range_gets_nothing():
    f = Fleet(1)
    assert f.rsu.issue_token(f.agents[0].renewal_request(), (500.0, 0.0), 1.0) is None


def test_sealed_token_only_opens_for_holder():
    f = Fleet(2)
    sealed = f.rsu.issue_token(f.agents[0].renewal_request(), (0, 0), 1.0)
    with pytest.raises(AuthError):
        f.agents[1].accept_sealed_token(sealed)


# ---------------------------------------------------------------- peer verification


def test_one_round_stale_accepted_two_rejected():
    f = Fleet(2, now=0.0)
    a, b = f.agents
    exp = AuthConfig().expiration_time
    f.renew_all(exp - 5)
    old = a.token
    f.new_round(exp + 1)
    a.token = old
    assert verify_peer(b.verifier, a.broadcast(), exp + 2)
    f.new_round(2 * exp + 2)
    a.token = old
    v = verify_peer(b.verifier, a.broadcast(), 2 * exp + 3)
    assert not v and v.reason == EXPIRED


def test_replayed_broadcast_rejected():
    f = Fleet(2)
    a, b = f.agents
    raw = a.broadcast()
    assert verify_peer(b.verifier, raw, 1.0)
    v = verify_peer(b.verifier, raw, 2.0)
    assert not v and v.reason == REPLAY


def test_completeness_all_pairs_accept():
    f = Fleet(6)
    for r in range(3):
        now = r * 61.0 + 1
        if r:
            f.new_round(now - 0.5)
        for a in f.agents:
            raw = a.broadcast()
            for b in f.agents:
                if b is not a:
                    assert verify_peer(b.verifier, raw, now)


def test_soundness_1000_forged_broadcasts():
    f = Fleet(2)
    victim = f.agents[1]
    honest = f.agents[0]
    rng = random.Random(11)
    forger = Authority(AuthorityKeys(b"x" * 32, b"y" * 32), Entropy(b"forger"))
    rejected = 0
    for i in range(1000):
        cred = forger.provision_vehicle(rng.randbytes(16))
        cred = replace(cred, chal_c=rng.randbytes(len(cred.chal_c)))
        # copy a genuine token's public pieces, bind them to the forged credential
        token = honest.token
        if i % 2:
            token = replace(token, chal_t=rng.randbytes(len(token.chal_t)))
        raw = make_broadcast(cred, token, rng.randbytes(16)).to_bytes()
        if not verify_peer(victim.verifier, raw, 1.0):
            rejected += 1
    assert rejected == 1000


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 255))
def test_bit_flips_rejected(pos, flip):
    f = _shared_fleet()
    raw = bytearray(f.agents[0].broadcast())
    pos %= len(raw)
    raw[pos] ^= flip or 1
    assert not verify_peer(f.agents[1].verifier, bytes(raw), 1.0)


_FLEET = None


def _shared_fleet():
    global _FLEET
    if _FLEET is None:
        _FLEET = Fleet(2, label=b"flip")
    return _FLEET


# ---------------------------------------------------------------- golden bytes


def golden_snapshot() -> dict:
    f = Fleet(2, label=b"golden")
    a = f.agents[0]
    return {
        "compose_hash_ab": compose_hash([b"a", b"b"]).hex(),
        "credential": a.credential.to_bytes().hex(),
        "token": a.token.to_bytes().hex(),
        "broadcast": a.broadcast().hex(),
        "round_sig": f.round_sig.sig_r.hex(),
    }


def test_wire_encoding_matches_golden_file():
    expected = json.loads(GOLDEN.read_text())
    assert golden_snapshot() == expected


def test_wire_roundtrip():
    f = Fleet(1)
    a = f.agents[0]
    assert RoundToken.from_bytes(a.token.to_bytes()) == a.token
    raw = a.broadcast()
    assert PeerBroadcast.from_bytes(raw).to_bytes() == raw
