"""Three-party authentication: manufacturer + government provisioning,
round-signature refresh, RSU-issued ephemeral tokens, and peer
verification with nonce-based replay protection.

Only keyed-hash derivations of the two authority secrets ever leave the
:class:`Authority`.  Byte encodings are length-prefixed records with a
one-byte version tag so they are stable across runs.
"""

from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

WIRE_VERSION = 1
DIGEST_SIZE = 32
_LANES = DIGEST_SIZE // 2

_RAW = serialization.Encoding.Raw
_RAW_PUB = serialization.PublicFormat.Raw


class AuthError(Exception):
    """Raised when an authority or RSU refuses a request."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


# reject reasons
REPLAY = "replay"
EXPIRED = "expired_token"  # E11
INVALID_CHALLENGE = "invalid_challenge"  # E10
BAD_ROUND_TAG = "bad_round_tag"
BAD_SIGNATURE = "bad_signature"
MALFORMED = "malformed"
NO_TOKEN = "no_local_token"


# --------------------------------------------------------------------------
# additively composable hash


def _lane_hash(part: bytes) -> tuple[int, ...]:
    return struct.unpack(f"<{_LANES}H", hashlib.blake2b(part, digest_size=DIGEST_SIZE).digest())


def _pack_lanes(lanes) -> bytes:
    return struct.pack(f"<{_LANES}H", *lanes)


def combine(*digests: bytes) -> bytes:
    """Lane-wise modular sum of digests (associative and commutative)."""
    if not digests:
        raise ValueError("combine needs at least one digest")
    acc = [0] * _LANES
    for d in digests:
        if len(d) != DIGEST_SIZE:
            raise ValueError(f"digest must be {DIGEST_SIZE} bytes")
        for i, v in enumerate(struct.unpack(f"<{_LANES}H", d)):
            acc[i] = (acc[i] + v) & 0xFFFF
    return _pack_lanes(acc)


def compose_hash(parts) -> bytes:
    """Hash an ordered list of byte strings so that
    ``compose_hash([a, b]) == combine(compose_hash([a]), compose_hash([b]))``.

    Each part maps to 16 little-endian 16-bit lanes of BLAKE2b output;
    composition adds lanes mod 2**16.  Callers that need order sensitivity
    tag each part with its role.
    """
    parts = list(parts)
    if not parts:
        raise ValueError("compose_hash needs at least one part")
    acc = [0] * _LANES
    for p in parts:
        for i, v in enumerate(_lane_hash(bytes(p))):
            acc[i] = (acc[i] + v) & 0xFFFF
    return _pack_lanes(acc)


def _keyed(key: bytes, *msg: bytes) -> bytes:
    return hmac.new(key, b"".join(msg), hashlib.sha256).digest()


def id_hash(uuid: bytes) -> bytes:
    return hashlib.sha256(b"id:" + uuid).digest()


# --------------------------------------------------------------------------
# wire records


def pack_record(tag: bytes, *fields: bytes) -> bytes:
    out = [bytes([WIRE_VERSION]), tag[:4].ljust(4, b"\0")]
    for f in fields:
        out.append(struct.pack(">I", len(f)))
        out.append(f)
    return b"".join(out)


def unpack_record(data: bytes, tag: bytes) -> list[bytes]:
    if len(data) < 5 or data[0] != WIRE_VERSION:
        raise AuthError(MALFORMED, "bad version")
    if data[1:5] != tag[:4].ljust(4, b"\0"):
        raise AuthError(MALFORMED, f"expected record {tag!r}")
    fields, pos = [], 5
    while pos < len(data):
        if pos + 4 > len(data):
            raise AuthError(MALFORMED, "truncated length")
        (n,) = struct.unpack_from(">I", data, pos)
        pos += 4
        if pos + n > len(data):
            raise AuthError(MALFORMED, "truncated field")
        fields.append(data[pos : pos + n])
        pos += n
    return fields


def _u64(n: int) -> bytes:
    return struct.pack(">Q", n)


def _f64(x: float) -> bytes:
    return struct.pack(">d", x)


# --------------------------------------------------------------------------
# keys


@dataclass(frozen=True)
class KeyPair:
    """Signing (Ed25519) plus encryption (X25519) keys for one participant.

    ``public`` is the 64-byte concatenation of both public keys.
    """

    sign_secret: bytes
    box_secret: bytes

    @classmethod
    def from_seed(cls, seed64: bytes) -> "KeyPair":
        return cls(seed64[:32], seed64[32:64])

    @property
    def public(self) -> bytes:
        return _public_of(self.sign_secret, self.box_secret)

    def sign(self, msg: bytes) -> bytes:
        return _signer(self.sign_secret).sign(msg)

    def decrypt(self, sealed: bytes) -> bytes:
        eph, nonce, ct = sealed[:32], sealed[32:44], sealed[44:]
        shared = X25519PrivateKey.from_private_bytes(self.box_secret).exchange(
            X25519PublicKey.from_public_bytes(eph)
        )
        return ChaCha20Poly1305(_box_key(shared, eph)).decrypt(nonce, ct, None)


@lru_cache(maxsize=4096)
def _signer(secret: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(secret)


@lru_cache(maxsize=4096)
def _public_of(sign_secret: bytes, box_secret: bytes) -> bytes:
    s = Ed25519PrivateKey.from_private_bytes(sign_secret).public_key().public_bytes(_RAW, _RAW_PUB)
    b = X25519PrivateKey.from_private_bytes(box_secret).public_key().public_bytes(_RAW, _RAW_PUB)
    return s + b


@lru_cache(maxsize=65536)
def verify_signature(public: bytes, msg: bytes, sig: bytes) -> bool:
    """Ed25519 check against the signing half of a 64-byte public key (or a
    bare 32-byte verify key).  Memoised: verification is a pure function."""
    try:
        Ed25519PublicKey.from_public_bytes(public[:32]).verify(sig, msg)
        return True
    except (InvalidSignature, ValueError):
        return False


def _box_key(shared: bytes, eph: bytes) -> bytes:
    return HKDF(hashes.SHA256(), 32, salt=eph, info=b"token-box").derive(shared)


def seal(public: bytes, plaintext: bytes, entropy: bytes) -> bytes:
    """Encrypt to the X25519 half of ``public``; ``entropy`` is 44 random
    bytes (ephemeral key + AEAD nonce) so sealing is reproducible."""
    eph_priv = X25519PrivateKey.from_private_bytes(entropy[:32])
    eph = eph_priv.public_key().public_bytes(_RAW, _RAW_PUB)
    shared = eph_priv.exchange(X25519PublicKey.from_public_bytes(public[32:64]))
    nonce = entropy[32:44]
    return eph + nonce + ChaCha20Poly1305(_box_key(shared, eph)).encrypt(nonce, plaintext, None)


# --------------------------------------------------------------------------
# domain types


@dataclass(frozen=True, repr=False)
class AuthorityKeys:
    """Government and manufacturer secrets.  Never serialised."""

    s_g: bytes
    s_m: bytes

    def __repr__(self) -> str:
        return "AuthorityKeys(<redacted>)"


@dataclass(frozen=True)
class VehicleCredential:
    uuid: bytes
    keys: KeyPair
    chal_c: bytes
    resp_c: bytes

    @property
    def public(self) -> bytes:
        return self.keys.public

    def to_bytes(self) -> bytes:
        return pack_record(b"CRED", self.uuid, self.keys.sign_secret, self.keys.box_secret, self.chal_c, self.resp_c)

    @classmethod
    def from_bytes(cls, data: bytes) -> "VehicleCredential":
        uuid, ss, bs, chal, resp = unpack_record(data, b"CRED")
        return cls(uuid, KeyPair(ss, bs), chal, resp)


@dataclass(frozen=True)
class RoundSignature:
    round_num: int
    uuid_r: bytes
    sig_r: bytes
    issued_at: float

    def round_key(self) -> bytes:
        """Shared per-round verification key handed out as ``resp_t``."""
        return hashlib.sha256(b"resp-t:" + self.sig_r).digest()


@dataclass(frozen=True)
class RoundToken:
    chal_t: bytes  # RSU attestation over (id hash, chal_c, public key, round, issue time)
    resp_t: bytes  # round verification key
    bound_round: int
    issued_at: float
    rsu_id: str

    def age(self, now: float) -> float:
        return now - self.issued_at

    def to_bytes(self) -> bytes:
        return pack_record(
            b"TOKN", self.chal_t, self.resp_t, _u64(self.bound_round), _f64(self.issued_at), self.rsu_id.encode()
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "RoundToken":
        chal_t, resp_t, rn, ia, rsu = unpack_record(data, b"TOKN")
        return cls(chal_t, resp_t, struct.unpack(">Q", rn)[0], struct.unpack(">d", ia)[0], rsu.decode())


def token_binding(idh: bytes, chal_c: bytes, public: bytes, bound_round: int, issued_at: float) -> bytes:
    return pack_record(b"BIND", idh, chal_c, public, _u64(bound_round), _f64(issued_at))


@dataclass(frozen=True)
class AuthConfig:
    expiration_time: float = 60.0
    renew_fraction: float = 0.9
    rsu_range: float = 50.0

    @property
    def nonce_retention(self) -> float:
        return 2.0 * self.expiration_time


# --------------------------------------------------------------------------
# authority (manufacturer + government acting together)


class Authority:
    def __init__(self, keys: AuthorityKeys, entropy: Callable[[int], bytes], config: AuthConfig = AuthConfig()):
        self._keys = keys
        self._entropy = entropy
        self.config = config
        self._provisioned: set[bytes] = set()
        # keyed derivations handed to trusted RSUs; secrets stay here
        self._chal_key = compose_hash([_keyed(keys.s_m, b"chal-key"), _keyed(keys.s_g, b"chal-key")])
        self._resp_key = compose_hash([_keyed(keys.s_m, b"resp-key"), _keyed(keys.s_g, b"resp-key")])

    def gen_chal(self, uuid: bytes) -> bytes:
        return _keyed(self._chal_key, b"chal:", uuid)

    def gen_resp(self, uuid: bytes) -> bytes:
        return _keyed(self._resp_key, b"resp:", uuid)

    def provision_vehicle(self, uuid: bytes) -> VehicleCredential:
        if len(uuid) != 16:
            raise AuthError("bad_uuid", "UUID_c must be 16 bytes")
        if uuid in self._provisioned:
            raise AuthError("duplicate_uuid", uuid.hex())
        self._provisioned.add(uuid)
        keys = KeyPair.from_seed(self._entropy(64))
        return VehicleCredential(uuid, keys, self.gen_chal(uuid), self.gen_resp(uuid))

    def rsu_material(self) -> tuple[bytes, bytes]:
        return self._chal_key, self._resp_key

    def _round_sig(self, round_num: int, uuid_r: bytes) -> bytes:
        rn = _u64(round_num)
        return compose_hash(
            [
                b"round:" + rn,
                b"uuid_r:" + uuid_r,
                _keyed(self._keys.s_m, b"round", rn, uuid_r),
                _keyed(self._keys.s_g, b"round", rn, uuid_r),
            ]
        )

    def first_round_signature(self, now: float) -> RoundSignature:
        uuid_r = self._entropy(16)
        return RoundSignature(1, uuid_r, self._round_sig(1, uuid_r), now)

    def refresh_round_signature(self, prev: RoundSignature, now: float) -> RoundSignature:
        if now - prev.issued_at <= self.config.expiration_time:
            raise AuthError("premature_refresh", f"age {now - prev.issued_at:g}s")
        n = prev.round_num + 1
        uuid_r = self._entropy(16)
        return RoundSignature(n, uuid_r, self._round_sig(n, uuid_r), now)


# --------------------------------------------------------------------------
# RSU


@dataclass(frozen=True)
class TokenRequest:
    uuid: bytes
    chal_c: bytes
    public: bytes
    nonce: bytes
    resp_proof: bytes
    signature: bytes

    def body(self) -> bytes:
        return pack_record(b"TREQ", self.uuid, self.chal_c, self.public, self.nonce, self.resp_proof)

    def to_bytes(self) -> bytes:
        return pack_record(b"TRQS", self.body(), self.signature)

    @classmethod
    def from_bytes(cls, data: bytes) -> "TokenRequest":
        body, sig = unpack_record(data, b"TRQS")
        uuid, chal, pub, nonce, proof = unpack_record(body, b"TREQ")
        return cls(uuid, chal, pub, nonce, proof, sig)

    @classmethod
    def build(cls, cred: VehicleCredential, nonce: bytes) -> "TokenRequest":
        proof = _keyed(cred.resp_c, b"proof:", nonce)
        unsigned = cls(cred.uuid, cred.chal_c, cred.public, nonce, proof, b"")
        return cls(cred.uuid, cred.chal_c, cred.public, nonce, proof, cred.keys.sign(unsigned.body()))


class RSU:
    """Road-side unit: validates renewal requests and issues round tokens."""

    def __init__(
        self,
        rsu_id: str,
        position: tuple[float, float],
        authority_material: tuple[bytes, bytes],
        signing_secret: bytes,
        entropy: Callable[[int], bytes],
        config: AuthConfig = AuthConfig(),
    ):
        self.id = rsu_id
        self.position = position
        self.config = config
        self._chal_key, self._resp_key = authority_material
        self._sign_key = signing_secret
        self.public = _signer(signing_secret).public_key().public_bytes(_RAW, _RAW_PUB)
        self._entropy = entropy
        self.round_sig: RoundSignature | None = None
        self._seen: dict[bytes, float] = {}

    def receive_round_signature(self, sig: RoundSignature) -> None:
        self.round_sig = sig

    def within_range(self, pos) -> bool:
        dx, dy = pos[0] - self.position[0], pos[1] - self.position[1]
        return dx * dx + dy * dy <= self.config.rsu_range**2

    def issue_token(self, request: TokenRequest, vehicle_pos, now: float) -> bytes | None:
        """Validate a renewal request and return the sealed token bytes.

        Returns ``None`` when the vehicle is out of range; raises
        :class:`AuthError` on an invalid credential or a reused nonce.
        """
        if not self.within_range(vehicle_pos):
            return None
        if self.round_sig is None:
            raise AuthError("no_round_signature")
        self._expire(now)
        if request.nonce in self._seen:
            raise AuthError(REPLAY, "token request nonce reused")
        self._seen[request.nonce] = now
        if not hmac.compare_digest(request.chal_c, _keyed(self._chal_key, b"chal:", request.uuid)):
            raise AuthError(INVALID_CHALLENGE)
        resp_c = _keyed(self._resp_key, b"resp:", request.uuid)
        if not hmac.compare_digest(request.resp_proof, _keyed(resp_c, b"proof:", request.nonce)):
            raise AuthError("invalid_response")
        if not verify_signature(request.public, request.body(), request.signature):
            raise AuthError(BAD_SIGNATURE)
        token = self._attest(request.uuid, request.chal_c, request.public, self.round_sig, now)
        return seal(request.public, token.to_bytes(), self._entropy(44))

    def _attest(self, uuid, chal_c, public, rs: RoundSignature, issued_at: float) -> RoundToken:
        binding = token_binding(id_hash(uuid), chal_c, public, rs.round_num, issued_at)
        return RoundToken(_signer(self._sign_key).sign(binding), rs.round_key(), rs.round_num, issued_at, self.id)

    def issue_stale_token(self, cred: VehicleCredential, stale: RoundSignature, issued_at: float) -> RoundToken:
        """Fault-injection hook: a genuinely attested token for an old round."""
        return self._attest(cred.uuid, cred.chal_c, cred.public, stale, issued_at)

    def _expire(self, now: float) -> None:
        horizon = now - self.config.nonce_retention
        for n in [n for n, t in self._seen.items() if t < horizon]:
            del self._seen[n]


# --------------------------------------------------------------------------
# peer broadcast and verification


@dataclass(frozen=True)
class PeerBroadcast:
    id_hash: bytes
    chal_c: bytes
    public: bytes
    nonce: bytes
    bound_round: int
    issued_at: float
    rsu_id: str
    chal_t: bytes
    round_tag: bytes
    signature: bytes = b""

    def body(self) -> bytes:
        return pack_record(
            b"PBCB",
            self.id_hash,
            self.chal_c,
            self.public,
            self.nonce,
            _u64(self.bound_round),
            _f64(self.issued_at),
            self.rsu_id.encode(),
            self.chal_t,
            self.round_tag,
        )

    def to_bytes(self) -> bytes:
        return pack_record(b"PBCS", self.body(), self.signature)

    @classmethod
    def from_bytes(cls, data: bytes) -> "PeerBroadcast":
        body, sig = unpack_record(data, b"PBCS")
        f = unpack_record(body, b"PBCB")
        if len(f) != 9:
            raise AuthError(MALFORMED, "peer broadcast field count")
        return cls(
            f[0], f[1], f[2], f[3], struct.unpack(">Q", f[4])[0], struct.unpack(">d", f[5])[0], f[6].decode(), f[7], f[8], sig
        )


def _round_tag(resp_t: bytes, idh: bytes, nonce: bytes, chal_c: bytes) -> bytes:
    return _keyed(resp_t, b"tag:", idh, nonce, chal_c)


def make_broadcast(cred: VehicleCredential, token: RoundToken, nonce: bytes) -> PeerBroadcast:
    idh = id_hash(cred.uuid)
    b = PeerBroadcast(
        idh, cred.chal_c, cred.public, nonce, token.bound_round, token.issued_at, token.rsu_id, token.chal_t,
        _round_tag(token.resp_t, idh, nonce, cred.chal_c),
    )
    return replace(b, signature=cred.keys.sign(b.body()))


@dataclass
class Verdict:
    accepted: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.accepted


@dataclass
class PeerVerifier:
    """A participant's local verification state: round keys received with
    its tokens, the known RSU verify keys, and its nonce store."""

    rsu_keys: dict[str, bytes]
    config: AuthConfig = field(default_factory=AuthConfig)
    round_keys: dict[int, bytes] = field(default_factory=dict)
    seen_nonces: dict[bytes, float] = field(default_factory=dict)
    peer_keys: dict[bytes, bytes] = field(default_factory=dict)

    def learn_token(self, token: RoundToken) -> None:
        self.round_keys[token.bound_round] = token.resp_t
        for r in [r for r in self.round_keys if r < token.bound_round - 1]:
            del self.round_keys[r]

    @property
    def current_round(self) -> int:
        return max(self.round_keys, default=0)

    def verify(self, raw: bytes, now: float) -> Verdict:
        """Check a peer's broadcast against local token state.

        Accepts iff the peer holds an RSU-attested token for the current or
        immediately preceding round, its round tag matches the locally held
        round key, it signed the broadcast, and its nonce is fresh.
        """
        if not self.round_keys:
            return Verdict(False, NO_TOKEN)
        try:
            b = PeerBroadcast.from_bytes(raw)
        except (AuthError, struct.error, UnicodeDecodeError):
            return Verdict(False, MALFORMED)
        self._expire(now)
        if b.nonce in self.seen_nonces:
            return Verdict(False, REPLAY)
        self.seen_nonces[b.nonce] = now
        cur = self.current_round
        if b.bound_round not in (cur, cur - 1) or now - b.issued_at > self.config.expiration_time:
            return Verdict(False, EXPIRED)
        rsu_pub = self.rsu_keys.get(b.rsu_id)
        binding = token_binding(b.id_hash, b.chal_c, b.public, b.bound_round, b.issued_at)
        if rsu_pub is None or not verify_signature(rsu_pub, binding, b.chal_t):
            return Verdict(False, INVALID_CHALLENGE)
        key = self.round_keys.get(b.bound_round)
        if key is None or not hmac.compare_digest(b.round_tag, _round_tag(key, b.id_hash, b.nonce, b.chal_c)):
            return Verdict(False, BAD_ROUND_TAG)
        if not verify_signature(b.public, b.body(), b.signature):
            return Verdict(False, BAD_SIGNATURE)
        self.peer_keys[b.id_hash] = b.public
        return Verdict(True)

    def _expire(self, now: float) -> None:
        horizon = now - self.config.nonce_retention
        if self.seen_nonces and next(iter(self.seen_nonces.values())) < horizon:
            self.seen_nonces = {n: t for n, t in self.seen_nonces.items() if t >= horizon}


def verify_peer(verifier: PeerVerifier, broadcast: bytes, now: float) -> Verdict:
    return verifier.verify(broadcast, now)


# --------------------------------------------------------------------------
# participant-side agent


@dataclass
class AuthAgent:
    """Holds one participant's credential, current token and verifier."""

    credential: VehicleCredential
    verifier: PeerVerifier
    entropy: Callable[[int], bytes]
    token: RoundToken | None = None
    frozen: bool = False  # stops renewing (expired-token fault)

    def needs_renewal(self, now: float, config: AuthConfig) -> bool:
        if self.frozen:
            return False
        return self.token is None or self.token.age(now) >= config.renew_fraction * config.expiration_time

    def renewal_request(self) -> TokenRequest:
        return TokenRequest.build(self.credential, self.entropy(16))

    def accept_sealed_token(self, sealed: bytes) -> RoundToken:
        try:
            token = RoundToken.from_bytes(self.credential.keys.decrypt(sealed))
        except InvalidTag as exc:
            raise AuthError("undecryptable_token") from exc
        self.token = token
        self.verifier.learn_token(token)
        return token

    def broadcast(self) -> bytes:
        if self.token is None:
            raise AuthError(NO_TOKEN)
        return make_broadcast(self.credential, self.token, self.entropy(16)).to_bytes()


def contains_secret(blob: bytes, keys: AuthorityKeys, window: int = 8) -> bool:
    """True if any ``window``-byte run of either authority secret occurs in blob."""
    for secret in (keys.s_g, keys.s_m):
        for i in range(len(secret) - window + 1):
            if secret[i : i + window] in blob:
                return True
    return False
