"""Simulated enclave trust layer.

A deployment root Ed25519 key stands in for the quoting-enclave / DCAP
chain: it signs ``measurement || user_data`` where ``user_data`` carries the
node's P-256 ECDH public key (raw x||y, exactly 64 bytes).  Peers that accept
each other's quote derive a shared AES-256-GCM key with HKDF over the ECDH
secret, bound to the deployment context and the sorted pair of node ids.

Pairwise handshake (the lower node id always initiates)::

    lo -> hi   ATTEST_REQ   quote(lo)
    hi -> lo   ATTEST_RESP  quote(hi)
    lo -> hi   ATTEST_ACK   seal(key, confirmation)
"""

from __future__ import annotations

import enum
import hashlib
import logging
import struct
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from . import __version__
from .errors import AttestationError, AuthenticationError, ReplayError
from .wire import Envelope, Kind

log = logging.getLogger(__name__)

BUILD_ID = f"rexnet/{__version__}".encode()
MEASUREMENT_SIZE = 32
USER_DATA_SIZE = 64
SIGNATURE_SIZE = 64
QUOTE_SIZE = MEASUREMENT_SIZE + USER_DATA_SIZE + SIGNATURE_SIZE
COUNTER = struct.Struct("<Q")
TAG_SIZE = 16
SEAL_OVERHEAD = COUNTER.size + TAG_SIZE


def compute_measurement(scheme: str, mode: str, k: int, build_id: bytes = BUILD_ID) -> bytes:
    """Digest of the build id and the config subset every peer must share."""
    manifest = f"k={int(k)};mode={mode};scheme={scheme}".encode()
    return hashlib.sha256(build_id + b"\x00" + manifest).digest()


def make_root_key(seed: int | None = None) -> Ed25519PrivateKey:
    if seed is None:
        return Ed25519PrivateKey.generate()
    return Ed25519PrivateKey.from_private_bytes(
        hashlib.sha256(b"rexnet-root-key" + str(seed).encode()).digest())


@dataclass
class Identity:
    ecdh_private: ec.EllipticCurvePrivateKey = field(repr=False)
    ecdh_public: bytes
    measurement: bytes

    @classmethod
    def generate(cls, measurement: bytes) -> "Identity":
        if len(measurement) != MEASUREMENT_SIZE:
            raise ValueError("measurement must be 32 bytes")
        priv = ec.generate_private_key(ec.SECP256R1())
        pub = priv.public_key().public_bytes(Encoding.X962, PublicFormat.UncompressedPoint)[1:]
        return cls(priv, pub, measurement)


@dataclass(frozen=True)
class Quote:
    measurement: bytes
    user_data: bytes
    signature: bytes

    def signed_bytes(self) -> bytes:
        return self.measurement + self.user_data

    def to_bytes(self) -> bytes:
        return self.measurement + self.user_data + self.signature

    @classmethod
    def from_bytes(cls, data: bytes) -> "Quote":
        if len(data) != QUOTE_SIZE:
            raise AttestationError("malformed")
        a, b = MEASUREMENT_SIZE, MEASUREMENT_SIZE + USER_DATA_SIZE
        return cls(bytes(data[:a]), bytes(data[a:b]), bytes(data[b:]))


class Verdict(enum.Enum):
    ACCEPT = "accept"
    BAD_SIGNATURE = "bad-signature"
    MEASUREMENT_MISMATCH = "measurement-mismatch"
    MALFORMED = "malformed"

    @property
    def accepted(self) -> bool:
        return self is Verdict.ACCEPT


def make_quote(identity: Identity, root_key: Ed25519PrivateKey) -> Quote:
    return Quote(identity.measurement, identity.ecdh_public,
                 root_key.sign(identity.measurement + identity.ecdh_public))


def verify_quote(q: Quote | bytes, expected_measurement: bytes, root_pub: Ed25519PublicKey) -> Verdict:
    if not isinstance(q, Quote):
        try:
            q = Quote.from_bytes(q)
        except AttestationError:
            return Verdict.MALFORMED
    if (len(q.measurement) != MEASUREMENT_SIZE or len(q.user_data) != USER_DATA_SIZE
            or len(q.signature) != SIGNATURE_SIZE):
        return Verdict.MALFORMED
    try:
        root_pub.verify(q.signature, q.signed_bytes())
    except InvalidSignature:
        return Verdict.BAD_SIGNATURE
    if q.measurement != expected_measurement:
        return Verdict.MEASUREMENT_MISMATCH
    return Verdict.ACCEPT


class SessionKey:
    """Symmetric channel state toward one peer.

    Sealed layout: ``u64 counter || AES-GCM(ciphertext || tag)``.  The nonce
    is ``u32 sender_id || u64 counter`` so the two directions never collide
    under the shared key; the counter is also authenticated as associated
    data and must strictly increase on receive.
    """

    def __init__(self, key: bytes, own_id: int, peer: int):
        if len(key) != 32:
            raise ValueError("session key must be 32 bytes")
        self._aead = AESGCM(key)
        self._key = key
        self.own_id = own_id
        self.peer = peer
        self.send_counter = 0
        self.recv_counter = 0

    def fingerprint(self) -> bytes:
        """Hash of the key, for equality checks that must not expose it."""
        return hashlib.sha256(b"rexnet-fp" + self._key).digest()

    def seal(self, plaintext: bytes, aad: bytes = b"") -> bytes:
        self.send_counter += 1
        ctr = COUNTER.pack(self.send_counter)
        nonce = struct.pack("<I", self.own_id) + ctr
        return ctr + self._aead.encrypt(nonce, plaintext, ctr + aad)

    def open(self, sealed: bytes, aad: bytes = b"") -> bytes:
        if len(sealed) < SEAL_OVERHEAD:
            raise AuthenticationError("sealed message too short")
        ctr = bytes(sealed[: COUNTER.size])
        (counter,) = COUNTER.unpack(ctr)
        if counter <= self.recv_counter:
            raise ReplayError(f"counter {counter} not above last seen {self.recv_counter}")
        nonce = struct.pack("<I", self.peer) + ctr
        try:
            plaintext = self._aead.decrypt(nonce, bytes(sealed[COUNTER.size:]), ctr + aad)
        except InvalidTag:
            raise AuthenticationError("AEAD tag mismatch") from None
        self.recv_counter = counter
        return plaintext


def derive_session(identity: Identity, peer_quote: Quote, own_id: int, peer_id: int,
                   context: bytes = b"") -> SessionKey:
    """ECDH with the peer's quoted public key, then HKDF bound to ``context`` and the id pair."""
    try:
        peer_pub = ec.EllipticCurvePublicKey.from_encoded_point(
            ec.SECP256R1(), b"\x04" + peer_quote.user_data)
    except ValueError:
        raise AttestationError("malformed") from None
    shared = identity.ecdh_private.exchange(ec.ECDH(), peer_pub)
    lo, hi = sorted((own_id, peer_id))
    info = b"rexnet-session\x00" + struct.pack("<II", lo, hi) + context
    key = HKDF(algorithm=hashes.SHA256(), length=32, salt=None, info=info).derive(shared)
    return SessionKey(key, own_id, peer_id)


class PeerState(enum.Enum):
    IDLE = "idle"
    REQ_SENT = "req-sent"
    RESP_SENT = "resp-sent"
    ATTESTED = "attested"
    UNTRUSTED = "untrusted"


def _ack_body(lo: int, hi: int) -> bytes:
    return b"REX-ACK\x00" + struct.pack("<II", lo, hi)


class AttestationManager:
    """Per-peer handshake state for one node.

    ``handle`` consumes an ATTEST_* envelope and returns the envelopes to
    send back.  Callers compare :meth:`state` before and after to learn when a
    peer became attested or untrusted.
    """

    def __init__(self, node_id: int, identity: Identity, root_key: Ed25519PrivateKey,
                 root_pub: Ed25519PublicKey, context: bytes = b""):
        self.node_id = node_id
        self.identity = identity
        self.root_pub = root_pub
        self.context = context
        self.quote = make_quote(identity, root_key).to_bytes()
        self._state: dict[int, PeerState] = {}
        self._sessions: dict[int, SessionKey] = {}
        self.rejections: dict[int, str] = {}

    def state(self, peer: int) -> PeerState:
        return self._state.get(peer, PeerState.IDLE)

    def is_attested(self, peer: int) -> bool:
        return self.state(peer) is PeerState.ATTESTED

    def session(self, peer: int) -> SessionKey:
        if not self.is_attested(peer):
            raise KeyError(f"peer {peer} is not attested")
        return self._sessions[peer]

    def _reject(self, peer: int, reason: str) -> list[Envelope]:
        log.warning("node %d: peer %d rejected (%s)", self.node_id, peer, reason)
        self._state[peer] = PeerState.UNTRUSTED
        self._sessions.pop(peer, None)
        self.rejections[peer] = reason
        return []

    def initiate(self, peer: int, epoch: int = 0) -> list[Envelope]:
        """Start a handshake if this node is the designated initiator."""
        if self.node_id >= peer or self.state(peer) in (PeerState.REQ_SENT, PeerState.ATTESTED,
                                                        PeerState.UNTRUSTED):
            return []
        self._state[peer] = PeerState.REQ_SENT
        return [Envelope(Kind.ATTEST_REQ, self.node_id, peer, epoch, self.quote)]

    def _accept_quote(self, peer: int, body: bytes) -> SessionKey | None:
        verdict = verify_quote(body, self.identity.measurement, self.root_pub)
        if not verdict.accepted:
            self._reject(peer, verdict.value)
            return None
        try:
            return derive_session(self.identity, Quote.from_bytes(body), self.node_id, peer, self.context)
        except AttestationError as exc:
            self._reject(peer, exc.reason)
            return None

    def handle(self, env: Envelope) -> list[Envelope]:
        peer, state = env.sender, self.state(env.sender)
        if state is PeerState.UNTRUSTED:
            return []

        if env.kind is Kind.ATTEST_REQ:
            if peer < self.node_id:
                # our quote is answered even on rejection so the initiator can
                # reach its own verdict instead of waiting forever
                reply = [Envelope(Kind.ATTEST_RESP, self.node_id, peer, env.epoch, self.quote)]
                session = self._accept_quote(peer, env.body)
                if session is not None:
                    self._sessions[peer] = session
                    self._state[peer] = PeerState.RESP_SENT
                return reply
            # higher id tried to initiate: collapse onto our own handshake
            return self.initiate(peer, env.epoch)

        if env.kind is Kind.ATTEST_RESP:
            if state is not PeerState.REQ_SENT:
                return []
            session = self._accept_quote(peer, env.body)
            if session is None:
                return []
            self._sessions[peer] = session
            self._state[peer] = PeerState.ATTESTED
            ack = Envelope(Kind.ATTEST_ACK, self.node_id, peer, env.epoch)
            body = session.seal(_ack_body(self.node_id, peer), ack.header_bytes())
            return [Envelope(Kind.ATTEST_ACK, self.node_id, peer, env.epoch, body)]

        if env.kind is Kind.ATTEST_ACK:
            if state is not PeerState.RESP_SENT:
                return []
            try:
                plain = self._sessions[peer].open(env.body, env.header_bytes())
            except (AuthenticationError, ReplayError):
                return self._reject(peer, "ack-authentication")
            if plain != _ack_body(peer, self.node_id):
                return self._reject(peer, "ack-content")
            self._state[peer] = PeerState.ATTESTED
            return []

        raise ValueError(f"not an attestation envelope: {env.kind!r}")
