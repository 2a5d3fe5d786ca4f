"""Per-node protocol state machine.

A node is driven entirely by two entry points, :meth:`RexNode.on_init` and
:meth:`RexNode.on_message`; each runs to completion and returns the
envelopes to put on the wire.  Nothing here does IO or touches a clock other
than for phase timing, so the same object runs under the simulated loop and
over TCP.

Epoch numbering: round 0 trains on local data only.  Round ``e >= 1`` fires
once every live neighbor has delivered its epoch ``e - 1`` message (a
payload or an empty tick), merges what arrived, trains, shares epoch ``e``
output and tests.  The last round, ``max_epochs``, shares nothing.
"""

from __future__ import annotations

import enum
import logging
import math
import struct
import time
from collections import Counter, defaultdict
from dataclasses import dataclass

import numpy as np

from .dataset import RatingSet, RatingTriple
from .errors import (AuthenticationError, CodecError, ConfigError, NumericError,
                     ProtocolError, ReplayError)
from .harness.metrics import MetricsRecord
from .merge import NeighborModel, dpsgd_merge, rmw_merge
from .mf import MfModel, TrainConfig, decode_model, encode_model, init_model, rmse, rmse_clamped, sgd_epoch
from .secure_channel import AttestationManager, PeerState
from .sharing import DataStore, append_dedup, decode_triples, encode_triples, sample_shareable
from .wire import ATTEST_KINDS, Envelope, Kind

log = logging.getLogger(__name__)


class Scheme(str, enum.Enum):
    RMW = "rmw"
    DPSGD = "dpsgd"


class Mode(str, enum.Enum):
    DS = "ds"
    MS = "ms"


@dataclass(frozen=True)
class NodeConfig:
    node_id: int
    scheme: Scheme
    mode: Mode
    share_count: int
    train: TrainConfig
    max_epochs: int
    neighbors: tuple[int, ...]
    k: int = 10
    seed: int = 0
    test_every: int = 1

    def __post_init__(self):
        if self.share_count < 0:
            raise ConfigError("share_count must be >= 0")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be >= 0")
        if self.node_id in self.neighbors or len(set(self.neighbors)) != len(self.neighbors):
            raise ConfigError("neighbors must be distinct and exclude the node itself")
        if self.test_every < 1:
            raise ConfigError("test_every must be >= 1")

    @property
    def degree(self) -> int:
        return len(self.neighbors)


@dataclass
class Payload:
    epoch: int
    sender_degree: int = 0
    model: MfModel | None = None
    triples: list[RatingTriple] | None = None
    empty_tick: bool = False


_DEGREE = struct.Struct("<I")


def encode_payload(p: Payload, mode: Mode) -> bytes:
    if mode is Mode.DS:
        return encode_triples(p.triples or [])
    return _DEGREE.pack(p.sender_degree) + encode_model(p.model)


def decode_payload(body: bytes, mode: Mode, epoch: int) -> Payload:
    if mode is Mode.DS:
        return Payload(epoch, triples=decode_triples(body))
    if len(body) < _DEGREE.size:
        raise CodecError("model payload shorter than degree prefix")
    (degree,) = _DEGREE.unpack_from(body, 0)
    if degree < 1:
        raise CodecError("sender degree must be >= 1")
    return Payload(epoch, sender_degree=degree, model=decode_model(memoryview(body)[_DEGREE.size:]))


@dataclass
class _Timing:
    merge_ms: float = 0.0
    train_ms: float = 0.0
    share_ms: float = 0.0
    test_ms: float = 0.0
    rmse: float = math.nan
    rmse_clamped: float = math.nan


class RexNode:
    """One participant: local store, model, handshake state and epoch barrier."""

    def __init__(self, cfg: NodeConfig, local_train: RatingSet, local_test: RatingSet,
                 attestation: AttestationManager):
        if len(local_train) == 0:
            raise ConfigError(f"node {cfg.node_id} has no local training data")
        if len(local_test) == 0:
            raise ConfigError(f"node {cfg.node_id} has no local test data")
        if attestation.node_id != cfg.node_id:
            raise ConfigError("attestation manager belongs to another node")
        self.cfg = cfg
        self.id = cfg.node_id
        self.attestation = attestation
        self.store = DataStore(local_train)
        self.test = local_test
        self.model = init_model(local_train.n_users, local_train.n_items, cfg.k,
                                seed=[cfg.seed, cfg.node_id, 0])
        self.epoch = 0
        self.started = False
        self.finished = False
        self.failure: str | None = None
        self.live: set[int] = set(cfg.neighbors)
        self.inbox: dict[int, dict[int, Payload]] = {}
        self._pending: dict[int, list[tuple[int, bytes | None]]] = defaultdict(list)
        self.counters: Counter[str] = Counter()
        self.phase_log: list[tuple[int, str]] = []
        self.event_log: list[tuple] = []
        self.bytes_sent: Counter[int] = Counter()
        self.bytes_received: Counter[int] = Counter()
        self._timing: dict[int, _Timing] = {}

    # -- entry points ---------------------------------------------------------

    def on_init(self) -> list[Envelope]:
        if self.started:
            raise ProtocolError("node already started")
        self.started = True
        out: list[Envelope] = []
        for peer in self.cfg.neighbors:
            out += self.attestation.initiate(peer, 0)
        out += self._round()
        out += self._advance()
        return self._account(out)

    def on_message(self, env: Envelope) -> list[Envelope]:
        self.bytes_received[env.epoch] += env.frame_size
        peer = env.sender
        if env.receiver != self.id or peer not in self.cfg.neighbors:
            self.counters["misrouted"] += 1
            return []
        if env.kind in ATTEST_KINDS:
            return self._account(self._on_attestation(env))

        state = self.attestation.state(peer)
        if state is PeerState.UNTRUSTED:
            self.counters["dropped_untrusted"] += 1
            return []
        if state is not PeerState.ATTESTED:
            self.counters["dropped_unattested"] += 1
            return self._account(self.attestation.initiate(peer, env.epoch))

        if env.kind is Kind.TICK:
            if env.body:
                self.counters["codec_errors"] += 1
                return []
            payload = Payload(env.epoch, empty_tick=True)
        else:
            try:
                plain = self.attestation.session(peer).open(env.body, env.header_bytes())
            except AuthenticationError:
                self.counters["auth_failures"] += 1
                return []
            except ReplayError:
                self.counters["replays"] += 1
                return []
            try:
                payload = decode_payload(plain, self.cfg.mode, env.epoch)
                self._validate(payload)
            except ProtocolError as exc:
                log.warning("node %d: bad payload from %d: %s", self.id, peer, exc)
                self.counters["codec_errors"] += 1
                return []

        if self.finished or env.epoch < self.epoch - 1:
            self.counters["stale"] += 1
            return []
        slot = self.inbox.setdefault(env.epoch, {})
        if peer in slot:
            self.counters["duplicates"] += 1
            return []
        slot[peer] = payload
        self.event_log.append(("accept", peer, env.epoch))
        return self._account(self._advance())

    # -- attestation -----------------------------------------------------------

    def _on_attestation(self, env: Envelope) -> list[Envelope]:
        peer = env.sender
        before = self.attestation.state(peer)
        out = self.attestation.handle(env)
        after = self.attestation.state(peer)
        if after is before:
            return out
        if after is PeerState.ATTESTED:
            self.event_log.append(("attested", peer))
            out += self._flush(peer)
        elif after is PeerState.UNTRUSTED:
            self.event_log.append(("untrusted", peer))
            self.live.discard(peer)
            self._pending.pop(peer, None)
            out += self._advance()
        return out

    def _flush(self, peer: int) -> list[Envelope]:
        return [self._envelope(peer, epoch, plain) for epoch, plain in self._pending.pop(peer, [])]

    def _envelope(self, peer: int, epoch: int, plaintext: bytes | None) -> Envelope:
        if plaintext is None:
            return Envelope(Kind.TICK, self.id, peer, epoch)
        head = Envelope(Kind.PAYLOAD, self.id, peer, epoch)
        body = self.attestation.session(peer).seal(plaintext, head.header_bytes())
        return Envelope(Kind.PAYLOAD, self.id, peer, epoch, body)

    def _send(self, peer: int, epoch: int, plaintext: bytes | None) -> list[Envelope]:
        if self.attestation.is_attested(peer):
            return [self._envelope(peer, epoch, plaintext)]
        self._pending[peer].append((epoch, plaintext))
        return []

    def _account(self, out: list[Envelope]) -> list[Envelope]:
        for env in out:
            self.bytes_sent[env.epoch] += env.frame_size
        return out

    # -- rounds ---------------------------------------------------------------

    def _validate(self, p: Payload) -> None:
        if p.model is not None and p.model.shape != self.model.shape:
            raise ProtocolError(f"model shape {p.model.shape} != local {self.model.shape}")
        if p.triples:
            n_u, n_i = self.store.n_users, self.store.n_items
            for u, i, _ in p.triples:
                if not (0 <= u < n_u and 0 <= i < n_i):
                    raise ProtocolError(f"triple ({u}, {i}) outside {n_u}x{n_i}")

    def _ready(self) -> bool:
        if self.finished or self.epoch == 0:
            return False
        return self.live <= self.inbox.get(self.epoch - 1, {}).keys()

    def _advance(self) -> list[Envelope]:
        out: list[Envelope] = []
        while self._ready():
            out += self._round()
        return out

    def _round(self) -> list[Envelope]:
        e = self.epoch
        cfg = self.cfg
        timing = self._timing.setdefault(e, _Timing())

        t0 = time.perf_counter()
        self.phase_log.append((e, "merge"))
        received = self.inbox.pop(e - 1, {}) if e > 0 else {}
        senders = sorted(p for p in received if p in self.live)
        if cfg.mode is Mode.MS:
            models = [(s, received[s]) for s in senders if received[s].model is not None]
            if models and cfg.scheme is Scheme.DPSGD:
                self.model = dpsgd_merge(self.model, len(self.live),
                                         [NeighborModel(p.model, p.sender_degree) for _, p in models])
            else:
                for _, p in models:
                    self.model = rmw_merge(self.model, p.model)
        else:
            for s in senders:
                if received[s].triples:
                    _, added = append_dedup(self.store, received[s].triples)
                    self.counters["triples_added"] += added
        t1 = time.perf_counter()

        self.phase_log.append((e, "train"))
        try:
            self.model = sgd_epoch(self.model, self.store, cfg.train, e)
        except NumericError as exc:
            self.failure = f"node {self.id} epoch {e}: {exc}"
            self.finished = True
            raise
        t2 = time.perf_counter()

        self.phase_log.append((e, "share"))
        out: list[Envelope] = []
        if e < cfg.max_epochs and self.live:
            out = self._share(e)
        t3 = time.perf_counter()

        self.phase_log.append((e, "test"))
        if e % cfg.test_every == 0 or e == cfg.max_epochs:
            timing.rmse = rmse(self.model, self.test)
            timing.rmse_clamped = rmse_clamped(self.model, self.test)
        t4 = time.perf_counter()

        timing.merge_ms = (t1 - t0) * 1e3
        timing.train_ms = (t2 - t1) * 1e3
        timing.share_ms = (t3 - t2) * 1e3
        timing.test_ms = (t4 - t3) * 1e3
        self.event_log.append(("round", e))
        self.epoch = e + 1
        if e >= cfg.max_epochs:
            self.finished = True
        return out

    def _share(self, e: int) -> list[Envelope]:
        cfg = self.cfg
        targets = sorted(self.live)
        if cfg.mode is Mode.DS:
            triples = sample_shareable(self.store, cfg.share_count, [cfg.seed, self.id], e)
            plaintext = encode_payload(Payload(e, triples=triples), Mode.DS)
        else:
            plaintext = encode_payload(Payload(e, sender_degree=len(targets), model=self.model), Mode.MS)
        if cfg.scheme is Scheme.RMW:
            rng = np.random.default_rng([cfg.seed, self.id, e, 1])
            chosen = targets[int(rng.integers(len(targets)))]
        out: list[Envelope] = []
        for peer in targets:
            if cfg.scheme is Scheme.RMW and peer != chosen:
                out += self._send(peer, e, None)
            else:
                out += self._send(peer, e, plaintext)
        return out

    # -- reporting --------------------------------------------------------------

    def metrics(self) -> list[MetricsRecord]:
        return [MetricsRecord(e, self.id, t.merge_ms, t.train_ms, t.share_ms, t.test_ms,
                              self.bytes_sent[e], self.bytes_received[e], t.rmse)
                for e, t in sorted(self._timing.items())]

    def rmse_history(self, clamped: bool = False) -> dict[int, float]:
        return {e: (t.rmse_clamped if clamped else t.rmse) for e, t in sorted(self._timing.items())}
