import numpy as np
import pytest

from oracles import leaked_windows, record_plaintexts
from rexnet import secure_channel as sc
from rexnet.dataset import RatingSet
from rexnet.errors import ConfigError
from rexnet.harness.transport import SimulatedTransport
from rexnet.mf import TrainConfig, encode_model
from rexnet.node import Mode, NodeConfig, Payload, RexNode, Scheme, decode_payload, encode_payload
from rexnet.sharing import decode_triples
from rexnet.topology import Topology, complete_graph
from rexnet.wire import Envelope, Kind, decode_envelope

ROOT = sc.make_root_key(0)
N_USERS, N_ITEMS = 6, 8


def local_data(node_id, n_nodes, seed=0):
    rng = np.random.default_rng([seed, node_id])
    users = [u for u in range(N_USERS) if u % n_nodes == node_id]
    rows = [(u, i, float(rng.integers(1, 11)) / 2) for u in users for i in range(N_ITEMS) if rng.random() < 0.7]
    rows = rows or [(users[0], 0, 3.0)]
    u, i, r = zip(*rows)
    data = RatingSet(u, i, r, N_USERS, N_ITEMS)
    n = len(data)
    return data.subset(np.arange(0, n, 1)), data.subset(np.arange(0, n, 3))


def make_node(nid, neighbors, scheme=Scheme.DPSGD, mode=Mode.DS, max_epochs=3, share_count=4,
              n_nodes=None, measurement=None, k=3):
    meas = measurement or sc.compute_measurement(scheme.value, mode.value, k)
    att = sc.AttestationManager(nid, sc.Identity.generate(meas), ROOT, ROOT.public_key(), b"t")
    cfg = NodeConfig(nid, scheme, mode, share_count, TrainConfig(0.01, 0.1, 20, nid), max_epochs,
                     tuple(neighbors), k=k, seed=5)
    train, test = local_data(nid, n_nodes or (max(neighbors + [nid]) + 1))
    return RexNode(cfg, train, test, att)


def network(topo: Topology, capture=True, **kw):
    net = SimulatedTransport(topo, seed=kw.pop("seed", 0), capture=capture)
    nodes = {i: make_node(i, list(topo.neighbors(i)), n_nodes=topo.n, **kw) for i in range(topo.n)}
    for n in nodes.values():
        net.attach(n)
    return net, nodes


def handshake(a: RexNode, b: RexNode):
    """Run the three attestation messages between two started nodes."""
    queue = a.attestation.initiate(b.id) + b.attestation.initiate(a.id)
    delivered = []
    while queue:
        env = queue.pop(0)
        delivered.append(env)
        dst = a if env.receiver == a.id else b
        queue += [e for e in dst.on_message(env) if e.kind in (Kind.ATTEST_REQ, Kind.ATTEST_RESP, Kind.ATTEST_ACK)]
    return delivered


class TestConfig:
    def test_validation(self):
        base = dict(node_id=0, scheme=Scheme.RMW, mode=Mode.DS, share_count=1, train=TrainConfig(),
                    max_epochs=1, neighbors=(1,))
        assert NodeConfig(**base).degree == 1
        for bad in (dict(share_count=-1), dict(max_epochs=-1), dict(neighbors=(0,)),
                    dict(neighbors=(1, 1)), dict(test_every=0)):
            with pytest.raises(ConfigError):
                NodeConfig(**{**base, **bad})

    def test_empty_partitions_rejected(self):
        cfg = NodeConfig(0, Scheme.RMW, Mode.DS, 1, TrainConfig(), 1, (1,))
        att = sc.AttestationManager(0, sc.Identity.generate(bytes(32)), ROOT, ROOT.public_key())
        empty = RatingSet([], [], [], 2, 2)
        full = RatingSet([0], [0], [3.0], 2, 2)
        with pytest.raises(ConfigError):
            RexNode(cfg, empty, full, att)
        with pytest.raises(ConfigError):
            RexNode(cfg, full, empty, att)


class TestPayloadCodec:
    def test_ds(self):
        p = Payload(3, triples=[(1, 2, 3.5)])
        raw = encode_payload(p, Mode.DS)
        assert len(raw) == 4 + 12 and decode_payload(raw, Mode.DS, 3).triples == [(1, 2, 3.5)]

    def test_ms(self):
        node = make_node(0, [1])
        p = Payload(0, sender_degree=4, model=node.model)
        raw = encode_payload(p, Mode.MS)
        back = decode_payload(raw, Mode.MS, 0)
        assert back.sender_degree == 4 and encode_model(back.model) == encode_model(node.model)
        assert raw[:4] == (4).to_bytes(4, "little") and raw[4:] == encode_model(node.model)


class TestInit:
    def test_lower_id_one_neighbor_ds(self):
        node = make_node(0, [1])
        out = node.on_init()
        assert [e.kind for e in out] == [Kind.ATTEST_REQ]
        # the epoch-0 share waits for attestation
        assert sum(len(v) for v in node._pending.values()) == 1

    def test_higher_id_sends_nothing_yet(self):
        node = make_node(1, [0])
        assert node.on_init() == []
        assert sum(len(v) for v in node._pending.values()) == 1

    def test_pending_flushed_on_attestation(self):
        a, b = make_node(0, [1]), make_node(1, [0])
        a.on_init()
        b.on_init()
        resp = b.on_message(Envelope(Kind.ATTEST_REQ, 0, 1, 0, a.attestation.quote))
        out_a = a.on_message(resp[0])
        kinds = [e.kind for e in out_a]
        assert kinds == [Kind.ATTEST_ACK, Kind.PAYLOAD]

    def test_ms_epoch0_payload_is_trained_model(self):
        a, b = make_node(0, [1], mode=Mode.MS), make_node(1, [0], mode=Mode.MS)
        a.on_init()
        b.on_init()
        req = Envelope(Kind.ATTEST_REQ, 0, 1, 0, a.attestation.quote)
        resp = b.on_message(req)
        out = a.on_message(resp[0])
        payload = [e for e in out if e.kind is Kind.PAYLOAD][0]
        b.on_message(out[0])
        plain = b.attestation.session(0).open(payload.body, payload.header_bytes())
        model = decode_payload(plain, Mode.MS, 0).model
        assert model.touched_users.any()
        assert encode_model(model) == encode_model(a.model)

    def test_max_epochs_zero(self):
        node = make_node(0, [1], max_epochs=0)
        out = node.on_init()
        assert node.finished and node.epoch == 1
        assert [e.kind for e in out] == [Kind.ATTEST_REQ] and not node._pending
        assert len(node.metrics()) == 1

    def test_double_init(self):
        node = make_node(0, [1])
        node.on_init()
        with pytest.raises(Exception):
            node.on_init()


def attested_star():
    """Hub 0 with two attested leaves; every epoch-0 share already exchanged."""
    hub, l1, l2 = make_node(0, [1, 2]), make_node(1, [0], n_nodes=3), make_node(2, [0], n_nodes=3)
    for n in (hub, l1, l2):
        n.on_init()
    frames = {}
    for leaf in (l1, l2):
        req = Envelope(Kind.ATTEST_REQ, 0, leaf.id, 0, hub.attestation.quote)
        resp = leaf.on_message(req)
        out = hub.on_message(resp[0])
        ack = out[0]
        flushed = leaf.on_message(ack)
        frames[leaf.id] = flushed
    return hub, l1, l2, frames


class TestBarrier:
    def test_fires_once_when_last_neighbor_arrives(self):
        hub, l1, l2, frames = attested_star()
        assert hub.epoch == 1
        hub.on_message(frames[1][0])
        assert hub.epoch == 1 and ("round", 1) not in hub.event_log
        hub.on_message(frames[2][0])
        assert hub.epoch == 2 and hub.event_log.count(("round", 1)) == 1

    def test_duplicate_for_same_epoch_ignored(self):
        hub, l1, l2, frames = attested_star()
        hub.on_message(frames[1][0])
        # a second, freshly sealed payload for the same epoch
        again = l1._envelope(0, 0, b"\0\0\0\0")
        hub.on_message(again)
        assert hub.counters["duplicates"] == 1 and hub.epoch == 1

    def test_replayed_frame_counted(self):
        hub, l1, l2, frames = attested_star()
        hub.on_message(frames[1][0])
        hub.on_message(frames[1][0])
        assert hub.counters["replays"] == 1

    def test_future_epoch_buffered(self):
        hub, l1, l2, frames = attested_star()
        hub.on_message(frames[1][0])
        hub.on_message(l1._envelope(0, 1, b"\0\0\0\0"))
        assert hub.epoch == 1 and 1 in hub.inbox
        hub.on_message(frames[2][0])
        assert hub.epoch == 2
        hub.on_message(l2._envelope(0, 1, b"\0\0\0\0"))
        assert hub.epoch == 3

    def test_past_epoch_dropped(self):
        hub, l1, l2, frames = attested_star()
        hub.on_message(frames[1][0])
        hub.on_message(frames[2][0])
        hub.on_message(l1._envelope(0, 1, b"\0\0\0\0"))
        hub.on_message(l2._envelope(0, 1, b"\0\0\0\0"))
        assert hub.epoch == 3
        hub.on_message(l1._envelope(0, 0, b"\0\0\0\0"))
        assert hub.counters["stale"] == 1

    def test_tampered_payload_counted(self):
        hub, l1, l2, frames = attested_star()
        env = frames[1][0]
        bad = Envelope(env.kind, env.sender, env.receiver, env.epoch, env.body[:-1] + bytes([env.body[-1] ^ 1]))
        hub.on_message(bad)
        assert hub.counters["auth_failures"] == 1 and 1 not in hub.inbox.get(0, {})

    def test_header_is_authenticated(self):
        hub, l1, l2, frames = attested_star()
        env = frames[1][0]
        moved = Envelope(env.kind, env.sender, env.receiver, env.epoch + 1, env.body)
        hub.on_message(moved)
        assert hub.counters["auth_failures"] == 1

    def test_payload_from_unattested_peer_restarts_handshake(self):
        a, b = make_node(0, [1]), make_node(1, [0])
        a.on_init()
        out = a.on_message(Envelope(Kind.PAYLOAD, 1, 0, 0, b"junk" * 10))
        assert a.counters["dropped_unattested"] == 1 and out == []
        b.on_init()
        out = b.on_message(Envelope(Kind.PAYLOAD, 0, 1, 0, b"junk" * 10))
        assert b.counters["dropped_unattested"] == 1
        # b is the higher id: it cannot initiate, so it stays quiet
        assert out == []

    def test_misrouted(self):
        node = make_node(0, [1])
        node.on_init()
        node.on_message(Envelope(Kind.TICK, 5, 0, 0))
        node.on_message(Envelope(Kind.TICK, 1, 9, 0))
        assert node.counters["misrouted"] == 2

    def test_corrupt_payload_contents(self):
        hub, l1, l2, frames = attested_star()
        hub.on_message(l1._envelope(0, 0, b"\x05\0\0\0"))
        hub.on_message(l2._envelope(0, 0, encode_payload(Payload(0, triples=[(99, 0, 3.0)]), Mode.DS)))
        assert hub.counters["codec_errors"] == 2 and hub.epoch == 1


def run(topo, **kw):
    net, nodes = network(topo, **kw)
    net.run()
    return net, nodes


@pytest.mark.parametrize("scheme", list(Scheme))
@pytest.mark.parametrize("mode", list(Mode))
def test_full_run_counts_and_phases(scheme, mode):
    topo = Topology.from_edges(4, [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)])
    net, nodes = run(topo, scheme=scheme, mode=mode, max_epochs=5)
    assert net.in_flight == 0 and net.delivered == net.sent
    for nid, node in nodes.items():
        assert node.finished and node.epoch == 6
        assert [e for e in node.event_log if e[0] == "round"] == [("round", e) for e in range(6)]
        assert node.phase_log == [(e, p) for e in range(6) for p in ("merge", "train", "share", "test")]
        assert len(node.metrics()) == 6
    frames = [decode_envelope(f) for _, _, f in net.frames]
    for nid in nodes:
        for e in range(5):
            sent = [f for f in frames if f.sender == nid and f.epoch == e and f.kind in (Kind.PAYLOAD, Kind.TICK)]
            payloads = [f for f in sent if f.kind is Kind.PAYLOAD]
            assert len(sent) == topo.degree(nid)
            assert len(payloads) == (1 if scheme is Scheme.RMW else topo.degree(nid))
    # nothing is shared at the final epoch
    assert not [f for f in frames if f.epoch == 5 and f.kind in (Kind.PAYLOAD, Kind.TICK)]


def test_no_payload_processed_before_attestation():
    net, nodes = run(complete_graph(4), max_epochs=3)
    for node in nodes.values():
        attested_at = {}
        for pos, ev in enumerate(node.event_log):
            if ev[0] == "attested":
                attested_at[ev[1]] = pos
            if ev[0] == "accept":
                assert ev[1] in attested_at and attested_at[ev[1]] < pos


def test_ds_payload_size_formula():
    share = 4
    net, nodes = run(complete_graph(3), mode=Mode.DS, share_count=share, max_epochs=4)
    sizes = {}
    for src, dst, frame in net.frames:
        env = decode_envelope(frame)
        if env.kind is Kind.PAYLOAD:
            sizes.setdefault(src, set()).add(len(frame))
    for src, got in sizes.items():
        assert got == {4 + 12 * share + 18 + sc.SEAL_OVERHEAD}
        assert 4 + 12 * share + 42 in got


def test_ds_bytes_small_store():
    # store smaller than share_count: the whole store is sent
    net, nodes = run(complete_graph(2), mode=Mode.DS, share_count=10_000, max_epochs=1)
    frames = [f for s, d, f in net.frames if s == 0 and decode_envelope(f).kind is Kind.PAYLOAD]
    assert len(frames[0]) == 4 + 12 * nodes[0].store.origin_count + 42


@pytest.mark.parametrize("mode", list(Mode))
def test_wire_never_carries_plain_content(mode, monkeypatch):
    plaintexts = record_plaintexts(monkeypatch)
    net, nodes = run(complete_graph(3), mode=mode, max_epochs=3)
    frames = [f for _, _, f in net.frames]
    assert plaintexts and leaked_windows(frames, plaintexts) == 0
    # positive control: an unsealed copy is caught
    assert leaked_windows(frames + [b"hdr" + plaintexts[-1]], plaintexts) > 0
    for p in plaintexts:
        if p.startswith(b"REX-ACK"):
            continue
        if mode is Mode.DS:
            assert len(decode_triples(p)) == 4
        else:
            assert decode_payload(p, Mode.MS, 0).model.shape == (N_USERS, N_ITEMS, 3)
    for _, _, frame in net.frames:
        env = decode_envelope(frame)
        assert env.kind in (Kind.PAYLOAD, Kind.TICK, Kind.ATTEST_REQ, Kind.ATTEST_RESP, Kind.ATTEST_ACK)
        if env.kind is Kind.TICK:
            assert env.body == b""
        if env.kind in (Kind.ATTEST_REQ, Kind.ATTEST_RESP):
            assert len(env.body) == sc.QUOTE_SIZE


def test_rogue_node_gets_nothing_accepted():
    topo = complete_graph(4)
    net = SimulatedTransport(topo)
    rogue_meas = sc.compute_measurement("dpsgd", "ds", 3, build_id=b"other")
    nodes = {i: make_node(i, list(topo.neighbors(i)), n_nodes=4,
                          measurement=rogue_meas if i == 2 else None, max_epochs=10) for i in range(4)}
    for n in nodes.values():
        net.attach(n)
    net.run()
    for nid, node in nodes.items():
        assert node.finished
        accepted_from_rogue = [e for e in node.event_log if e[0] == "accept" and e[1] == 2]
        assert not accepted_from_rogue
        if nid != 2:
            assert 2 not in node.live and ("untrusted", 2) in node.event_log
    assert nodes[2].live == set()


def test_numeric_failure_aborts_node():
    node = make_node(0, [1])
    node.store._ratings[: len(node.store)] = 1e200
    node.cfg = NodeConfig(0, Scheme.DPSGD, Mode.DS, 1, TrainConfig(1.0, 0.0, 20, 0), 3, (1,))
    with pytest.raises(ArithmeticError):
        node.on_init()
    assert node.failure and "epoch 0" in node.failure


def test_rmse_history_and_test_every():
    topo = complete_graph(2)
    net = SimulatedTransport(topo)
    nodes = []
    for i in range(2):
        n = make_node(i, [1 - i], max_epochs=5)
        n.cfg = NodeConfig(i, Scheme.DPSGD, Mode.DS, 4, n.cfg.train, 5, (1 - i,), k=3, seed=5, test_every=2)
        net.attach(n)
        nodes.append(n)
    net.run()
    hist = nodes[0].rmse_history()
    assert [e for e, v in hist.items() if not np.isnan(v)] == [0, 2, 4, 5]
