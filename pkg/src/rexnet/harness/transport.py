"""Message transports driving :class:`~rexnet.node.RexNode` objects.

Both transports move the exact same framed bytes.  The simulated one runs
every node in a single deterministic event loop; the TCP one gives each
hosted node its own thread and one persistent connection per topology edge.
"""

from __future__ import annotations

import logging
import queue
import socket
import struct
import threading
import time
from collections import Counter, deque

import numpy as np

from ..errors import RexError, TransportError
from ..topology import Topology
from ..wire import DEFAULT_MAX_FRAME, Envelope, decode_envelope, encode_envelope, frame_length

log = logging.getLogger(__name__)


class SimulatedTransport:
    """Reliable in-process network with FIFO order per (sender, receiver) pair.

    Which non-empty pair delivers next is drawn from a seeded generator, so
    cross-pair interleavings vary with the seed while every run with the same
    seed replays identically.
    """

    def __init__(self, topology: Topology, seed: int = 0, max_frame: int = DEFAULT_MAX_FRAME,
                 capture: bool = False):
        self.topology = topology
        self.max_frame = max_frame
        self.capture = capture
        self.frames: list[tuple[int, int, bytes]] = []
        self.nodes: dict = {}
        self._rng = np.random.default_rng([seed, 0x51])
        self._queues: dict[tuple[int, int], deque[bytes]] = {}
        self._active: list[tuple[int, int]] = []
        self.sent = 0
        self.delivered = 0
        self.bytes_sent: Counter[int] = Counter()
        self.bytes_delivered: Counter[int] = Counter()

    def attach(self, node) -> None:
        self.nodes[node.id] = node

    def send(self, env: Envelope) -> None:
        src, dst = env.sender, env.receiver
        if dst not in self.topology.neighbors(src):
            raise TransportError(f"node {src} tried to send to non-neighbor {dst}")
        frame = encode_envelope(env, self.max_frame)
        if self.capture:
            self.frames.append((src, dst, frame))
        q = self._queues.setdefault((src, dst), deque())
        if not q:
            self._active.append((src, dst))
        q.append(frame)
        self.sent += 1
        self.bytes_sent[src] += len(frame)

    def _deliver_one(self) -> None:
        idx = int(self._rng.integers(len(self._active)))
        pair = self._active[idx]
        q = self._queues[pair]
        frame = q.popleft()
        if not q:
            # swap-remove keeps the draw O(1) without disturbing determinism
            self._active[idx] = self._active[-1]
            self._active.pop()
        self.delivered += 1
        self.bytes_delivered[pair[1]] += len(frame)
        node = self.nodes.get(pair[1])
        if node is None:
            return
        for out in node.on_message(decode_envelope(frame, self.max_frame)):
            self.send(out)

    def run(self, max_deliveries: int | None = None) -> None:
        for nid in sorted(self.nodes):
            for env in self.nodes[nid].on_init():
                self.send(env)
        while self._active:
            if max_deliveries is not None and self.delivered >= max_deliveries:
                raise TransportError("delivery budget exhausted")
            self._deliver_one()

    @property
    def in_flight(self) -> int:
        return self.sent - self.delivered


_HELLO = struct.Struct("<II")


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None if not buf else bytes(buf)
        buf += chunk
    return bytes(buf)


class _Link:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.lock = threading.Lock()
        self.closed = threading.Event()

    def send(self, frame: bytes) -> None:
        with self.lock:
            self.sock.sendall(frame)


class TcpTransport:
    """Persistent TCP links, one per topology edge touching a hosted node.

    The lower id dials the higher one and introduces itself with an 8-byte
    hello ``(dialer_id, target_id)``.  Without an address table every node
    is hosted here and listens on an ephemeral loopback port.
    """

    def __init__(self, topology: Topology, addresses: dict[int, tuple[str, int]] | None = None,
                 connect_timeout: float = 10.0, idle_timeout: float = 300.0,
                 max_frame: int = DEFAULT_MAX_FRAME):
        self.topology = topology
        self.addresses = dict(addresses or {})
        self.connect_timeout = connect_timeout
        self.idle_timeout = idle_timeout
        self.max_frame = max_frame
        self.nodes: dict = {}
        self._links: dict[tuple[int, int], _Link] = {}
        self._links_lock = threading.Lock()
        self._inbox: dict[int, queue.Queue] = {}
        self._errors: list[BaseException] = []
        self._stop = threading.Event()
        self.bytes_sent: Counter[int] = Counter()

    def attach(self, node) -> None:
        self.nodes[node.id] = node
        self._inbox[node.id] = queue.Queue()

    # -- connection setup -------------------------------------------------------

    def _expected_links(self) -> set[tuple[int, int]]:
        return {(nid, peer) for nid in self.nodes for peer in self.topology.neighbors(nid)}

    def _register(self, local: int, peer: int, sock: socket.socket) -> None:
        with self._links_lock:
            if (local, peer) in self._links:
                sock.close()
                return
            self._links[(local, peer)] = _Link(sock)

    def _listen(self) -> dict[int, socket.socket]:
        listeners = {}
        for nid in sorted(self.nodes):
            host, port = self.addresses.get(nid, ("127.0.0.1", 0))
            srv = socket.create_server((host, port), reuse_port=False)
            srv.settimeout(0.2)
            self.addresses[nid] = ("127.0.0.1" if host in ("", "0.0.0.0") else host,
                                   srv.getsockname()[1])
            listeners[nid] = srv
        return listeners

    def _accept_loop(self, nid: int, srv: socket.socket, done: threading.Event) -> None:
        while not done.is_set():
            try:
                conn, _ = srv.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn.settimeout(self.connect_timeout)
            try:
                hello = _recv_exact(conn, _HELLO.size)
            except OSError:
                hello = None
            if hello is None or len(hello) != _HELLO.size:
                conn.close()
                continue
            dialer, target = _HELLO.unpack(hello)
            if target != nid or dialer not in self.topology.neighbors(nid):
                log.warning("node %d: refusing connection claiming %d->%d", nid, dialer, target)
                conn.close()
                continue
            conn.settimeout(None)
            self._register(nid, dialer, conn)

    def _dial(self, nid: int, peer: int, deadline: float) -> None:
        if peer not in self.addresses:
            raise TransportError(f"no address for node {peer}")
        last: Exception | None = None
        while time.monotonic() < deadline:
            try:
                sock = socket.create_connection(self.addresses[peer], timeout=1.0)
            except OSError as exc:
                last = exc
                time.sleep(0.05)
                continue
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sock.sendall(_HELLO.pack(nid, peer))
            self._register(nid, peer, sock)
            return
        raise TransportError(f"node {nid} could not reach node {peer} at {self.addresses[peer]}: {last}")

    def _connect_all(self) -> None:
        listeners = self._listen()
        done = threading.Event()
        acceptors = [threading.Thread(target=self._accept_loop, args=(nid, srv, done), daemon=True)
                     for nid, srv in listeners.items()]
        for t in acceptors:
            t.start()
        deadline = time.monotonic() + self.connect_timeout
        try:
            for nid, peer in sorted(self._expected_links()):
                if nid < peer:
                    self._dial(nid, peer, deadline)
            while time.monotonic() < deadline:
                with self._links_lock:
                    if self._expected_links() <= self._links.keys():
                        return
                time.sleep(0.01)
            with self._links_lock:
                missing = sorted(self._expected_links() - self._links.keys())
            raise TransportError(f"connections not established before timeout: {missing}")
        finally:
            done.set()
            for t in acceptors:
                t.join()
            for srv in listeners.values():
                srv.close()

    # -- message loop -------------------------------------------------------------

    def send(self, env: Envelope) -> None:
        if env.receiver not in self.topology.neighbors(env.sender):
            raise TransportError(f"node {env.sender} tried to send to non-neighbor {env.receiver}")
        frame = encode_envelope(env, self.max_frame)
        link = self._links.get((env.sender, env.receiver))
        if link is None:
            raise TransportError(f"no link {env.sender}->{env.receiver}")
        try:
            link.send(frame)
        except OSError as exc:
            raise TransportError(f"send {env.sender}->{env.receiver} failed: {exc}") from exc
        self.bytes_sent[env.sender] += len(frame)

    def _reader(self, local: int, peer: int, link: _Link) -> None:
        inbox = self._inbox[local]
        try:
            while True:
                prefix = _recv_exact(link.sock, 4)
                if prefix is None:
                    break
                if len(prefix) < 4:
                    raise TransportError(f"link {peer}->{local}: truncated length prefix")
                size = frame_length(prefix, self.max_frame)
                rest = _recv_exact(link.sock, size - 4)
                if rest is None or len(rest) != size - 4:
                    raise TransportError(f"link {peer}->{local}: connection closed mid-frame")
                inbox.put(prefix + rest)
        except (OSError, RexError) as exc:
            if not self._stop.is_set():
                self._errors.append(exc)
        finally:
            link.closed.set()
            inbox.put(None)

    def _node_loop(self, node) -> None:
        inbox = self._inbox[node.id]
        peers = [self._links[(node.id, p)] for p in self.topology.neighbors(node.id)]
        try:
            for env in node.on_init():
                self.send(env)
            while not node.finished and not self._stop.is_set():
                try:
                    frame = inbox.get(timeout=self.idle_timeout)
                except queue.Empty:
                    raise TransportError(f"node {node.id} idle for {self.idle_timeout}s") from None
                if frame is None:
                    if all(link.closed.is_set() for link in peers) and inbox.empty():
                        raise TransportError(f"node {node.id}: all connections lost before epoch "
                                             f"{node.cfg.max_epochs}")
                    continue
                for env in node.on_message(decode_envelope(frame, self.max_frame)):
                    self.send(env)
        except BaseException as exc:
            self._errors.append(exc)
            self._stop.set()
            for q in self._inbox.values():
                q.put(None)

    def run(self) -> None:
        self._connect_all()
        readers = [threading.Thread(target=self._reader, args=(local, peer, link), daemon=True)
                   for (local, peer), link in self._links.items()]
        workers = [threading.Thread(target=self._node_loop, args=(node,), name=f"rexnode-{nid}")
                   for nid, node in sorted(self.nodes.items())]
        for t in readers + workers:
            t.start()
        for t in workers:
            t.join()
        self._stop.set()
        for link in self._links.values():
            try:
                link.sock.shutdown(socket.SHUT_WR)
            except OSError:
                pass
        for t in readers:
            t.join(timeout=self.connect_timeout)
        for link in self._links.values():
            link.sock.close()
        if self._errors:
            exc = self._errors[0]
            if isinstance(exc, RexError):
                raise exc
            raise TransportError(f"tcp run failed: {exc!r}") from exc
