"""Message passing among R logical ranks.

Ranks form a ring (rank r sends to (r+1) mod R) plus a link from every
rank to rank 0 for gathers. Two interchangeable backends: `inproc` runs
all ranks as threads in one process and passes payloads through queues;
`socket` moves the same framed bytes over TCP. Collective helpers
(ring_exchange, gather_to_root, broadcast_from_root, barrier) are built
on those two links only.
"""

from __future__ import annotations

import json
import os
import queue
import socket as socketlib
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .errors import ContractError, ProtocolError, TransportError
from .protocol import HEADER, MAGIC, MsgKind, encode_frame

DEFAULT_TIMEOUT_SECS = 30.0
_SEQ = struct.Struct("<I")

_POLL_SECS = 0.02


def resolve_timeout(explicit: Optional[float]) -> float:
    """Explicit config beats the DPRT_TIMEOUT_SECS env var beats the default."""
    if explicit is not None:
        return explicit
    env = os.environ.get("DPRT_TIMEOUT_SECS")
    if env:
        return float(env)
    return DEFAULT_TIMEOUT_SECS


@dataclass
class TransportConfig:
    timeout_secs: Optional[float] = None
    queue_capacity: int = 64
    addresses: Optional[List[Tuple[str, int]]] = None  # socket backend


@dataclass
class TransportStats:
    bytes_sent: int = 0
    bytes_received: int = 0
    messages_sent: int = 0
    messages_received: int = 0

    def traffic(self) -> int:
        return self.bytes_sent + self.bytes_received


_CLOSED = object()


class RankEndpoint:
    """One rank's handle on the session; driven by a single logical thread."""

    def __init__(self, rank: int, num_ranks: int, config: TransportConfig):
        if not (0 <= rank < num_ranks):
            raise TransportError(f"rank {rank} outside [0, {num_ranks})")
        self.rank = rank
        self.R = num_ranks
        self.timeout = resolve_timeout(config.timeout_secs)
        self.stats = TransportStats()
        self._send_seq: Dict[Tuple[tuple, int], int] = {}
        self._recv_seq: Dict[Tuple[tuple, int], int] = {}
        self._abort = threading.Event()
        self._abort_reason = ""

    # channel keys are shared by sender and receiver:
    #   ("ring", s): rank s's link to rank (s+1) mod R
    #   ("root", s): rank s's link to rank 0

    def abort(self, reason: str) -> None:
        self._abort_reason = reason
        self._abort.set()

    def _check_abort(self) -> None:
        if self._abort.is_set():
            raise TransportError(f"rank {self.rank}: collective aborted: {self._abort_reason}")

    def _send(self, dest: int, channel: tuple, kind: MsgKind, seq: int, payload: bytes) -> None:
        raise NotImplementedError

    def _poll(self, channel: tuple) -> Optional[tuple]:
        """Non-blocking pop of (kind, seq, payload) or the closed sentinel."""
        raise NotImplementedError

    def close(self) -> None:
        pass

    def send_on(self, dest: int, channel: tuple, kind: MsgKind, payload: bytes) -> None:
        key = (channel, int(kind))
        seq = self._send_seq.get(key, 0)
        self._send_seq[key] = seq + 1
        self._send(dest, channel, kind, seq, payload)
        self.stats.messages_sent += 1
        self.stats.bytes_sent += len(payload)

    def recv_on(self, channel: tuple, kind: MsgKind) -> bytes:
        deadline = time.monotonic() + self.timeout
        abort_grace = None
        while True:
            item = self._poll(channel)
            if item is _CLOSED:
                raise TransportError(
                    f"rank {self.rank}: peer rank {channel[1]} disconnected while awaiting {kind.name}")
            if item is not None:
                break
            # messages already in flight may still drain after an abort
            if self._abort.is_set():
                if abort_grace is None:
                    abort_grace = time.monotonic() + 0.5
                elif time.monotonic() > abort_grace:
                    self._check_abort()
            if time.monotonic() > deadline:
                raise TransportError(
                    f"rank {self.rank}: timeout after {self.timeout:g}s waiting for "
                    f"{kind.name} from rank {channel[1]} on {channel[0]} link")
            time.sleep(0)
        got_kind, seq, payload = item
        if int(got_kind) != int(kind):
            raise ProtocolError(
                f"rank {self.rank}: expected {kind.name} from rank {channel[1]}, got "
                f"{MsgKind(got_kind).name}; collective calls are mismatched")
        key = (channel, int(kind))
        expected = self._recv_seq.get(key, 0)
        if seq != expected:
            raise ProtocolError(
                f"rank {self.rank}: sequence {seq} from rank {channel[1]} for {kind.name}, "
                f"expected {expected}")
        self._recv_seq[key] = expected + 1
        self.stats.messages_received += 1
        self.stats.bytes_received += len(payload)
        return payload

    # ring / root shorthands

    def send_next(self, kind: MsgKind, payload: bytes) -> None:
        self.send_on((self.rank + 1) % self.R, ("ring", self.rank), kind, payload)

    def recv_prev(self, kind: MsgKind) -> bytes:
        return self.recv_on(("ring", (self.rank - 1) % self.R), kind)

    def send_root(self, kind: MsgKind, payload: bytes) -> None:
        self.send_on(0, ("root", self.rank), kind, payload)

    def recv_from_rank(self, sender: int, kind: MsgKind) -> bytes:
        return self.recv_on(("root", sender), kind)


# ---------------------------------------------------------------------------
# in-process backend


class InprocSession:
    def __init__(self, num_ranks: int, config: TransportConfig):
        self.R = num_ranks
        self.config = config
        cap = config.queue_capacity
        self.queues: Dict[Tuple[int, tuple], "queue.Queue"] = {}
        for r in range(num_ranks):
            self.queues[(r, ("ring", (r - 1) % num_ranks))] = queue.Queue(cap)
        for s in range(1, num_ranks):
            self.queues[(0, ("root", s))] = queue.Queue(cap)
        self.endpoints: List["InprocEndpoint"] = []

    def abort(self, reason: str) -> None:
        for ep in self.endpoints:
            ep.abort(reason)


class InprocEndpoint(RankEndpoint):
    def __init__(self, rank: int, session: InprocSession):
        super().__init__(rank, session.R, session.config)
        self.session = session
        session.endpoints.append(self)

    def _send(self, dest, channel, kind, seq, payload):
        q = self.session.queues[(dest, channel)]
        deadline = time.monotonic() + self.timeout
        while True:
            try:
                q.put((int(kind), seq, payload), timeout=_POLL_SECS)
                return
            except queue.Full:
                if time.monotonic() > deadline:
                    raise TransportError(
                        f"rank {self.rank}: send queue to rank {dest} full for {self.timeout:g}s") from None

    def _poll(self, channel):
        q = self.session.queues[(self.rank, channel)]
        try:
            return q.get(timeout=_POLL_SECS)
        except queue.Empty:
            return None


# ---------------------------------------------------------------------------
# socket backend


def _read_exact(sock: socketlib.socket, n: int) -> Optional[bytes]:
    """Read exactly n bytes; None on clean EOF at a frame boundary."""
    chunks = []
    remaining = n
    while remaining:
        data = sock.recv(min(remaining, 1 << 20))
        if not data:
            if remaining == n:
                return None
            raise TransportError("connection closed mid-frame")
        chunks.append(data)
        remaining -= len(data)
    return b"".join(chunks)


def read_frame_socket(sock: socketlib.socket) -> Optional[Tuple[MsgKind, bytes]]:
    """Read one DPRT frame; None on clean EOF."""
    header = _read_exact(sock, HEADER.size)
    if header is None:
        return None
    magic, kind, length = HEADER.unpack(header)
    if magic != MAGIC:
        raise ProtocolError("bad magic on rank link")
    payload = _read_exact(sock, length) if length else b""
    if length and payload is None:
        raise TransportError("connection closed mid-frame")
    return MsgKind(kind), payload or b""


def bind_listeners(num_ranks: int, host: str = "127.0.0.1"):
    """Bind one listening socket per rank on ephemeral ports."""
    listeners = []
    addresses = []
    for _ in range(num_ranks):
        s = socketlib.socket(socketlib.AF_INET, socketlib.SOCK_STREAM)
        s.setsockopt(socketlib.SOL_SOCKET, socketlib.SO_REUSEADDR, 1)
        s.bind((host, 0))
        s.listen(8)
        listeners.append(s)
        addresses.append(s.getsockname())
    return listeners, addresses


class SocketEndpoint(RankEndpoint):
    """Rank endpoint whose links are TCP connections framed as DPRT envelopes.

    The envelope payload is a 4-byte little-endian sequence number followed
    by the user bytes; the sender is identified once per connection by a
    CONTROL handshake.
    """

    def __init__(self, rank: int, num_ranks: int, addresses: Sequence[Tuple[str, int]],
                 config: TransportConfig, listener: Optional[socketlib.socket] = None):
        super().__init__(rank, num_ranks, config)
        if len(addresses) != num_ranks:
            raise TransportError(f"need {num_ranks} addresses, got {len(addresses)}")
        self.addresses = list(addresses)
        self._inboxes: Dict[tuple, "queue.Queue"] = {}
        self._inboxes[("ring", (rank - 1) % num_ranks)] = queue.Queue()
        if rank == 0:
            for s in range(1, num_ranks):
                self._inboxes[("root", s)] = queue.Queue()
        self._expected_inbound = len(self._inboxes) if num_ranks > 1 else 0
        self._inbound_ready = threading.Semaphore(0)
        self._conns: Dict[str, socketlib.socket] = {}
        self._send_locks: Dict[str, threading.Lock] = {}
        self._threads: List[threading.Thread] = []
        self._closing = False
        if num_ranks > 1:
            if listener is None:
                listener = socketlib.socket(socketlib.AF_INET, socketlib.SOCK_STREAM)
                listener.setsockopt(socketlib.SOL_SOCKET, socketlib.SO_REUSEADDR, 1)
                listener.bind(self.addresses[rank])
                listener.listen(8)
            self._listener = listener
            t = threading.Thread(target=self._accept_loop, daemon=True,
                                 name=f"dprt-accept-{rank}")
            t.start()
            self._threads.append(t)
        else:
            self._listener = listener

    # -- connection setup

    def _accept_loop(self) -> None:
        accepted = 0
        while accepted < self._expected_inbound and not self._closing:
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            try:
                frame = read_frame_socket(conn)
                if frame is None:
                    conn.close()
                    continue
                kind, payload = frame
                if kind != MsgKind.CONTROL:
                    raise ProtocolError(f"rank {self.rank}: link handshake must be CONTROL, got {kind.name}")
                hello = json.loads(payload[_SEQ.size:].decode("utf-8"))
                channel = (hello["link"], int(hello["hello"]))
            except (TransportError, ValueError, KeyError) as exc:
                conn.close()
                if self._closing:
                    return
                raise TransportError(f"rank {self.rank}: bad link handshake: {exc}") from exc
            inbox = self._inboxes.get(channel)
            if inbox is None:
                conn.close()
                continue
            accepted += 1
            t = threading.Thread(target=self._reader_loop, args=(conn, channel, inbox),
                                 daemon=True, name=f"dprt-read-{self.rank}-{channel}")
            t.start()
            self._threads.append(t)
            self._inbound_ready.release()

    def _reader_loop(self, conn: socketlib.socket, channel: tuple, inbox: "queue.Queue") -> None:
        try:
            while True:
                frame = read_frame_socket(conn)
                if frame is None:
                    break
                kind, payload = frame
                (seq,) = _SEQ.unpack_from(payload, 0)
                inbox.put((int(kind), seq, payload[_SEQ.size:]))
        except (TransportError, ProtocolError, OSError):
            pass
        finally:
            inbox.put(_CLOSED)
            conn.close()

    def _dial(self, addr: Tuple[str, int], deadline: float) -> socketlib.socket:
        while True:
            self._check_abort()
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TransportError(
                    f"rank {self.rank}: startup timeout connecting to {addr[0]}:{addr[1]}")
            try:
                return socketlib.create_connection(addr, timeout=min(remaining, 1.0))
            except OSError:
                time.sleep(0.02)

    def connect_links(self) -> None:
        """Dial the ring-next and root links and send their handshakes."""
        if self.R == 1:
            return
        deadline = time.monotonic() + self.timeout
        ring = self._dial(self.addresses[(self.rank + 1) % self.R], deadline)
        ring.setsockopt(socketlib.IPPROTO_TCP, socketlib.TCP_NODELAY, 1)
        self._conns["ring"] = ring
        self._send_locks["ring"] = threading.Lock()
        self._handshake(ring, "ring")
        if self.rank != 0:
            root = self._dial(self.addresses[0], deadline)
            root.setsockopt(socketlib.IPPROTO_TCP, socketlib.TCP_NODELAY, 1)
            self._conns["root"] = root
            self._send_locks["root"] = threading.Lock()
            self._handshake(root, "root")

    def _handshake(self, conn: socketlib.socket, link: str) -> None:
        hello = json.dumps({"hello": self.rank, "link": link}).encode("utf-8")
        conn.sendall(encode_frame(MsgKind.CONTROL, _SEQ.pack(0) + hello))

    def wait_ready(self) -> None:
        """Block until all expected inbound links have completed handshakes."""
        deadline = time.monotonic() + self.timeout
        for _ in range(self._expected_inbound):
            while not self._inbound_ready.acquire(timeout=_POLL_SECS):
                self._check_abort()
                if time.monotonic() > deadline:
                    raise TransportError(
                        f"rank {self.rank}: startup timeout awaiting inbound links "
                        f"({self._expected_inbound} expected)")

    # -- message plumbing

    def _send(self, dest, channel, kind, seq, payload):
        link = channel[0]
        conn = self._conns.get(link)
        if conn is None:
            raise TransportError(f"rank {self.rank}: {link} link not connected")
        frame = encode_frame(kind, _SEQ.pack(seq) + payload)
        try:
            with self._send_locks[link]:
                conn.sendall(frame)
        except OSError as exc:
            raise TransportError(f"rank {self.rank}: send on {link} link failed: {exc}") from exc

    def _poll(self, channel):
        inbox = self._inboxes[channel]
        try:
            return inbox.get(timeout=_POLL_SECS)
        except queue.Empty:
            return None

    def close(self) -> None:
        self._closing = True
        for conn in self._conns.values():
            try:
                conn.shutdown(socketlib.SHUT_RDWR)
            except OSError:
                pass
            conn.close()
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass


# ---------------------------------------------------------------------------
# session construction and collectives


def init_ranks(num_ranks: int, backend: str = "inproc",
               config: Optional[TransportConfig] = None) -> List[RankEndpoint]:
    """Create all R mutually connected endpoints; confirms link readiness."""
    if num_ranks < 1:
        raise TransportError(f"need at least one rank, got {num_ranks}")
    config = config or TransportConfig()
    if backend == "inproc":
        session = InprocSession(num_ranks, config)
        return [InprocEndpoint(r, session) for r in range(num_ranks)]
    if backend == "socket":
        if config.addresses is not None:
            addresses = config.addresses
            listeners = [None] * num_ranks
        else:
            listeners, addresses = bind_listeners(num_ranks)
        eps = [SocketEndpoint(r, num_ranks, addresses, config, listener=listeners[r])
               for r in range(num_ranks)]
        try:
            for ep in eps:
                ep.connect_links()
            for ep in eps:
                ep.wait_ready()
        except Exception:
            for ep in eps:
                ep.close()
            raise
        return eps
    raise TransportError(f"unknown backend {backend!r}; choose 'inproc' or 'socket'")


def ring_exchange(ep: RankEndpoint, outgoing: bytes) -> bytes:
    """Collective: send to (r+1) mod R, return the payload from (r-1) mod R."""
    if ep.R == 1:
        return outgoing
    ep.send_next(MsgKind.RAY_BATCH, outgoing)
    return ep.recv_prev(MsgKind.RAY_BATCH)


def gather_to_root(ep: RankEndpoint, tile: bytes) -> List[bytes]:
    """Collective: rank 0 returns all R tiles ordered by rank; others []."""
    if ep.R == 1:
        return [tile]
    if ep.rank == 0:
        tiles = [tile]
        for sender in range(1, ep.R):
            tiles.append(ep.recv_from_rank(sender, MsgKind.TILE))
        return tiles
    ep.send_root(MsgKind.TILE, tile)
    return []


def _pipeline_from_root(ep: RankEndpoint, kind: MsgKind, payload: Optional[bytes]) -> bytes:
    if ep.R == 1:
        assert payload is not None
        return payload
    if ep.rank == 0:
        assert payload is not None
        ep.send_next(kind, payload)
        return payload
    payload = ep.recv_prev(kind)
    if ep.rank != ep.R - 1:
        ep.send_next(kind, payload)
    return payload


def broadcast_from_root(ep: RankEndpoint, payload: Optional[bytes]) -> bytes:
    """Collective: rank 0 supplies a payload that every rank returns."""
    return _pipeline_from_root(ep, MsgKind.CONTROL, payload if ep.rank == 0 else None)


def barrier(ep: RankEndpoint) -> None:
    """Collective: no rank returns before every rank has entered."""
    if ep.R == 1:
        return
    if ep.rank == 0:
        for sender in range(1, ep.R):
            ep.recv_from_rank(sender, MsgKind.BARRIER)
        _pipeline_from_root(ep, MsgKind.BARRIER, b"")
    else:
        ep.send_root(MsgKind.BARRIER, b"")
        _pipeline_from_root(ep, MsgKind.BARRIER, None)


class CollectiveFailure(TransportError):
    """One or more rank bodies raised; carries every rank's exception."""

    def __init__(self, exceptions: Dict[int, BaseException]):
        self.exceptions = exceptions
        parts = ", ".join(f"rank {r}: {e!r}" for r, e in sorted(exceptions.items()))
        super().__init__(f"collective run failed ({parts})")


def run_collective(num_ranks: int, body: Callable[[RankEndpoint], object],
                   backend: str = "inproc", config: Optional[TransportConfig] = None,
                   return_exceptions: bool = False) -> List[object]:
    """Drive `body(ep)` on R rank threads; returns per-rank results.

    A raising rank aborts the others' pending collectives. With
    `return_exceptions`, per-rank exceptions are returned in place of
    results; otherwise the most informative one is re-raised.
    """
    eps = init_ranks(num_ranks, backend, config)
    results: List[object] = [None] * num_ranks
    errors: Dict[int, BaseException] = {}
    lock = threading.Lock()

    def runner(ep: RankEndpoint) -> None:
        try:
            results[ep.rank] = body(ep)
        except BaseException as exc:  # noqa: BLE001 - propagated to the caller
            with lock:
                errors[ep.rank] = exc
            # a contract error is raised collectively on every rank by design;
            # anything else may leave peers blocked, so wake them up
            if not isinstance(exc, ContractError):
                for other in eps:
                    other.abort(f"rank {ep.rank} failed: {exc}")

    threads = [threading.Thread(target=runner, args=(ep,), daemon=True,
                                name=f"dprt-rank-{ep.rank}") for ep in eps]
    for t in threads:
        t.start()
    join_deadline = time.monotonic() + max(ep.timeout for ep in eps) * (num_ranks + 2) + 60.0
    for t in threads:
        t.join(max(0.1, join_deadline - time.monotonic()))
    for ep in eps:
        ep.close()
    if any(t.is_alive() for t in threads):
        raise TransportError("rank threads failed to finish; session leaked")
    if errors:
        if return_exceptions:
            return [errors.get(r, results[r]) for r in range(num_ranks)]
        non_transport = [e for _, e in sorted(errors.items())
                         if not isinstance(e, TransportError)]
        if non_transport:
            raise non_transport[0]
        if len(errors) == 1:
            raise next(iter(errors.values()))
        raise CollectiveFailure(errors)
    return results
