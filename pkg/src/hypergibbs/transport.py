"""Rank-to-rank message passing for the distributed sampler.

Messages are length-prefixed binary frames::

    magic  b"DSPA"   4 bytes
    version          u16
    phase            u16   1 = halo, 2 = adjoint partial sums, 3 = control
    t                u64   iteration the payload belongs to
    src, dst         u32, u32
    op               u32   operator index, 0 for a message fused over operators
    length           u64   payload length in bytes
    payload          little-endian float64

The header is little-endian too. Frames between a given ``(src, dst)`` pair
with the same ``(phase, op)`` are delivered in send order, so a receiver can
check that the ``t`` it gets is the one it waits for.

An exchange moves a set of *flows* ``(origin, destination) -> length``. A
schedule routes each flow over one or more hops; forwarded flows are copied
unchanged, never summed on the way, so that every receiver adds exactly the
same numbers in the same order whatever the route.
"""

from __future__ import annotations

import os
import socket
import struct
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass

import numpy as np

from .errors import ProtocolViolation, TransportFailure

MAGIC = b"DSPA"
VERSION = 1
HALO, ADJOINT, CONTROL = 1, 2, 3

# control message codes carried in the ``op`` field
HELLO, ROLLCALL, ACK, BARRIER, RELEASE, GATHER = 1, 2, 3, 4, 5, 6

_HEADER = struct.Struct("<4sHHQIIIQ")
HEADER_SIZE = _HEADER.size
DEFAULT_TIMEOUT = 30.0
BIND_ENV = "HYPERGIBBS_BIND"


@dataclass(eq=False)
class Frame:
    phase: int
    t: int
    src: int
    dst: int
    op: int
    payload: np.ndarray


def encode_frame(frame: Frame) -> bytes:
    payload = np.ascontiguousarray(frame.payload, dtype="<f8").ravel()
    if np.isnan(payload).any():
        raise ProtocolViolation("refusing to send a NaN payload")
    body = payload.tobytes()
    return _HEADER.pack(MAGIC, VERSION, frame.phase, frame.t, frame.src, frame.dst,
                        frame.op, len(body)) + body


def decode_header(raw: bytes) -> tuple:
    if len(raw) != HEADER_SIZE:
        raise ProtocolViolation(f"short header: {len(raw)} bytes")
    magic, version, phase, t, src, dst, op, length = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise ProtocolViolation(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolViolation(f"unsupported version {version}")
    if phase not in (HALO, ADJOINT, CONTROL):
        raise ProtocolViolation(f"unknown phase {phase}")
    if length % 8:
        raise ProtocolViolation(f"payload length {length} is not a multiple of 8")
    return phase, t, src, dst, op, length


def decode_frame(raw: bytes) -> Frame:
    phase, t, src, dst, op, length = decode_header(raw[:HEADER_SIZE])
    body = raw[HEADER_SIZE:]
    if len(body) != length:
        raise ProtocolViolation(f"payload has {len(body)} bytes, header says {length}")
    payload = np.frombuffer(body, dtype="<f8").astype(np.float64)
    if np.isnan(payload).any():
        raise ProtocolViolation("received a NaN payload")
    return Frame(phase, t, src, dst, op, payload)


# ---------------------------------------------------------------------------
# delivery
# ---------------------------------------------------------------------------


class Mailbox:
    """Per-rank inbox with one FIFO queue per ``(src, phase, op)``."""

    def __init__(self):
        self._cv = threading.Condition()
        self._queues: dict = defaultdict(deque)
        self._error: BaseException | None = None
        self._closed_peers: set = set()

    def put(self, frame: Frame) -> None:
        with self._cv:
            self._queues[(frame.src, frame.phase, frame.op)].append(frame)
            self._cv.notify_all()

    def peer_closed(self, src: int) -> None:
        with self._cv:
            self._closed_peers.add(src)
            self._cv.notify_all()

    def fail(self, exc: BaseException) -> None:
        with self._cv:
            if self._error is None:
                self._error = exc
            self._cv.notify_all()

    def get(self, src: int, phase: int, op: int, timeout: float) -> Frame:
        key = (src, phase, op)
        deadline = time.monotonic() + timeout
        with self._cv:
            while True:
                if self._queues[key]:
                    return self._queues[key].popleft()
                if self._error is not None:
                    raise TransportFailure(f"run aborted: {self._error}")
                if src in self._closed_peers:
                    raise TransportFailure(f"peer {src} disconnected")
                left = deadline - time.monotonic()
                if left <= 0:
                    raise TransportFailure(
                        f"timed out after {timeout:.1f}s waiting for rank {src} (phase {phase}, op {op})")
                self._cv.wait(left)


class InProcHub:
    """Shared state of in-process workers running as threads.

    Frames still go through the binary encoding so that both backends
    exercise the same wire format.

    Parameters
    ----------
    n_workers : int
    delay : callable, optional
        ``delay(frame) -> seconds`` slept by the sender before delivery; used to
        perturb message timing in stress tests.
    """

    def __init__(self, n_workers: int, delay=None):
        self.n_workers = n_workers
        self.mailboxes = [Mailbox() for _ in range(n_workers)]
        self.delay = delay

    def backend(self, rank: int) -> InProcBackend:
        return InProcBackend(self, rank)

    def abort(self, exc: BaseException) -> None:
        for box in self.mailboxes:
            box.fail(exc)


class InProcBackend:
    def __init__(self, hub: InProcHub, rank: int):
        self.hub, self.rank = hub, rank

    def send(self, frame: Frame) -> None:
        raw = encode_frame(frame)
        if self.hub.delay is not None:
            time.sleep(self.hub.delay(frame))
        self.hub.mailboxes[frame.dst].put(decode_frame(raw))

    def recv(self, src: int, phase: int, op: int, timeout: float) -> Frame:
        return self.hub.mailboxes[self.rank].get(src, phase, op, timeout)

    def abort(self, exc: BaseException) -> None:
        self.hub.abort(exc)

    def close(self) -> None:
        pass


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.strip().rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host, int(port)


class TcpBackend:
    """One listening socket per rank and one outgoing connection per peer.

    Parameters
    ----------
    rank : int
    addresses : list of (host, port)
        Address of every rank, indexed by rank.
    timeout : float
        Seconds to wait for a peer to accept a connection or deliver a frame.
    bind : str, optional
        Host to listen on; defaults to ``$HYPERGIBBS_BIND`` or this rank's host.
    """

    def __init__(self, rank: int, addresses, timeout: float = DEFAULT_TIMEOUT, bind=None):
        self.rank = rank
        self.addresses = [a if isinstance(a, tuple) else parse_address(a) for a in addresses]
        self.timeout = timeout
        self.mailbox = Mailbox()
        self._out: dict[int, socket.socket] = {}
        self._readers: list[threading.Thread] = []
        self._conns: list[socket.socket] = []
        self._closing = False
        host, port = self.addresses[rank]
        host = bind or os.environ.get(BIND_ENV) or host
        self._listener = socket.create_server((host, port), reuse_port=False)
        self._listener.settimeout(0.2)
        self._acceptor = threading.Thread(target=self._accept_loop, daemon=True)
        self._acceptor.start()

    def _accept_loop(self):
        while not self._closing:
            try:
                conn, _ = self._listener.accept()
            except TimeoutError:
                continue
            except OSError:
                return
            conn.settimeout(None)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._conns.append(conn)
            th = threading.Thread(target=self._read_loop, args=(conn,), daemon=True)
            th.start()
            self._readers.append(th)

    def _read_exact(self, conn, n):
        chunks, got = [], 0
        while got < n:
            chunk = conn.recv(min(n - got, 1 << 20))
            if not chunk:
                return None
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def _read_loop(self, conn):
        src = None
        try:
            while True:
                head = self._read_exact(conn, HEADER_SIZE)
                if head is None:
                    break
                phase, t, fsrc, dst, op, length = decode_header(head)
                body = self._read_exact(conn, length) if length else b""
                if body is None:
                    break
                frame = decode_frame(head + body)
                if dst != self.rank:
                    raise ProtocolViolation(f"frame for rank {dst} delivered to rank {self.rank}")
                if src is None:
                    if phase != CONTROL or op != HELLO:
                        raise ProtocolViolation("connection did not start with a hello frame")
                    src = fsrc
                    continue
                if fsrc != src:
                    raise ProtocolViolation(f"rank {fsrc} wrote on the connection of rank {src}")
                self.mailbox.put(frame)
        except (ProtocolViolation, OSError) as exc:
            if not self._closing:
                self.mailbox.fail(exc)
        finally:
            if src is not None:
                self.mailbox.peer_closed(src)

    def _connect(self, dst: int) -> socket.socket:
        sock = self._out.get(dst)
        if sock is not None:
            return sock
        deadline = time.monotonic() + self.timeout
        while True:
            try:
                sock = socket.create_connection(self.addresses[dst], timeout=self.timeout)
                break
            except OSError:
                if time.monotonic() > deadline:
                    raise TransportFailure(f"rank {self.rank} could not reach rank {dst}") from None
                time.sleep(0.05)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.sendall(encode_frame(Frame(CONTROL, 0, self.rank, dst, HELLO, np.zeros(0))))
        self._out[dst] = sock
        return sock

    def send(self, frame: Frame) -> None:
        raw = encode_frame(frame)
        try:
            self._connect(frame.dst).sendall(raw)
        except OSError as exc:
            raise TransportFailure(f"send to rank {frame.dst} failed: {exc}") from None

    def recv(self, src: int, phase: int, op: int, timeout: float) -> Frame:
        return self.mailbox.get(src, phase, op, timeout)

    def abort(self, exc: BaseException) -> None:
        self.mailbox.fail(exc)
        self.close()

    def close(self) -> None:
        self._closing = True
        for sock in list(self._out.values()):
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
        self._out.clear()
        try:
            self._listener.close()
        except OSError:
            pass


# ---------------------------------------------------------------------------
# routing
# ---------------------------------------------------------------------------


class DirectSchedule:
    """Every flow goes straight from its origin to its destination in one step."""

    def route(self, origin: int, dest: int) -> list[tuple[int, int, int]]:
        return [(origin, dest, 0)]


class GridSchedule:
    """Two-step exchange on a ``rows x cols`` worker grid.

    Step 0 moves data between horizontal neighbours, step 1 between vertical
    neighbours. A flow between diagonal neighbours first travels horizontally
    to the worker in the origin's row and the destination's column, which
    forwards it vertically. Every worker then talks to at most four peers.
    """

    def __init__(self, rows: int, cols: int):
        self.rows, self.cols = rows, cols

    def route(self, origin: int, dest: int) -> list[tuple[int, int, int]]:
        ro, co = divmod(origin, self.cols)
        rd, cd = divmod(dest, self.cols)
        if abs(ro - rd) > 1 or abs(co - cd) > 1:
            raise ValueError(f"workers {origin} and {dest} are not grid neighbours")
        if ro == rd:
            return [(origin, dest, 0)]
        if co == cd:
            return [(origin, dest, 1)]
        mid = ro * self.cols + cd
        return [(origin, mid, 0), (mid, dest, 1)]


@dataclass
class _Step:
    sends: dict
    recvs: dict


class Endpoint:
    """A worker's view of the transport.

    Parameters
    ----------
    rank, n_workers : int
    backend : InProcBackend or TcpBackend
    flows : dict
        ``(phase, op) -> {(origin, dest): n_values}`` for every exchange the
        run performs, identical on all ranks.
    schedule : DirectSchedule or GridSchedule
    """

    def __init__(self, rank: int, n_workers: int, backend, flows: dict,
                 schedule=None, timeout: float = DEFAULT_TIMEOUT):
        self.rank, self.n_workers = rank, n_workers
        self.backend = backend
        self.flows = flows
        self.schedule = schedule or DirectSchedule()
        self.timeout = timeout
        self._plans: dict = {}

    # -- raw messages ------------------------------------------------------
    def send(self, dst: int, phase: int, op: int, t: int, payload) -> None:
        self.backend.send(Frame(phase, int(t), self.rank, dst, op, np.asarray(payload, np.float64)))

    def recv(self, src: int, phase: int, op: int, t: int) -> np.ndarray:
        frame = self.backend.recv(src, phase, op, self.timeout)
        if frame.t != t:
            raise ProtocolViolation(
                f"rank {self.rank} expected t={t} from rank {src} (phase {phase}), got t={frame.t}")
        return frame.payload

    # -- exchanges ---------------------------------------------------------
    def _plan(self, phase: int, op: int) -> list[_Step]:
        key = (phase, op)
        if key not in self._plans:
            steps: dict[int, _Step] = {}
            for (o, d), n in sorted(self.flows.get(key, {}).items()):
                if n == 0:
                    continue
                for a, b, s in self.schedule.route(o, d):
                    step = steps.setdefault(s, _Step(defaultdict(list), defaultdict(list)))
                    if a == self.rank:
                        step.sends[b].append((o, d, n))
                    if b == self.rank:
                        step.recvs[a].append((o, d, n))
            self._plans[key] = [steps[s] for s in sorted(steps)]
        return self._plans[key]

    def exchange(self, phase: int, t: int, op: int, outgoing: dict) -> dict:
        """Send ``outgoing[dest]`` to each destination; return ``{origin: values}``."""
        expected = {d: n for (o, d), n in self.flows.get((phase, op), {}).items()
                    if o == self.rank and n}
        if set(outgoing) != set(expected) or any(
                np.asarray(outgoing[d]).size != n for d, n in expected.items()):
            raise ProtocolViolation(f"rank {self.rank} outgoing data does not match its flows")
        held = {(self.rank, d): np.asarray(v, np.float64).ravel() for d, v in outgoing.items()}
        result = {}
        for step in self._plan(phase, op):
            for dst in sorted(step.sends):
                payload = np.concatenate([held.pop((o, d)) for o, d, _ in step.sends[dst]])
                self.send(dst, phase, op, t, payload)
            for src in sorted(step.recvs):
                segs = step.recvs[src]
                payload = self.recv(src, phase, op, t)
                if payload.size != sum(n for _, _, n in segs):
                    raise ProtocolViolation(
                        f"rank {self.rank} got {payload.size} values from rank {src}, "
                        f"expected {sum(n for _, _, n in segs)}")
                pos = 0
                for o, d, n in segs:
                    if d == self.rank:
                        result[o] = payload[pos:pos + n]
                    else:
                        held[(o, d)] = payload[pos:pos + n]
                    pos += n
        return result

    def halo_exchange(self, t: int, op: int, outgoing: dict) -> dict:
        return self.exchange(HALO, t, op, outgoing)

    def adjoint_exchange(self, t: int, op: int, outgoing: dict) -> dict:
        return self.exchange(ADJOINT, t, op, outgoing)

    # -- collective control --------------------------------------------------
    def barrier(self, t: int) -> None:
        if self.n_workers == 1:
            return
        if self.rank == 0:
            for k in range(1, self.n_workers):
                self.recv(k, CONTROL, BARRIER, t)
            for k in range(1, self.n_workers):
                self.send(k, CONTROL, RELEASE, t, ())
        else:
            self.send(0, CONTROL, BARRIER, t, ())
            self.recv(0, CONTROL, RELEASE, t)

    def rollcall(self, config_hash: str) -> None:
        """Check that every rank runs the same configuration (rank 0 leads)."""
        if self.n_workers == 1:
            return
        mine = hash_words(config_hash)
        if self.rank == 0:
            for k in range(1, self.n_workers):
                self.send(k, CONTROL, ROLLCALL, 0, mine)
            bad = []
            for k in range(1, self.n_workers):
                if not np.array_equal(self.recv(k, CONTROL, ACK, 0), mine):
                    bad.append(k)
            if bad:
                raise ProtocolViolation(f"ranks {bad} run a different configuration")
        else:
            theirs = self.recv(0, CONTROL, ROLLCALL, 0)
            self.send(0, CONTROL, ACK, 0, mine)
            if not np.array_equal(theirs, mine):
                raise ProtocolViolation(f"rank {self.rank} configuration differs from rank 0")

    def abort(self, exc: BaseException) -> None:
        self.backend.abort(exc)

    def close(self) -> None:
        self.backend.close()


def hash_words(config_hash: str) -> np.ndarray:
    """A hex digest as exactly representable floats (16 bits per value)."""
    value = int(config_hash[:16], 16)
    return np.array([(value >> (16 * j)) & 0xFFFF for j in range(4)], dtype=np.float64)


def reverse_flows(flows: dict) -> dict:
    return {(d, o): n for (o, d), n in flows.items()}
