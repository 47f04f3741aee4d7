"""Device-based network emulation.

A device is one independent set of communication resources: per-peer
reliable in-order channels, a pool of posted receives with (source, tag)
matching and an any-source wildcard, an unexpected-arrival list, and a
completion staging area drained by non-blocking polls.  Two backends
share the device logic:

* loopback -- N ranks inside one process, frames handed over in memory;
* tcp      -- two local processes, one socket pair per device.

Wire frame (little-endian):
    u8 msg_kind | u8 device_index | u16 reserved=0 | u32 tag
    | u32 source_rank | u32 payload_len | payload

A real verbs-style NIC turns a send without a posted receive into a
fatal RNR error; a reliable-stream emulation cannot crash, so such
arrivals are buffered on the unexpected list and counted instead.
"""

from __future__ import annotations

import itertools
import queue as queue_mod
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

from .atomics import AtomicU64
from .completion import OpKind

MSG_HEADER_SENDRECV = 0
MSG_HEADER_PUT = 1
MSG_FOLLOWUP = 2

# Wildcard for post_recv source/tag filters.
ANY = None

FRAME_HEADER = struct.Struct("<BBHIII")
FRAME_HEADER_SIZE = FRAME_HEADER.size

_PUT_SLAB_SIZE = 4096
_MAX_POOLED_SLABS = 1024


class TransportError(Exception):
    """Channel setup or I/O failure."""


def encode_frame(msg_kind: int, device_index: int, tag: int, source_rank: int, payload: bytes) -> bytes:
    return FRAME_HEADER.pack(msg_kind, device_index, 0, tag, source_rank, len(payload)) + payload


def decode_frame_header(data: bytes) -> Tuple[int, int, int, int, int]:
    """Returns (msg_kind, device_index, tag, source_rank, payload_len)."""
    if len(data) != FRAME_HEADER_SIZE:
        raise TransportError(f"frame header must be {FRAME_HEADER_SIZE} bytes, got {len(data)}")
    msg_kind, device_index, reserved, tag, source_rank, payload_len = FRAME_HEADER.unpack(data)
    if reserved != 0:
        raise TransportError(f"nonzero reserved field {reserved:#x}")
    return msg_kind, device_index, tag, source_rank, payload_len


@dataclass
class NetEvent:
    """One finished transport operation, drained via Device.poll."""

    kind: OpKind
    tag: int
    peer: int
    device_index: int
    buffer: Optional[bytearray] = None
    length: int = 0
    target: object = None
    context: int = 0
    internal: bool = False
    queue_id: Optional[int] = None
    error: Optional[str] = None


@dataclass
class _PostedRecv:
    source: Optional[int]
    tag: Optional[int]
    buffer: bytearray
    target: object
    context: int
    internal: bool
    ticket: int


# In-memory frame: (msg_kind, device_index, tag, source_rank, payload)
_Frame = Tuple[int, int, int, int, bytes]


class Counters:
    """Monotonic per-device metrics."""

    def __init__(self):
        self.sent = AtomicU64()
        self.received = AtomicU64()
        self.unexpected = AtomicU64()

    def snapshot(self) -> dict:
        return {
            "sent": self.sent.load(),
            "received": self.received.load(),
            "unexpected": self.unexpected.load(),
        }


# Optional test-only recorder for lock-ownership instrumentation:
# called as recorder(device_key, lock_id) on every tracked acquisition.
_lock_recorder: Optional[Callable[[Tuple[int, int], int], None]] = None


def set_lock_recorder(recorder: Optional[Callable[[Tuple[int, int], int], None]]) -> None:
    global _lock_recorder
    _lock_recorder = recorder


class _DeviceLock:
    """A plain lock that reports acquisitions to the test recorder."""

    __slots__ = ("_lock", "_owner_key")

    def __init__(self, owner_key: Tuple[int, int]):
        self._lock = threading.Lock()
        self._owner_key = owner_key

    def __enter__(self):
        self._lock.acquire()
        recorder = _lock_recorder
        if recorder is not None:
            recorder(self._owner_key, id(self))
        return self

    def __exit__(self, *exc):
        self._lock.release()
        return False


class _BufferPool:
    """Fixed-size slabs for one-sided arrivals, grown on demand."""

    def __init__(self, owner_key: Tuple[int, int]):
        self._lock = _DeviceLock(owner_key)
        self._free: List[bytearray] = []

    def acquire(self, size: int) -> bytearray:
        if size > _PUT_SLAB_SIZE:
            return bytearray(size)
        with self._lock:
            if self._free:
                return self._free.pop()
        return bytearray(_PUT_SLAB_SIZE)

    def release(self, buf: bytearray) -> None:
        if len(buf) != _PUT_SLAB_SIZE:
            return
        with self._lock:
            if len(self._free) < _MAX_POOLED_SLABS:
                self._free.append(buf)


class Device:
    """One independent set of communication resources.

    Internally thread-safe with per-substructure locks; any coarse
    serialization on top of it is owned by the progress engine.
    """

    def __init__(self, rank: int, world_size: int, index: int):
        self.rank = rank
        self.world_size = world_size
        self.index = index
        self.counters = Counters()
        key = (rank, index)
        self._match_lock = _DeviceLock(key)
        self._recv_pool: deque = deque()
        self._unexpected: deque = deque()
        self._arrivals: deque = deque()
        self._events: deque = deque()
        self._pool = _BufferPool(key)
        self._tickets = itertools.count(1)
        self._closed = False

    # -- backend hooks -------------------------------------------------

    def _transmit(self, peer: int, frame: _Frame, target, context) -> None:
        raise NotImplementedError

    def close(self) -> None:
        self._closed = True

    # -- send side -----------------------------------------------------

    def _check_peer(self, peer: int) -> None:
        if peer == self.rank:
            raise ValueError(f"rank {self.rank}: send to self")
        if not (0 <= peer < self.world_size):
            raise TransportError(f"rank {self.rank}: peer {peer} outside world of {self.world_size}")

    def send(self, peer: int, msg_kind: int, tag: int, payload, target=None, context: int = 0) -> int:
        """Two-sided send; the payload must stay unmodified until SEND_DONE."""
        self._check_peer(peer)
        ticket = next(self._tickets)
        self._transmit(peer, (msg_kind, self.index, tag, self.rank, payload), target, context)
        return ticket

    def put_dynamic(self, peer: int, payload, target_queue_id: int, target=None, context: int = 0) -> int:
        """One-sided put into a receiver-allocated buffer; never consumes a
        posted receive.  The wire tag carries the target queue id."""
        self._check_peer(peer)
        ticket = next(self._tickets)
        self._transmit(peer, (MSG_HEADER_PUT, self.index, target_queue_id, self.rank, payload), target, context)
        return ticket

    def _complete_send(self, peer: int, tag: int, target, context) -> None:
        self.counters.sent.fetch_add(1)
        self._events.append(
            NetEvent(OpKind.SEND_DONE, tag, peer, self.index, target=target, context=context)
        )

    def _stage_error(self, message: str, peer: int = -1, target=None, context: int = 0) -> None:
        self._events.append(
            NetEvent(OpKind.ERROR, 0, peer, self.index, target=target, context=context, error=message)
        )

    # -- receive side ----------------------------------------------------

    def post_recv(self, source: Optional[int], tag: Optional[int], buffer: bytearray,
                  target=None, context: int = 0, internal: bool = False) -> int:
        """Post a receive; matches the oldest buffered unexpected arrival
        first, else joins the receive pool."""
        ticket = next(self._tickets)
        post = _PostedRecv(source, tag, buffer, target, context, internal, ticket)
        with self._match_lock:
            for i, frame in enumerate(self._unexpected):
                if self._matches(post, frame):
                    del self._unexpected[i]
                    self._deliver_match(post, frame)
                    return ticket
            self._recv_pool.append(post)
        return ticket

    @staticmethod
    def _matches(post: _PostedRecv, frame: _Frame) -> bool:
        _, _, tag, source, _ = frame
        return (post.source is None or post.source == source) and (
            post.tag is None or post.tag == tag
        )

    def _deliver_match(self, post: _PostedRecv, frame: _Frame) -> None:
        _, _, tag, source, payload = frame
        n = len(payload)
        if n > len(post.buffer):
            self._stage_error(
                f"posted buffer of {len(post.buffer)} bytes truncates {n}-byte frame",
                peer=source, target=post.target, context=post.context,
            )
            return
        post.buffer[:n] = payload
        self.counters.received.fetch_add(1)
        self._events.append(
            NetEvent(
                OpKind.RECV_DONE, tag, source, self.index,
                buffer=post.buffer, length=n,
                target=post.target, context=post.context, internal=post.internal,
            )
        )

    def _accept_frame(self, frame: _Frame) -> None:
        """Backend delivery entry point: stage an inbound frame."""
        self._arrivals.append(frame)

    def _process_one_arrival(self) -> bool:
        with self._match_lock:
            try:
                frame = self._arrivals.popleft()
            except IndexError:
                return False
            msg_kind, _, tag, source, payload = frame
            if msg_kind == MSG_HEADER_PUT:
                n = len(payload)
                buf = self._pool.acquire(n)
                buf[:n] = payload
                self.counters.received.fetch_add(1)
                self._events.append(
                    NetEvent(
                        OpKind.PUT_ARRIVED, tag, source, self.index,
                        buffer=buf, length=n, queue_id=tag,
                    )
                )
                return True
            for i, post in enumerate(self._recv_pool):
                if self._matches(post, frame):
                    del self._recv_pool[i]
                    self._deliver_match(post, frame)
                    return True
            self._unexpected.append(frame)
            self.counters.unexpected.fetch_add(1)
        return True

    def poll(self, max_events: int) -> List[NetEvent]:
        """Drain up to max_events pending completions; never blocks."""
        if max_events < 1:
            raise ValueError("max_events must be at least 1")
        out: List[NetEvent] = []
        while len(out) < max_events:
            try:
                out.append(self._events.popleft())
                continue
            except IndexError:
                pass
            if not self._process_one_arrival():
                break
        return out

    def release_buffer(self, buf: bytearray) -> None:
        """Return a one-sided arrival slab to the pool."""
        self._pool.release(buf)

    def pending_backlog(self) -> int:
        return len(self._arrivals) + len(self._events)

    def internal_lock_ids(self) -> set:
        return {id(self._match_lock), id(self._pool._lock)}


class LoopbackFabric:
    """In-process registry wiring the devices of all ranks together."""

    def __init__(self, world_size: int):
        self.world_size = world_size
        self._lock = threading.Lock()
        self._devices = {}

    def register(self, device: "LoopbackDevice") -> None:
        with self._lock:
            self._devices[(device.rank, device.index)] = device

    def lookup(self, rank: int, index: int) -> "LoopbackDevice":
        with self._lock:
            device = self._devices.get((rank, index))
        if device is None:
            raise TransportError(f"no device registered for rank {rank} index {index}")
        return device


class LoopbackDevice(Device):
    def __init__(self, rank: int, world_size: int, index: int, fabric: LoopbackFabric):
        super().__init__(rank, world_size, index)
        if fabric.world_size != world_size:
            raise TransportError("fabric world size mismatch")
        self._fabric = fabric
        fabric.register(self)

    def _transmit(self, peer: int, frame: _Frame, target, context) -> None:
        if self._closed:
            self._stage_error("device closed", peer=peer, target=target, context=context)
            return
        remote = self._fabric.lookup(peer, self.index)
        payload = frame[4]
        if not isinstance(payload, bytes):
            frame = frame[:4] + (bytes(payload),)
        remote._accept_frame(frame)
        self._complete_send(peer, frame[2], target, context)


def _recv_exact(sock: socket.socket, n: int) -> Optional[bytes]:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        try:
            k = sock.recv_into(view[got:], n - got)
        except OSError:
            return None
        if k == 0:
            return None
        got += k
    return bytes(buf)


class TcpDevice(Device):
    """Socket-pair backend between exactly two local processes.

    The endpoint list gives one host:port per rank; device d uses the
    base port plus d so every device owns a disjoint socket pair.  The
    lower rank listens, the higher connects.  A writer thread drains an
    outbound queue (keeping sends non-blocking and per-channel FIFO) and
    a reader thread stages inbound frames.
    """

    _CONNECT_TIMEOUT = 20.0

    def __init__(self, rank: int, world_size: int, index: int, endpoints: List[str]):
        super().__init__(rank, world_size, index)
        if world_size != 2:
            raise TransportError("tcp backend supports exactly two ranks")
        if len(endpoints) != world_size:
            raise TransportError(f"need {world_size} endpoints, got {len(endpoints)}")
        self.peer = 1 - rank
        self._outbound: queue_mod.Queue = queue_mod.Queue()
        try:
            self._sock = self._connect_pair(endpoints)
        except OSError as exc:
            raise TransportError(f"rank {rank} device {index}: connect failed: {exc}") from exc
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._reader = threading.Thread(
            target=self._reader_loop, name=f"dev{index}-reader", daemon=True
        )
        self._writer = threading.Thread(
            target=self._writer_loop, name=f"dev{index}-writer", daemon=True
        )
        self._reader.start()
        self._writer.start()

    def _endpoint(self, endpoints: List[str], rank: int) -> Tuple[str, int]:
        host, port = endpoints[rank].rsplit(":", 1)
        return host, int(port) + self.index

    def _connect_pair(self, endpoints: List[str]) -> socket.socket:
        if self.rank < self.peer:
            host, port = self._endpoint(endpoints, self.rank)
            listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            listener.bind((host, port))
            listener.listen(1)
            listener.settimeout(self._CONNECT_TIMEOUT)
            try:
                sock, _ = listener.accept()
            finally:
                listener.close()
            return sock
        host, port = self._endpoint(endpoints, self.peer)
        deadline = time.monotonic() + self._CONNECT_TIMEOUT
        while True:
            try:
                return socket.create_connection((host, port), timeout=1.0)
            except OSError:
                if time.monotonic() >= deadline:
                    raise
                time.sleep(0.05)

    def _transmit(self, peer: int, frame: _Frame, target, context) -> None:
        if peer != self.peer:
            raise TransportError(f"rank {self.rank}: no channel to peer {peer}")
        msg_kind, index, tag, source, payload = frame
        data = encode_frame(msg_kind, index, tag, source, bytes(payload))
        self._outbound.put((peer, tag, data, target, context))

    def _writer_loop(self) -> None:
        while True:
            item = self._outbound.get()
            if item is None:
                return
            peer, tag, data, target, context = item
            try:
                self._sock.sendall(data)
            except OSError as exc:
                if not self._closed:
                    self._stage_error(f"send failed: {exc}", peer=peer, target=target, context=context)
                continue
            self._complete_send(peer, tag, target, context)

    def _reader_loop(self) -> None:
        while True:
            header = _recv_exact(self._sock, FRAME_HEADER_SIZE)
            if header is None:
                break
            msg_kind, index, tag, source, payload_len = decode_frame_header(header)
            payload = _recv_exact(self._sock, payload_len) if payload_len else b""
            if payload is None:
                break
            self._accept_frame((msg_kind, index, tag, source, payload))
        if not self._closed:
            self._stage_error("channel closed by peer", peer=self.peer)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._outbound.put(None)
        self._writer.join(timeout=5.0)
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()
        self._reader.join(timeout=5.0)


def device_create(
    rank: int,
    world_size: int,
    device_index: int,
    backend: str = "loopback",
    endpoints: Optional[List[str]] = None,
    fabric: Optional[LoopbackFabric] = None,
) -> Device:
    """Create one device with all-to-all channels for its index."""
    if world_size < 1:
        raise ValueError("world_size must be at least 1")
    if backend == "loopback":
        if fabric is None:
            raise TransportError("loopback backend needs a shared fabric")
        return LoopbackDevice(rank, world_size, device_index, fabric)
    if backend == "tcp":
        if endpoints is None:
            raise TransportError("tcp backend needs endpoints")
        return TcpDevice(rank, world_size, device_index, endpoints)
    raise ValueError(f"unknown backend: {backend!r}")
