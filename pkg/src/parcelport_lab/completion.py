"""Completion notification mechanisms.

Finished communication operations are handed to the upper layer either
through one-slot synchronizers (polled individually or via a round-robin
pool guarded by a try lock) or through an MPMC completion queue.  Three
queue flavors are provided:

* LOCKQ  -- deque under a blocking lock,
* MSQ    -- CAS-based linked-node queue (Michael-Scott style),
* LCRQ   -- fetch-and-add ring segments, closed and linked on overflow
            or livelock.

All queue operations are safe from any thread and never block waiting
for elements; pop on empty returns None.
"""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, List, Optional

from .atomics import AtomicRef, AtomicU64


class OpKind(Enum):
    SEND_DONE = 0
    RECV_DONE = 1
    PUT_ARRIVED = 2
    ERROR = 3


class QueueKind(Enum):
    LCRQ = "lcrq"
    MSQ = "msq"
    LOCKQ = "lockq"


@dataclass
class CompletionDescriptor:
    """Record of one finished communication operation.

    Ownership of ``buffer`` transfers to whoever consumes the
    descriptor; it is never copied at this layer.
    """

    kind: OpKind
    tag: int
    peer: int
    device_index: int
    buffer: Optional[Any] = None
    length: int = 0
    context: int = 0


class CompletionError(Exception):
    """Contract violation in a completion object (e.g. double signal)."""


class Synchronizer:
    """One-slot completion cell: signaled at most once, consumed at most once."""

    __slots__ = ("_lock", "_descriptor", "_signaled", "_consumed")

    def __init__(self):
        self._lock = threading.Lock()
        self._descriptor: Optional[CompletionDescriptor] = None
        self._signaled = False
        self._consumed = False

    def signal(self, descriptor: CompletionDescriptor) -> None:
        with self._lock:
            if self._signaled:
                raise CompletionError("synchronizer signaled twice")
            self._descriptor = descriptor
            self._signaled = True

    def test(self) -> Optional[CompletionDescriptor]:
        with self._lock:
            if not self._signaled or self._consumed:
                return None
            self._consumed = True
            descriptor = self._descriptor
            self._descriptor = None
            return descriptor

    @property
    def consumed(self) -> bool:
        return self._consumed


class SynchronizerPool:
    """Outstanding synchronizers polled one per call in round-robin order.

    The poll is guarded by a try lock, mirroring how a request pool is
    tested under a runtime try lock: a second concurrent poller returns
    immediately with nothing.
    """

    def __init__(self):
        self._guard = threading.Lock()
        self._mut = threading.Lock()
        self._items: List[Synchronizer] = []
        self._cursor = 0

    def add(self, sync: Synchronizer) -> None:
        with self._mut:
            self._items.append(sync)

    def __len__(self) -> int:
        with self._mut:
            return len(self._items)

    def poll_one(
        self, on_empty: Optional[Callable[[], None]] = None
    ) -> Optional[CompletionDescriptor]:
        """Advance the cursor one step and test that synchronizer.

        ``on_empty`` is invoked when the tested synchronizer is not yet
        ready (the hook by which implicit progress piggybacks on a
        test), after which the same synchronizer is retested.
        """
        if not self._guard.acquire(blocking=False):
            return None
        try:
            with self._mut:
                n = len(self._items)
                if n == 0:
                    return None
                self._cursor = (self._cursor + 1) % n
                index = self._cursor
                sync = self._items[index]
            descriptor = sync.test()
            if descriptor is None and on_empty is not None:
                on_empty()
                descriptor = sync.test()
            if descriptor is None:
                return None
            with self._mut:
                # Swap-remove; only the guarded poller moves entries, so
                # the index is still valid unless something was appended.
                if index >= len(self._items) or self._items[index] is not sync:
                    index = self._items.index(sync)
                self._items[index] = self._items[-1]
                self._items.pop()
                if self._cursor >= len(self._items):
                    self._cursor = 0
            return descriptor
        finally:
            self._guard.release()


class LockQueue:
    """Unbounded FIFO under one blocking lock."""

    kind = QueueKind.LOCKQ

    def __init__(self):
        self._lock = threading.Lock()
        self._items = deque()

    def push(self, item: Any) -> None:
        with self._lock:
            self._items.append(item)

    def pop(self) -> Optional[Any]:
        with self._lock:
            if not self._items:
                return None
            return self._items.popleft()

    def __len__(self) -> int:
        return len(self._items)


class _MsqNode:
    __slots__ = ("value", "next")

    def __init__(self, value: Optional[Any]):
        self.value = value
        self.next = AtomicRef(None)


class MichaelScottQueue:
    """CAS-based linked-node MPMC queue.

    The classic two-pointer algorithm with helping: a stalled enqueuer
    that has linked its node but not swung the tail is helped along by
    any other thread.  Node reclamation is left to the reference-
    counting collector; popped nodes drop their value eagerly.

    ``pause_hook(label)`` is a test-only hook invoked between atomic
    steps so a stress test can freeze a thread mid-operation.
    """

    kind = QueueKind.MSQ

    def __init__(self):
        dummy = _MsqNode(None)
        self._head = AtomicRef(dummy)
        self._tail = AtomicRef(dummy)
        self.pause_hook: Optional[Callable[[str], None]] = None

    def _pause(self, label: str) -> None:
        hook = self.pause_hook
        if hook is not None:
            hook(label)

    def push(self, item: Any) -> None:
        node = _MsqNode(item)
        while True:
            tail = self._tail.load()
            nxt = tail.next.load()
            self._pause("push_read")
            if nxt is not None:
                self._tail.compare_and_swap(tail, nxt)
                continue
            if tail.next.compare_and_swap(None, node):
                self._pause("push_linked")
                self._tail.compare_and_swap(tail, node)
                return

    def pop(self) -> Optional[Any]:
        while True:
            head = self._head.load()
            tail = self._tail.load()
            nxt = head.next.load()
            self._pause("pop_read")
            if nxt is None:
                return None
            if head is tail:
                self._tail.compare_and_swap(tail, nxt)
                continue
            value = nxt.value
            if self._head.compare_and_swap(head, nxt):
                nxt.value = None
                return value

    def node_count(self) -> int:
        """Nodes currently linked (racy, for structural assertions only)."""
        count = 0
        node = self._head.load()
        while node is not None:
            count += 1
            node = node.next.load()
        return count - 1  # exclude the dummy

    def __len__(self) -> int:
        return max(0, self.node_count())


SEGMENT_SIZE = 1024
# Failed publish rounds before a segment is closed to break livelock.
CLOSE_THRESHOLD = 10

_EMPTY = object()
_TAKEN = object()
_N_STRIPES = 64


class _Segment:
    __slots__ = ("slots", "enq", "deq", "next", "closed", "index", "_stripes")

    def __init__(self, index: int):
        self.slots = [_EMPTY] * SEGMENT_SIZE
        self.enq = AtomicU64()
        self.deq = AtomicU64()
        self.next = AtomicRef(None)
        self.closed = AtomicU64(0)
        self.index = index
        self._stripes = [threading.Lock() for _ in range(_N_STRIPES)]

    def publish(self, i: int, value: Any) -> bool:
        with self._stripes[i & (_N_STRIPES - 1)]:
            if self.slots[i] is not _EMPTY:
                return False
            self.slots[i] = value
            return True

    def take(self, i: int) -> Any:
        with self._stripes[i & (_N_STRIPES - 1)]:
            value = self.slots[i]
            self.slots[i] = _TAKEN
            return value


class RingSegmentQueue:
    """FAA-based MPMC queue over linked ring segments.

    Enqueuers claim a slot index with fetch-and-add and publish into it;
    dequeuers claim with fetch-and-add and take.  A segment is closed
    when its ring fills or when publishes keep losing the slot race
    (dequeuers racing ahead), and a fresh segment is linked behind it.
    Dequeue drains earlier segments completely before advancing.
    """

    kind = QueueKind.LCRQ

    def __init__(self):
        segment = _Segment(0)
        self._head = AtomicRef(segment)
        self._tail = AtomicRef(segment)
        self.pause_hook: Optional[Callable[[str], None]] = None

    def _pause(self, label: str) -> None:
        hook = self.pause_hook
        if hook is not None:
            hook(label)

    def _advance_tail(self, segment: _Segment) -> None:
        if segment.next.load() is None:
            segment.next.compare_and_swap(None, _Segment(segment.index + 1))
        self._tail.compare_and_swap(segment, segment.next.load())

    def push(self, item: Any) -> None:
        failures = 0
        while True:
            segment = self._tail.load()
            nxt = segment.next.load()
            if nxt is not None:
                self._tail.compare_and_swap(segment, nxt)
                continue
            if segment.closed.load():
                self._advance_tail(segment)
                continue
            i = segment.enq.fetch_add(1)
            self._pause("push_claimed")
            if i >= SEGMENT_SIZE:
                segment.closed.store(1)
                self._advance_tail(segment)
                continue
            if segment.closed.load():
                # Claimed a slot in a segment that closed under us; the
                # slot stays abandoned and the item goes to a new ring.
                continue
            if segment.publish(i, item):
                return
            failures += 1
            if failures >= CLOSE_THRESHOLD:
                segment.closed.store(1)

    def pop(self) -> Optional[Any]:
        while True:
            segment = self._head.load()
            claimed = min(segment.enq.load(), SEGMENT_SIZE)
            if segment.deq.load() >= claimed:
                # Nothing visibly available here; move on only once the
                # segment can no longer accept publishes.
                nxt = segment.next.load()
                if nxt is None:
                    return None
                if segment.closed.load() or claimed >= SEGMENT_SIZE:
                    if segment.deq.load() >= min(segment.enq.load(), SEGMENT_SIZE):
                        self._head.compare_and_swap(segment, nxt)
                        continue
                    continue
                return None
            i = segment.deq.fetch_add(1)
            self._pause("pop_claimed")
            if i >= SEGMENT_SIZE:
                continue
            value = segment.take(i)
            if value is not _EMPTY and value is not _TAKEN:
                return value
            # Raced an in-flight publish; its enqueuer fails the slot
            # and retries elsewhere, so keep scanning.

    def segment_span(self) -> tuple:
        """(head index, tail index) for structural assertions."""
        return (self._head.load().index, self._tail.load().index)

    def __len__(self) -> int:
        count = 0
        segment = self._head.load()
        while segment is not None:
            enq = min(segment.enq.load(), SEGMENT_SIZE)
            deq = min(segment.deq.load(), SEGMENT_SIZE)
            count += max(0, enq - deq)
            segment = segment.next.load()
        return count


def make_queue(kind: QueueKind):
    if kind == QueueKind.LCRQ:
        return RingSegmentQueue()
    if kind == QueueKind.MSQ:
        return MichaelScottQueue()
    if kind == QueueKind.LOCKQ:
        return LockQueue()
    raise ValueError(f"unknown queue kind: {kind!r}")
