"""Progress engine: drain device events, route completions, replenish receives.

The engine owns the serialization strategy for device access:

* COARSE_BLOCKING -- one blocking lock wraps every entry into a device,
* COARSE_TRY      -- progress attempts the lock once and gives up
                     immediately (sends still block, mirroring libraries
                     whose nonblocking send cannot report a failed lock),
* FINE            -- no coarse lock; the device's own per-substructure
                     locks provide safety.

Progress can be invoked explicitly by idle workers, or implicitly as a
side effect of testing a completion object (the classic test-driven
style, where the test is guarded by a try lock).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional

from .atomics import AtomicU64
from .completion import CompletionDescriptor, OpKind, Synchronizer
from .transport import Device, NetEvent


class Mode(Enum):
    EXPLICIT = "explicit"
    ON_TEST = "on_test"


class LockStrategy(Enum):
    COARSE_BLOCKING = "coarse_blocking"
    COARSE_TRY = "coarse_try"
    FINE = "fine"


@dataclass
class ProgressConfig:
    mode: Mode = Mode.EXPLICIT
    lock_strategy: LockStrategy = LockStrategy.FINE
    poll_batch: int = 32

    def __post_init__(self):
        if self.poll_batch < 1:
            raise ValueError("poll_batch must be at least 1")


class DeviceStats:
    """Instrumentation counters for one device's progress activity."""

    def __init__(self):
        self.body_entries = AtomicU64()
        self.concurrency = AtomicU64()
        self.max_concurrency = AtomicU64()
        self.try_failures = AtomicU64()
        self.coarse_acquires = AtomicU64()
        self.header_outstanding_max = AtomicU64()


class ProgressEngine:
    def __init__(self, config: ProgressConfig, devices: List[Device]):
        self.config = config
        self.devices = devices
        coarse = config.lock_strategy in (LockStrategy.COARSE_BLOCKING, LockStrategy.COARSE_TRY)
        self._coarse_locks: Dict[int, threading.Lock] = (
            {d.index: threading.Lock() for d in devices} if coarse else {}
        )
        self._test_guards: Dict[int, threading.Lock] = {d.index: threading.Lock() for d in devices}
        self._put_routes: Dict[int, object] = {}
        self._replenisher: Optional[Callable[[Device], None]] = None
        self._replenish_target = 0
        self._outstanding: Dict[int, AtomicU64] = {d.index: AtomicU64() for d in devices}
        self.stats: Dict[int, DeviceStats] = {d.index: DeviceStats() for d in devices}
        self.on_test_violations = AtomicU64()
        self.unrouted: List[CompletionDescriptor] = []
        self.default_error_target: object = None
        self._in_test = threading.local()

    # -- wiring ----------------------------------------------------------

    def register_put_route(self, queue_id: int, target: object) -> None:
        self._put_routes[queue_id] = target

    def set_header_replenisher(self, fn: Callable[[Device], None], target_count: int) -> None:
        """fn(device) must post exactly one internal wildcard receive,
        calling the device directly (the engine already holds any coarse
        lock when it replenishes)."""
        self._replenisher = fn
        self._replenish_target = target_count

    def prime(self) -> None:
        """Post the initial internal receives on every device."""
        for device in self.devices:
            self._replenish(device)

    def header_outstanding(self, device: Device) -> int:
        return self._outstanding[device.index].load()

    # -- device entry for the protocol layer ------------------------------

    def device_call(self, device: Device, fn, *args, **kwargs):
        """Run a send/post on a device under the configured coarse lock.

        Both coarse strategies serialize sends with a blocking acquire:
        a nonblocking send has no way to report a failed try lock, so
        only progress gets the try treatment.
        """
        lock = self._coarse_locks.get(device.index)
        if lock is None:
            return fn(*args, **kwargs)
        with lock:
            self.stats[device.index].coarse_acquires.fetch_add(1)
            return fn(*args, **kwargs)

    # -- progress ----------------------------------------------------------

    def progress(self, device: Device) -> bool:
        """Drain up to poll_batch events and route them; True iff any routed."""
        if self.config.mode is Mode.ON_TEST and not getattr(self._in_test, "active", False):
            self.on_test_violations.fetch_add(1)
        strategy = self.config.lock_strategy
        if strategy is LockStrategy.FINE:
            return self._progress_body(device)
        lock = self._coarse_locks[device.index]
        stats = self.stats[device.index]
        if strategy is LockStrategy.COARSE_TRY:
            if not lock.acquire(blocking=False):
                stats.try_failures.fetch_add(1)
                return False
        else:
            lock.acquire()
        stats.coarse_acquires.fetch_add(1)
        try:
            return self._progress_body(device)
        finally:
            lock.release()

    def _progress_body(self, device: Device) -> bool:
        stats = self.stats[device.index]
        stats.body_entries.fetch_add(1)
        current = stats.concurrency.fetch_add(1) + 1
        stats.max_concurrency.max_update(current)
        try:
            routed = 0
            for event in device.poll(self.config.poll_batch):
                if event.internal:
                    self._outstanding[device.index].fetch_add(-1)
                target = event.target
                if event.kind is OpKind.PUT_ARRIVED:
                    target = self._put_routes.get(event.queue_id)
                if event.kind is OpKind.ERROR and target is None:
                    target = self.default_error_target
                descriptor = CompletionDescriptor(
                    event.kind, event.tag, event.peer, event.device_index,
                    event.buffer, event.length, event.context,
                )
                if target is None:
                    self.unrouted.append(descriptor)
                    continue
                self._deliver(target, descriptor)
                routed += 1
            self._replenish(device)
            return routed > 0
        finally:
            stats.concurrency.fetch_add(-1)

    def _replenish(self, device: Device) -> None:
        if self._replenisher is None:
            return
        outstanding = self._outstanding[device.index]
        stats = self.stats[device.index]
        while True:
            current = outstanding.load()
            if current >= self._replenish_target:
                return
            # Reserve the slot before posting so concurrent fine-grained
            # progress never overshoots the target.
            if outstanding.compare_and_swap(current, current + 1):
                stats.header_outstanding_max.max_update(current + 1)
                self._replenisher(device)

    @staticmethod
    def _deliver(target: object, descriptor: CompletionDescriptor) -> None:
        if isinstance(target, Synchronizer):
            target.signal(descriptor)
        elif hasattr(target, "push"):
            target.push(descriptor)
        else:
            target(descriptor)

    # -- implicit progress -------------------------------------------------

    def _guarded(self, device: Device) -> Optional[threading.Lock]:
        if self.config.lock_strategy is LockStrategy.FINE:
            return None
        return self._test_guards[device.index]

    def _progress_from_test(self, device: Device) -> None:
        self._in_test.active = True
        try:
            self.progress(device)
        finally:
            self._in_test.active = False

    def test_with_implicit_progress(
        self, sync: Synchronizer, device: Device
    ) -> Optional[CompletionDescriptor]:
        """Test a synchronizer, progressing once as a side effect if empty.

        With a coarse lock strategy the whole call is guarded by a try
        lock, so a contended test returns immediately with nothing.
        """
        guard = self._guarded(device)
        if guard is not None and not guard.acquire(blocking=False):
            return None
        try:
            descriptor = sync.test()
            if descriptor is not None:
                return descriptor
            self._progress_from_test(device)
            return sync.test()
        finally:
            if guard is not None:
                guard.release()

    def pop_with_implicit_progress(self, queue, device: Device) -> Optional[CompletionDescriptor]:
        """Queue analog of test-driven progress: pop, progress if empty, re-pop."""
        guard = self._guarded(device)
        if guard is not None and not guard.acquire(blocking=False):
            return None
        try:
            descriptor = queue.pop()
            if descriptor is not None:
                return descriptor
            self._progress_from_test(device)
            return queue.pop()
        finally:
            if guard is not None:
                guard.release()
