"""The parcelport: send/background_work over transport, completion, progress.

A parcel travels as one header message followed by the nonzero-copy
chunk (unless piggybacked) and the zero-copy chunks, strictly one chunk
after the previous chunk's completion.  Every design axis is a knob on
VariantConfig, and the named presets reproduce the studied variants:

    lci (base)     put header, LCRQ queue, explicit progress, fine locks,
                   two devices
    sendrecv_queue base with two-sided headers
    sendrecv_sync  two-sided headers completed by a synchronizer
    sync           base with a synchronizer pool for followups
    queue_lock     base with a lock-based completion queue
    queue_ms       base with the CAS linked-node queue
    block          the MPI-parcelport mimic: two-sided headers,
                   synchronizers, test-driven progress, one device,
                   coarse blocking lock
    try            block with a try lock on progress
    try_progress   try with explicit progress
    block_d2       block with two devices
    progress       block with explicit progress (the known footgun:
                   every idle thread waits on the blocking lock)
    lci_d{n}       base with n devices
    lci_try_d{n}   base with n devices and coarse try locks
    mpi_like       alias for block
"""

from __future__ import annotations

import itertools
import threading
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, List, Optional

from .atomics import AtomicU64
from .completion import (
    CompletionDescriptor,
    OpKind,
    QueueKind,
    Synchronizer,
    SynchronizerPool,
    make_queue,
)
from .parcel import (
    DEFAULT_PIGGYBACK_THRESHOLD,
    DEFAULT_ZC_THRESHOLD,
    FLAG_MERGED,
    HEADER_BOUND,
    MAX_ZC,
    HeaderFrame,
    HeaderOverflowError,
    NzcLayout,
    Parcel,
    ParcelError,
    encode_header,
    decode_header,
    will_piggyback,
)
from .progress import LockStrategy, Mode, ProgressConfig, ProgressEngine
from .transport import (
    ANY,
    MSG_FOLLOWUP,
    MSG_HEADER_SENDRECV,
    LoopbackFabric,
    device_create,
)

HEADER_QUEUE_ID = 0
# Context token reserved for internal header receives; job tokens start at 1.
HEADER_CONTEXT = 0
MERGE_ACTION_ID = 0xFFFFFFFFFFFFFFFF


class HeaderPath(Enum):
    PUT = "put"
    SENDRECV = "sendrecv"


class HeaderCompletion(Enum):
    QUEUE = "queue"
    SYNC = "sync"


class FollowupCompletion(Enum):
    QUEUE = "queue"
    SYNC_POOL = "sync_pool"


class ProtocolError(Exception):
    """Fatal protocol violation (unknown job, phase mismatch)."""


@dataclass
class VariantConfig:
    header_path: HeaderPath = HeaderPath.PUT
    header_completion: HeaderCompletion = HeaderCompletion.QUEUE
    queue_kind: QueueKind = QueueKind.LCRQ
    followup_completion: FollowupCompletion = FollowupCompletion.QUEUE
    progress_mode: Mode = Mode.EXPLICIT
    lock_strategy: LockStrategy = LockStrategy.FINE
    num_devices: int = 2
    aggregation: bool = False
    zc_threshold: int = DEFAULT_ZC_THRESHOLD
    piggyback_threshold: int = DEFAULT_PIGGYBACK_THRESHOLD
    header_recv_target: int = 1
    poll_batch: int = 32

    def __post_init__(self):
        if self.num_devices < 1:
            raise ValueError("num_devices must be at least 1")
        if self.zc_threshold <= 0:
            raise ValueError("zc_threshold must be positive")


_BLOCK = VariantConfig(
    header_path=HeaderPath.SENDRECV,
    header_completion=HeaderCompletion.SYNC,
    followup_completion=FollowupCompletion.SYNC_POOL,
    progress_mode=Mode.ON_TEST,
    lock_strategy=LockStrategy.COARSE_BLOCKING,
    num_devices=1,
)

PRESETS: Dict[str, VariantConfig] = {
    "lci": VariantConfig(),
    "sendrecv_queue": VariantConfig(header_path=HeaderPath.SENDRECV),
    "sendrecv_sync": VariantConfig(
        header_path=HeaderPath.SENDRECV, header_completion=HeaderCompletion.SYNC
    ),
    "sync": VariantConfig(followup_completion=FollowupCompletion.SYNC_POOL),
    "queue_lock": VariantConfig(queue_kind=QueueKind.LOCKQ),
    "queue_ms": VariantConfig(queue_kind=QueueKind.MSQ),
    "block": _BLOCK,
    "try": replace(_BLOCK, lock_strategy=LockStrategy.COARSE_TRY),
    "try_progress": replace(
        _BLOCK, lock_strategy=LockStrategy.COARSE_TRY, progress_mode=Mode.EXPLICIT
    ),
    "block_d2": replace(_BLOCK, num_devices=2),
    "progress": replace(_BLOCK, progress_mode=Mode.EXPLICIT),
}

_ALIASES = {"base": "lci", "mpi_like": "block"}

# The canonical variant list exercised by the integrity matrix and the
# factor-study driver.
MATRIX_PRESETS = [
    "lci",
    "sendrecv_queue",
    "sendrecv_sync",
    "sync",
    "queue_lock",
    "queue_ms",
    "block",
    "try",
    "try_progress",
    "block_d2",
    "progress",
    "lci_d1",
    "lci_d4",
    "lci_try_d2",
]


def preset(name: str) -> VariantConfig:
    """Look up a named variant, including parametric lci_d{n}/lci_try_d{n}."""
    name = _ALIASES.get(name, name)
    if name in PRESETS:
        return replace(PRESETS[name])
    for prefix, strategy in (
        ("lci_try_d", LockStrategy.COARSE_TRY),
        ("lci_d", LockStrategy.FINE),
    ):
        if name.startswith(prefix) and name[len(prefix):].isdigit():
            return replace(
                PRESETS["lci"],
                num_devices=int(name[len(prefix):]),
                lock_strategy=strategy,
            )
    raise KeyError(f"unknown variant preset: {name!r}")


def default_allocate_zc_chunks(nzc_chunk: bytes) -> Parcel:
    """Allocate writable receive buffers sized from the nzc chunk."""
    layout = NzcLayout.decode(nzc_chunk)
    return Parcel(nzc_chunk, [bytearray(size) for size in layout.zc_sizes])


def merge_parcels(parcels: List[Parcel]) -> Parcel:
    """Aggregate same-destination parcels into one.

    The merged nonzero-copy chunk is a count-prefixed concatenation of
    the sub-parcel nzc chunks (itself a valid nzc layout, so receive
    buffers can still be sized from it); zero-copy chunks concatenate in
    order.
    """
    if not parcels:
        raise ValueError("cannot merge zero parcels")
    zc_chunks = [chunk for p in parcels for chunk in p.zc_chunks]
    if len(zc_chunks) > MAX_ZC:
        raise ParcelError(f"merged parcel would carry {len(zc_chunks)} zc chunks")
    layout = NzcLayout(
        MERGE_ACTION_ID,
        [bytes(p.nzc_chunk) for p in parcels],
        [len(c) for c in zc_chunks],
    )
    return Parcel(layout.encode(), zc_chunks)


def unmerge_parcels(parcel: Parcel) -> List[Parcel]:
    """Receiver-side inverse of merge_parcels."""
    layout = NzcLayout.decode(parcel.nzc_chunk)
    out = []
    offset = 0
    for sub_nzc in layout.small_args:
        sub_layout = NzcLayout.decode(sub_nzc)
        k = len(sub_layout.zc_sizes)
        out.append(Parcel(sub_nzc, list(parcel.zc_chunks[offset : offset + k])))
        offset += k
    if offset != len(parcel.zc_chunks):
        raise ProtocolError(
            f"merged parcel has {len(parcel.zc_chunks) - offset} unclaimed zc chunks"
        )
    return out


@dataclass
class _SendJob:
    token: int
    dest: int
    tag: int
    device_index: int
    frames: List[tuple]  # (msg_kind, payload)
    callbacks: List[Callable]
    next_index: int = 0


@dataclass
class _RecvJob:
    token: int
    source: int
    tag: int
    device_index: int
    header: HeaderFrame
    nzc_buf: Optional[bytearray] = None
    parcel: Optional[Parcel] = None
    zc_index: int = 0


class _AggQueue:
    __slots__ = ("items", "mut", "flush")

    def __init__(self):
        self.items: List[tuple] = []
        self.mut = threading.Lock()
        self.flush = threading.Lock()


class Parcelport:
    """Asynchronous parcel transfer endpoint for one rank.

    ``handle_parcel(parcel)`` delivers arrived parcels and may run
    arbitrary user code; it is always invoked outside internal locks.
    ``allocate_zc_chunks(nzc_chunk)`` must return a Parcel whose
    zc_chunks are writable buffers sized from the chunk's size table.
    """

    def __init__(
        self,
        config: VariantConfig,
        handle_parcel: Callable[[Parcel], None],
        allocate_zc_chunks: Callable[[bytes], Parcel] = default_allocate_zc_chunks,
        rank: int = 0,
        world_size: int = 2,
        backend: str = "loopback",
        endpoints: Optional[List[str]] = None,
        fabric: Optional[LoopbackFabric] = None,
    ):
        if handle_parcel is None or allocate_zc_chunks is None:
            raise ValueError("handle_parcel and allocate_zc_chunks are required")
        self.config = config
        self.rank = rank
        self.world_size = world_size
        self.handle_parcel = handle_parcel
        self.allocate_zc_chunks = allocate_zc_chunks

        self.devices = [
            device_create(rank, world_size, i, backend, endpoints, fabric)
            for i in range(config.num_devices)
        ]
        self.engine = ProgressEngine(
            ProgressConfig(config.progress_mode, config.lock_strategy, config.poll_batch),
            self.devices,
        )

        needs_queue = (
            config.header_completion is HeaderCompletion.QUEUE
            or config.followup_completion is FollowupCompletion.QUEUE
        )
        self.shared_queue = make_queue(config.queue_kind) if needs_queue else None
        if config.followup_completion is FollowupCompletion.SYNC_POOL:
            self.send_pool: Optional[SynchronizerPool] = SynchronizerPool()
            self.recv_pool: Optional[SynchronizerPool] = SynchronizerPool()
        else:
            self.send_pool = None
            self.recv_pool = None

        # Header arrival wiring.
        self._header_pool: Optional[SynchronizerPool] = None
        self._header_syncs: Dict[int, deque] = {}
        self._header_sync_mut = threading.Lock()
        if config.header_path is HeaderPath.PUT:
            if config.header_completion is HeaderCompletion.QUEUE:
                self.engine.register_put_route(HEADER_QUEUE_ID, self.shared_queue)
            else:
                # One-sided arrivals cannot be bounded by one slot, so each
                # lands in a pre-signaled synchronizer polled from a pool.
                self._header_pool = SynchronizerPool()
                self.engine.register_put_route(HEADER_QUEUE_ID, self._absorb_put_header)
        else:
            self._header_syncs = {d.index: deque() for d in self.devices}
            self.engine.set_header_replenisher(
                self._post_header_receive, config.header_recv_target
            )
            self.engine.prime()

        if self.shared_queue is not None:
            self.engine.default_error_target = self.shared_queue
        else:
            self.engine.default_error_target = self._record_error

        self.errors: deque = deque()
        self._tokens = itertools.count(1)
        self._jobs: Dict[int, object] = {}
        self._jobs_mut = threading.Lock()
        self._tags: Dict[int, itertools.count] = {}
        self._tags_mut = threading.Lock()
        self._agg: Dict[int, _AggQueue] = {}
        self._agg_mut = threading.Lock()
        self._tls = threading.local()
        self.delivered = AtomicU64()

    # -- worker identity ---------------------------------------------------

    def register_worker(self, thread_id: int) -> None:
        self._tls.tid = thread_id

    def _my_device_index(self) -> int:
        tid = getattr(self._tls, "tid", None)
        if tid is None:
            tid = threading.get_ident()
        return tid % len(self.devices)

    # -- header receive plumbing --------------------------------------------

    def _post_header_receive(self, device) -> None:
        buf = bytearray(HEADER_BOUND)
        if self.config.header_completion is HeaderCompletion.QUEUE:
            target = self.shared_queue
        else:
            target = Synchronizer()
            with self._header_sync_mut:
                self._header_syncs[device.index].append(target)
        device.post_recv(ANY, ANY, buf, target=target, context=HEADER_CONTEXT, internal=True)

    def _absorb_put_header(self, descriptor: CompletionDescriptor) -> None:
        sync = Synchronizer()
        sync.signal(descriptor)
        self._header_pool.add(sync)

    def _record_error(self, descriptor: CompletionDescriptor) -> None:
        self.errors.append(descriptor)

    # -- send path -----------------------------------------------------------

    def _next_tag(self, dest: int) -> int:
        with self._tags_mut:
            counter = self._tags.get(dest)
            if counter is None:
                counter = itertools.count()
                self._tags[dest] = counter
        return next(counter) & 0xFFFFFFFF

    def send(self, locality: int, parcel: Parcel, on_complete: Callable) -> None:
        """Nonblocking send; on_complete(error_or_None) fires exactly once
        after the final chunk's completion, on whichever thread performs
        the completing background_work."""
        if locality == self.rank:
            raise ValueError("send to self")
        if self.config.aggregation:
            self._agg_enqueue(locality, parcel, on_complete)
        else:
            self._submit(locality, parcel, [on_complete], merged=False)

    def _agg_enqueue(self, dest: int, parcel: Parcel, on_complete: Callable) -> None:
        with self._agg_mut:
            q = self._agg.get(dest)
            if q is None:
                q = _AggQueue()
                self._agg[dest] = q
        with q.mut:
            q.items.append((parcel, on_complete))
        # Opportunistic dequeue-all under a try lock; if another thread
        # holds it, that flusher re-checks after releasing, so nothing
        # is stranded.
        while q.items:
            if not q.flush.acquire(blocking=False):
                return
            try:
                with q.mut:
                    batch = q.items
                    q.items = []
                for group in self._agg_batches(batch):
                    self._flush_group(dest, group)
            finally:
                q.flush.release()

    @staticmethod
    def _agg_batches(batch: List[tuple]):
        group: List[tuple] = []
        zc_total = 0
        for item in batch:
            n = item[0].num_zc
            if group and zc_total + n > MAX_ZC:
                yield group
                group = []
                zc_total = 0
            group.append(item)
            zc_total += n
        if group:
            yield group

    def _flush_group(self, dest: int, group: List[tuple]) -> None:
        if len(group) == 1:
            parcel, cb = group[0]
            self._submit(dest, parcel, [cb], merged=False)
            return
        merged = merge_parcels([parcel for parcel, _ in group])
        self._submit(dest, merged, [cb for _, cb in group], merged=True)

    def _submit(self, dest: int, parcel: Parcel, callbacks: List[Callable], merged: bool) -> None:
        tag = self._next_tag(dest)
        device_index = self._my_device_index()
        extra = FLAG_MERGED if merged else 0
        try:
            header = encode_header(
                parcel, tag, self.rank, device_index,
                self.config.piggyback_threshold, extra_flags=extra,
            )
        except HeaderOverflowError as exc:
            for cb in callbacks:
                cb(exc)
            return
        header_kind = MSG_HEADER_SENDRECV  # put path overrides at post time
        frames = [(header_kind, header)]
        if not will_piggyback(parcel, self.config.piggyback_threshold):
            frames.append((MSG_FOLLOWUP, parcel.nzc_chunk))
        frames.extend((MSG_FOLLOWUP, chunk) for chunk in parcel.zc_chunks)
        token = next(self._tokens)
        job = _SendJob(token, dest, tag, device_index, frames, list(callbacks))
        with self._jobs_mut:
            self._jobs[token] = job
        self._post_send_phase(job)

    def _send_target(self):
        if self.config.followup_completion is FollowupCompletion.QUEUE:
            return self.shared_queue
        sync = Synchronizer()
        self.send_pool.add(sync)
        return sync

    def _recv_target(self):
        if self.config.followup_completion is FollowupCompletion.QUEUE:
            return self.shared_queue
        sync = Synchronizer()
        self.recv_pool.add(sync)
        return sync

    def _post_send_phase(self, job: _SendJob) -> None:
        msg_kind, payload = job.frames[job.next_index]
        device = self.devices[job.device_index]
        target = self._send_target()
        if job.next_index == 0 and self.config.header_path is HeaderPath.PUT:
            self.engine.device_call(
                device, device.put_dynamic, job.dest, payload, HEADER_QUEUE_ID,
                target, job.token,
            )
        else:
            self.engine.device_call(
                device, device.send, job.dest, msg_kind, job.tag, payload,
                target, job.token,
            )

    # -- background work -------------------------------------------------------

    def background_work(self, thread_id: int) -> bool:
        """Advance pending transfers; True iff any state advanced."""
        device = self.devices[thread_id % len(self.devices)]
        engine = self.engine
        on_test = self.config.progress_mode is Mode.ON_TEST
        progressed = False

        if not on_test:
            progressed |= engine.progress(device)

        if self.shared_queue is not None:
            for _ in range(self.config.poll_batch):
                if on_test:
                    descriptor = engine.pop_with_implicit_progress(self.shared_queue, device)
                else:
                    descriptor = self.shared_queue.pop()
                if descriptor is None:
                    break
                self._advance(descriptor)
                progressed = True

        if self._header_pool is not None:
            on_empty = (lambda: engine._progress_from_test(device)) if on_test else None
            descriptor = self._header_pool.poll_one(on_empty=on_empty)
            if descriptor is not None:
                self._advance(descriptor)
                progressed = True

        if self._header_syncs:
            descriptor = self._poll_header_sync(device, on_test)
            if descriptor is not None:
                self._advance(descriptor)
                progressed = True

        for pool in (self.send_pool, self.recv_pool):
            if pool is None:
                continue
            on_empty = (lambda: engine._progress_from_test(device)) if on_test else None
            descriptor = pool.poll_one(on_empty=on_empty)
            if descriptor is not None:
                self._advance(descriptor)
                progressed = True

        return progressed

    def _poll_header_sync(self, device, on_test: bool) -> Optional[CompletionDescriptor]:
        with self._header_sync_mut:
            pending = self._header_syncs.get(device.index)
            sync = pending[0] if pending else None
        if sync is None:
            return None
        if on_test:
            descriptor = self.engine.test_with_implicit_progress(sync, device)
        else:
            descriptor = sync.test()
        if descriptor is None:
            return None
        with self._header_sync_mut:
            try:
                self._header_syncs[device.index].remove(sync)
            except ValueError:
                pass
        return descriptor

    # -- state machine --------------------------------------------------------

    def _advance(self, descriptor: CompletionDescriptor) -> None:
        kind = descriptor.kind
        if kind is OpKind.ERROR:
            self.errors.append(descriptor)
            return
        if kind is OpKind.PUT_ARRIVED or (
            kind is OpKind.RECV_DONE and descriptor.context == HEADER_CONTEXT
        ):
            self._handle_header(descriptor)
            return
        with self._jobs_mut:
            job = self._jobs.get(descriptor.context)
        if job is None:
            raise ProtocolError(f"descriptor for unknown job: {descriptor!r}")
        if kind is OpKind.SEND_DONE:
            if not isinstance(job, _SendJob):
                raise ProtocolError(f"send completion for receive job: {job!r}")
            self._advance_send(job)
        elif kind is OpKind.RECV_DONE:
            if not isinstance(job, _RecvJob):
                raise ProtocolError(f"receive completion for send job: {job!r}")
            self._advance_recv(job)
        else:
            raise ProtocolError(f"unroutable descriptor: {descriptor!r}")

    def _advance_send(self, job: _SendJob) -> None:
        job.next_index += 1
        if job.next_index < len(job.frames):
            self._post_send_phase(job)
            return
        with self._jobs_mut:
            self._jobs.pop(job.token, None)
        for cb in job.callbacks:
            cb(None)

    def _handle_header(self, descriptor: CompletionDescriptor) -> None:
        header = decode_header(memoryview(descriptor.buffer)[: descriptor.length])
        if descriptor.kind is OpKind.PUT_ARRIVED:
            self.devices[descriptor.device_index].release_buffer(descriptor.buffer)
        if header.device_index >= len(self.devices):
            raise ProtocolError(
                f"header names device {header.device_index}, only {len(self.devices)} exist"
            )
        source = header.source_rank
        if header.piggybacked:
            if header.num_zc == 0:
                self._deliver(header, Parcel(header.piggyback, []))
                return
            parcel = self._allocate(header, header.piggyback)
            job = _RecvJob(
                next(self._tokens), source, header.tag, header.device_index,
                header, parcel=parcel,
            )
            self._register_and_post_recv(job, parcel.zc_chunks[0])
            return
        job = _RecvJob(
            next(self._tokens), source, header.tag, header.device_index,
            header, nzc_buf=bytearray(header.nzc_size),
        )
        self._register_and_post_recv(job, job.nzc_buf)

    def _register_and_post_recv(self, job: _RecvJob, buffer: bytearray) -> None:
        with self._jobs_mut:
            self._jobs[job.token] = job
        device = self.devices[job.device_index]
        self.engine.device_call(
            device, device.post_recv, job.source, job.tag, buffer,
            self._recv_target(), job.token,
        )

    def _allocate(self, header: HeaderFrame, nzc_chunk: bytes) -> Parcel:
        parcel = self.allocate_zc_chunks(bytes(nzc_chunk))
        if parcel.num_zc != header.num_zc:
            raise ProtocolError(
                f"allocator produced {parcel.num_zc} buffers, header says {header.num_zc}"
            )
        for buf, size in zip(parcel.zc_chunks, header.zc_sizes):
            if len(buf) != size:
                raise ProtocolError("allocator buffer sizes disagree with header table")
        return parcel

    def _advance_recv(self, job: _RecvJob) -> None:
        device = self.devices[job.device_index]
        if job.parcel is None:
            nzc = bytes(job.nzc_buf)
            job.nzc_buf = None
            if job.header.num_zc == 0:
                self._finish_recv(job, Parcel(nzc, []))
                return
            job.parcel = self._allocate(job.header, nzc)
            self.engine.device_call(
                device, device.post_recv, job.source, job.tag,
                job.parcel.zc_chunks[0], self._recv_target(), job.token,
            )
            return
        job.zc_index += 1
        if job.zc_index < job.header.num_zc:
            self.engine.device_call(
                device, device.post_recv, job.source, job.tag,
                job.parcel.zc_chunks[job.zc_index], self._recv_target(), job.token,
            )
            return
        self._finish_recv(job, job.parcel)

    def _finish_recv(self, job: _RecvJob, parcel: Parcel) -> None:
        with self._jobs_mut:
            self._jobs.pop(job.token, None)
        self._deliver(job.header, parcel)

    def _deliver(self, header: HeaderFrame, parcel: Parcel) -> None:
        if header.merged:
            for sub in unmerge_parcels(parcel):
                self.delivered.fetch_add(1)
                self.handle_parcel(sub)
        else:
            self.delivered.fetch_add(1)
            self.handle_parcel(parcel)

    # -- introspection -----------------------------------------------------------

    def pending_jobs(self) -> int:
        with self._jobs_mut:
            return len(self._jobs)

    def debug_pending(self) -> int:
        """Approximate count of undrained events and live jobs."""
        total = self.pending_jobs()
        if self.shared_queue is not None:
            total += len(self.shared_queue)
        if self._header_pool is not None:
            total += len(self._header_pool)
        for pool in (self.send_pool, self.recv_pool):
            if pool is not None:
                total += len(pool)
        for device in self.devices:
            total += device.pending_backlog()
        return total

    def total_counters(self) -> dict:
        out = {"sent": 0, "received": 0, "unexpected": 0}
        for device in self.devices:
            snap = device.counters.snapshot()
            for key in out:
                out[key] += snap[key]
        return out

    def close(self) -> None:
        for device in self.devices:
            device.close()
