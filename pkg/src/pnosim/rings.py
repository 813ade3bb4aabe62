"""Host/NIC message rings mirrored across the DMA boundary.

Every ring lives at the same offset in both memory domains. Byte layouts
(little-endian, 8-byte aligned) are the wire format between the domains.

S-ring (host -> NIC commands), one block per request::

    [flag u32][length u32][retval i64, synchronous kinds only][body ...]

``length`` is the exact block size including the header; the block occupies
``length`` rounded up to 8 bytes. The host writes everything except the
flag's request->W_DONE transition and the retval slot, which the NIC writes.

Data ring (NIC -> host stream payload), one chunk per produced payload::

    [fd u32][len u32][payload][pad to 8]

Event ring (NIC -> host readiness records)::

    [fd u32][events u32]

Stream info rings: a 64-byte header followed by ``slot_count`` 64-byte
slots located by hash(fd) with linear probing. The NIC-written instance
carries per-fd published extents; the host-written instance carries the
host's consumption heads, which the NIC pulls back each cycle.
"""

from __future__ import annotations

import struct
import threading
from collections import deque
from dataclasses import dataclass

from .errors import (
    AlreadyCommitted, DataRingFull, EmptyPayload, InvalidFlag, NotSynchronousKind,
    OrderingViolation, RingFull, WouldBlock,
)
from .simdma import HOST, NIC, DmaDescriptor

W_NONE = 0
W_WRITE = 1
W_SOCKET = 2
W_LISTEN = 3
W_CONNECT = 4
W_CLOSE = 5
W_SETOPT = 6
W_EPOLL_CTL = 7
W_SENDFILE = 8
W_FENCE = 9
W_SKIP = 254
W_DONE = 255

FLAG_NAMES = {
    W_NONE: "W_NONE", W_WRITE: "W_WRITE", W_SOCKET: "W_SOCKET", W_LISTEN: "W_LISTEN",
    W_CONNECT: "W_CONNECT", W_CLOSE: "W_CLOSE", W_SETOPT: "W_SETOPT",
    W_EPOLL_CTL: "W_EPOLL_CTL", W_SENDFILE: "W_SENDFILE", W_FENCE: "W_FENCE",
    W_SKIP: "W_SKIP", W_DONE: "W_DONE",
}
REQUEST_FLAGS = frozenset(range(W_WRITE, W_FENCE + 1))
SYNC_FLAGS = frozenset({W_SOCKET, W_LISTEN, W_CONNECT, W_SETOPT, W_EPOLL_CTL, W_FENCE})

SB_HDR = struct.Struct("<II")
SB_HDR_LEN = 8
RETVAL = struct.Struct("<q")
RETVAL_LEN = 8
RETVAL_PENDING = -(1 << 63)

CHUNK_HDR = struct.Struct("<II")
CHUNK_HDR_LEN = 8
WRAP_FD = 0xFFFFFFFF
EVENT_REC = struct.Struct("<II")
EVENT_REC_LEN = 8

SLOT_SIZE = 64
INFO_HDR_LEN = 64
# fd, state, data_begin, data_end, event_count, generation, parent_fd, flags, err
SLOT = struct.Struct("<IIQQIIIIi")
# generation, data_tail|data_head, event_tail|event_head, slot_count
INFO_HDR = struct.Struct("<QQQI")
SLOT_EMPTY, SLOT_USED, SLOT_TOMB = 0, 1, 2

# slot flag bits
SF_EOF = 1
SF_ERR = 2
SF_CONNECTED = 4
SF_LISTENING = 8

DATA = "data"
EVENT = "event"


def align8(n: int) -> int:
    return (n + 7) & ~7


def _pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def fd_hash(fd: int, slot_count: int) -> int:
    return (fd * 2654435761) & 0xFFFFFFFF & (slot_count - 1)


@dataclass
class RingConfig:
    s_ring_bytes: int = 1 << 20
    data_ring_bytes: int = 4 << 20
    event_ring_bytes: int = 4 << 20
    info_slots: int = 4096
    scan_window: int = 64 << 10

    def __post_init__(self) -> None:
        for name in ("s_ring_bytes", "data_ring_bytes", "event_ring_bytes", "info_slots"):
            if not _pow2(getattr(self, name)):
                raise ValueError(f"ring.{name} must be a power of two")
        if self.s_ring_bytes < 64 or self.data_ring_bytes < 64 or self.event_ring_bytes < 64:
            raise ValueError("rings must be at least 64 bytes")
        if self.scan_window < 8:
            raise ValueError("ring.scan_window must be >= 8")


class RingLayout:
    """Offsets of one core's ring set; identical in the host and NIC regions."""

    def __init__(self, cfg: RingConfig, base: int = 0):
        self.cfg = cfg
        self.base = base
        off = base
        self.s_off, off = off, off + cfg.s_ring_bytes
        self.data_off, off = off, off + cfg.data_ring_bytes
        self.event_off, off = off, off + cfg.event_ring_bytes
        info_len = INFO_HDR_LEN + cfg.info_slots * SLOT_SIZE
        self.info_nic_off, off = off, off + info_len
        self.info_host_off, off = off, off + info_len
        self.end = off

    @property
    def size(self) -> int:
        return self.end - self.base

    def regions(self) -> list[tuple[str, int, int]]:
        cfg = self.cfg
        info_len = INFO_HDR_LEN + cfg.info_slots * SLOT_SIZE
        return [
            ("s_ring", self.s_off, cfg.s_ring_bytes),
            ("data_ring", self.data_off, cfg.data_ring_bytes),
            ("event_ring", self.event_off, cfg.event_ring_bytes),
            ("info_nic", self.info_nic_off, info_len),
            ("info_host", self.info_host_off, info_len),
        ]

    def region_of(self, off: int) -> tuple[str, int] | None:
        for name, start, length in self.regions():
            if start <= off < start + length:
                return name, off - start
        return None


# -- single-writer instrumentation ---------------------------------------------

class WriteAudit:
    """Checks every write into ring memory against the ownership rules.

    Host-domain copies of the data, event and NIC-info rings may only be
    written by DMA from the NIC; the host-info ring only by the host. In the
    S-ring the host owns everything except the flag word and the retval
    slot of blocks the NIC has scanned.
    """

    def __init__(self, layout: RingLayout):
        self.layout = layout
        self.violations: list[str] = []
        self.writes = 0
        self._nic_writable: set[int] = set()  # host S-ring offsets (flag or retval) NIC may write

    def allow_nic(self, s_rel: int) -> None:
        self._nic_writable.add(s_rel)

    def record(self, writer: str, domain: str, off: int, length: int) -> None:
        self.writes += 1
        reg = self.layout.region_of(off)
        if reg is None:
            return
        name, rel = reg
        if name == "s_ring":
            if domain == HOST and writer == NIC:
                if not ((length == 4 or length == RETVAL_LEN) and rel in self._nic_writable):
                    self.violations.append(f"nic wrote {length}B at s_ring+{rel}")
            elif domain == NIC and writer == NIC and length not in (4, RETVAL_LEN):
                self.violations.append(f"nic wrote {length}B body at s_ring+{rel}")
            return
        owner = HOST if name == "info_host" else NIC
        if writer != owner:
            self.violations.append(f"{writer} wrote {length}B into {name}+{rel} in {domain} memory")

    def landing_hook(self, desc: DmaDescriptor, token: int) -> None:
        self.record(desc.src_domain, desc.dst_domain, desc.dst_offset, desc.len)


# -- S-ring -----------------------------------------------------------------------

class SBlock:
    """Host-side handle to an allocated S-ring block."""

    __slots__ = ("ring", "vpos", "off", "length", "sync", "committed", "flag", "retired")

    def __init__(self, ring: "SRingProducer", vpos: int, off: int, length: int, sync: bool):
        self.ring = ring
        self.vpos = vpos
        self.off = off
        self.length = length
        self.sync = sync
        self.committed = False
        self.flag = W_NONE
        self.retired = False

    @property
    def body_off(self) -> int:
        return self.off + SB_HDR_LEN + (RETVAL_LEN if self.sync else 0)

    @property
    def body_len(self) -> int:
        return self.length - SB_HDR_LEN - (RETVAL_LEN if self.sync else 0)

    def write(self, rel: int, data) -> None:
        if self.committed:
            raise AlreadyCommitted("block body is frozen after commit")
        n = len(data)
        if rel < 0 or rel + n > self.body_len:
            raise ValueError(f"write [{rel}, {rel + n}) outside body of {self.body_len} bytes")
        start = self.body_off + rel
        self.ring.mem[start:start + n] = data
        self.ring._audit(start, n)

    def pack(self, rel: int, fmt: struct.Struct, *values) -> None:
        self.write(rel, fmt.pack(*values))

    @property
    def done(self) -> bool:
        return SB_HDR.unpack_from(self.ring.mem, self.off)[0] == W_DONE

    @property
    def retval(self) -> int:
        if not self.sync:
            raise NotSynchronousKind("block has no return slot")
        return RETVAL.unpack_from(self.ring.mem, self.off + SB_HDR_LEN)[0]

    def retire(self) -> None:
        """The caller is finished with the retval; the space may be reclaimed."""
        self.retired = True


class SRingProducer:
    """Host end of the S-ring. ``s_alloc`` is the only step taken under a lock."""

    def __init__(self, mem: bytearray, off: int, capacity: int, audit: WriteAudit | None = None):
        if not _pow2(capacity):
            raise ValueError("S-ring capacity must be a power of two")
        self.mem = mem
        self.base = off
        self.capacity = capacity
        self.lock = threading.Lock()
        self.alloc_cursor = 0
        self.reclaim_cursor = 0
        self._live: deque = deque()  # SBlock or (vpos, footprint) skip markers, allocation order
        self.audit = audit
        self.stats = {"allocs": 0, "commits": 0, "skips": 0, "reclaimed": 0, "full": 0}

    def _audit(self, off: int, n: int) -> None:
        if self.audit is not None:
            self.audit.record(HOST, HOST, off, n)

    @property
    def free(self) -> int:
        return self.capacity - (self.alloc_cursor - self.reclaim_cursor)

    def s_alloc(self, size_payload: int, sync: bool = False) -> SBlock:
        if size_payload < 0:
            raise ValueError("negative payload size")
        length = SB_HDR_LEN + (RETVAL_LEN if sync else 0) + size_payload
        fp = align8(length)
        with self.lock:
            if fp > self.capacity:
                raise RingFull(f"block of {fp} bytes exceeds ring capacity {self.capacity}")
            need, skip = self._need(fp)
            if need > self.free:
                self.reclaim()
                need, skip = self._need(fp)
                if need > self.free:
                    self.stats["full"] += 1
                    raise RingFull(f"need {need} bytes, {self.free} free")
            mem = self.mem
            if skip:
                pos = self.base + self.alloc_cursor % self.capacity
                SB_HDR.pack_into(mem, pos, W_SKIP, skip)
                self._audit(pos, SB_HDR_LEN)
                self._live.append((self.alloc_cursor, skip))
                self.alloc_cursor += skip
                self.stats["skips"] += 1
            vpos = self.alloc_cursor
            pos = self.base + vpos % self.capacity
            mem[pos:pos + fp] = bytes(fp)
            SB_HDR.pack_into(mem, pos, W_NONE, length)
            if sync:
                RETVAL.pack_into(mem, pos + SB_HDR_LEN, RETVAL_PENDING)
            self._audit(pos, fp)
            block = SBlock(self, vpos, pos, length, sync)
            self._live.append(block)
            self.alloc_cursor += fp
            if self.free >= SB_HDR_LEN:
                # old-lap payload past the cursor must never read as a header
                nxt = self.base + self.alloc_cursor % self.capacity
                SB_HDR.pack_into(mem, nxt, W_NONE, 0)
                self._audit(nxt, SB_HDR_LEN)
            self.stats["allocs"] += 1
            return block

    def _need(self, fp: int) -> tuple[int, int]:
        pos = self.alloc_cursor % self.capacity
        if pos + fp > self.capacity:
            skip = self.capacity - pos
            return skip + fp, skip
        return fp, 0

    def s_commit(self, block: SBlock, flag: int) -> None:
        if flag not in REQUEST_FLAGS:
            raise InvalidFlag(f"cannot commit with flag {flag}")
        if block.committed:
            raise AlreadyCommitted("block already committed")
        if (flag in SYNC_FLAGS) != block.sync:
            raise InvalidFlag(f"{FLAG_NAMES[flag]} {'needs' if flag in SYNC_FLAGS else 'must not have'} a return slot")
        # Body stores above happen-before this flag store; Python executes them
        # in program order, which is the barrier the protocol needs.
        block.committed = True
        block.flag = flag
        struct.pack_into("<I", self.mem, block.off, flag)
        self._audit(block.off, 4)
        self.stats["commits"] += 1

    def reclaim(self) -> int:
        """Free the prefix of blocks the NIC has marked W_DONE."""
        n = 0
        live = self._live
        mem = self.mem
        while live:
            item = live[0]
            skip = None
            if isinstance(item, tuple):
                # the NIC leaves no trace when it passes a skip marker; only a
                # finished block behind it proves the marker was consumed
                if len(live) < 2:
                    break
                skip, item = item, live[1]
            if not item.committed or SB_HDR.unpack_from(mem, item.off)[0] != W_DONE:
                break
            if item.sync and not item.retired:
                break
            if skip is not None:
                live.popleft()
            live.popleft()
            SB_HDR.pack_into(mem, item.off, W_NONE, 0)
            self._audit(item.off, SB_HDR_LEN)
            self.reclaim_cursor = item.vpos + align8(item.length)
            n += 1
        self.stats["reclaimed"] += n
        return n


class SBlockView:
    """NIC-side view of a scanned block inside the NIC mirror."""

    __slots__ = ("vpos", "off", "flag", "length", "mem")

    def __init__(self, vpos, off, flag, length, mem):
        self.vpos = vpos
        self.off = off
        self.flag = flag
        self.length = length
        self.mem = mem

    @property
    def sync(self) -> bool:
        return self.flag in SYNC_FLAGS

    @property
    def body_off(self) -> int:
        return self.off + SB_HDR_LEN + (RETVAL_LEN if self.sync else 0)

    @property
    def body_len(self) -> int:
        return self.length - SB_HDR_LEN - (RETVAL_LEN if self.sync else 0)

    def body(self) -> memoryview:
        return memoryview(self.mem)[self.body_off:self.body_off + self.body_len]

    def unpack(self, fmt: struct.Struct, rel: int = 0) -> tuple:
        return fmt.unpack_from(self.mem, self.body_off + rel)

    def __repr__(self) -> str:
        return f"SBlockView({FLAG_NAMES.get(self.flag, self.flag)}, vpos={self.vpos}, len={self.length})"


def s_scan_mem(mem, base: int, capacity: int, cursor: int, max_blocks: int,
               limit: int | None = None) -> tuple[list[SBlockView], int]:
    """Committed blocks from ``cursor``; stops at the first uncommitted header."""
    out = []
    while len(out) < max_blocks:
        pos = cursor % capacity
        flag, length = SB_HDR.unpack_from(mem, base + pos)
        if flag == W_SKIP:
            if length != capacity - pos or (limit is not None and cursor + length > limit):
                break
            cursor += length
            continue
        # an unknown nonzero flag is still a committed block; dispatch rejects it
        if flag in (W_NONE, W_DONE) or length < SB_HDR_LEN or pos + align8(length) > capacity:
            break
        fp = align8(length)
        if limit is not None and cursor + fp > limit:
            break
        out.append(SBlockView(cursor, base + pos, flag, length, mem))
        cursor += fp
    return out, cursor


# -- G-rings: NIC producer side ------------------------------------------------

@dataclass(frozen=True)
class DataRef:
    which: str
    fd: int
    begin: int          # virtual start of the chunk (header included)
    end: int            # virtual end of the chunk's footprint
    payload_begin: int
    payload_end: int

    def __len__(self) -> int:
        return self.payload_end - self.payload_begin


class _FlushTrack:
    """Flushed-prefix bookkeeping for one NIC->host ring."""

    def __init__(self):
        self.submitted = 0     # virtual end of the last range handed to DMA
        self.segments: deque = deque()   # [start, end, outstanding_tokens]
        self.prefix = 0

    def add(self, start: int, end: int, tokens: list[int]) -> list:
        seg = [start, end, set(tokens)]
        self.segments.append(seg)
        self.submitted = end
        return seg

    def advance(self) -> None:
        segs = self.segments
        while segs and not segs[0][2]:
            self.prefix = segs[0][1]
            segs.popleft()


class _ProducerRing:
    def __init__(self, mem: bytearray, off: int, capacity: int):
        self.mem = mem
        self.base = off
        self.capacity = capacity
        self.tail = 0
        self.head = 0          # host consumption head as last synced back
        self.flush = _FlushTrack()

    @property
    def free(self) -> int:
        return self.capacity - (self.tail - self.head)

    def ranges(self, start: int, end: int) -> list[tuple[int, int]]:
        """Physical (offset, length) pieces covering virtual [start, end)."""
        out = []
        cap = self.capacity
        while start < end:
            pos = start % cap
            n = min(end - start, cap - pos)
            out.append((self.base + pos, n))
            start += n
        return out


class NicRings:
    """NIC end of one core's ring set, including every DMA it needs.

    Call :meth:`begin_sync` to pull the S-ring window and host heads,
    :meth:`handle` for each polled completion, :meth:`flush` once per cycle
    to push completions, flags and G-ring data, and :meth:`info_flush` to
    publish stream info. With ``guard`` enabled, :meth:`g_publish` refuses to
    publish metadata that names bytes whose flush has not completed.
    """

    def __init__(self, layout: RingLayout, nic_mem: bytearray, port, batch: bool = True,
                 guard: bool = True, audit: WriteAudit | None = None):
        self.layout = layout
        self.cfg = layout.cfg
        self.mem = nic_mem
        self.port = port
        self.batch = batch
        self.guard = guard
        self.audit = audit
        cfg = layout.cfg
        # S-ring mirror
        self.s_cap = cfg.s_ring_bytes
        self.scan_cursor = 0
        self.synced_limit = 0       # scans may not pass this virtual position
        self._sync_inflight: set[int] = set()
        self._sync_pending_limit = 0
        self._head_inflight: set[int] = set()
        self._flag_pending: dict[int, int] = {}   # token -> vpos of block whose W_DONE is in flight
        self._retval_pending: dict[int, SBlockView] = {}
        self._queued_retvals: list[SBlockView] = []
        self._queued_flags: list[SBlockView] = []
        # G-rings
        self.data = _ProducerRing(nic_mem, layout.data_off, cfg.data_ring_bytes)
        self.events = _ProducerRing(nic_mem, layout.event_off, cfg.event_ring_bytes)
        self._g_tokens: dict[int, list] = {}
        self.slot_count = cfg.info_slots
        self._slots: dict[int, int] = {}
        self._slot_state: dict[int, list] = {}
        self._dirty_max = -1
        self._hdr_tails = (0, 0)
        self._info_inflight: set[int] = set()
        self.info_generation = 0
        self._started: set[int] = set()      # fds whose data_begin is pinned to their first chunk
        self._known: set[int] = set()        # fds the host is known to track
        self._announce: dict[int, DataRef] = {}
        self.stats = dict.fromkeys((
            "syncs", "sync_submits", "scanned", "completions", "flag_writes", "data_chunks", "data_bytes",
            "event_records", "flush_txns", "publishes", "info_flushes", "ordering_stalls",
            "dma_submits"), 0)

    # -- helpers ------------------------------------------------------------------

    def _w(self, off: int, data) -> None:
        self.mem[off:off + len(data)] = data
        if self.audit is not None:
            self.audit.record(NIC, NIC, off, len(data))

    def _submit(self, descs: list[DmaDescriptor]) -> list[int]:
        if not descs:
            return []
        if self.batch:
            self.stats["dma_submits"] += 1
            return self.port.submit_batch(descs)
        toks = []
        for d in descs:
            self.stats["dma_submits"] += 1
            toks.append(self.port.submit(d))
        return toks

    @property
    def busy(self) -> bool:
        return bool(self._sync_inflight or self._flag_pending or self._retval_pending
                    or self._g_tokens or self._info_inflight or self._head_inflight)

    # -- S-ring -------------------------------------------------------------------

    def begin_sync(self) -> bool:
        """Pull the next S-ring window and the host head pointers (one transaction)."""
        if self._sync_inflight:
            return False
        cap = self.s_cap
        start = self.scan_cursor
        end = start + min(self.cfg.scan_window, cap)
        descs = []
        cur = start
        while cur < end:
            pos = cur % cap
            n = min(end - cur, cap - pos)
            off = self.layout.s_off + pos
            descs.append(DmaDescriptor(HOST, off, off, n))
            cur += n
        # a block whose W_DONE is still in flight may reappear stale one lap later
        stale = min(self._flag_pending.values(), default=None)
        pend = [v.vpos for v in self._retval_pending.values()] + [v.vpos for v in self._queued_flags] \
            + [v.vpos for v in self._queued_retvals]
        if pend:
            stale = min(pend + ([stale] if stale is not None else []))
        limit = end if stale is None else min(end, stale + cap)
        hdr_descs = []
        if not self._head_inflight:
            hoff = self.layout.info_host_off
            hdr_descs.append(DmaDescriptor(HOST, hoff, hoff, INFO_HDR.size))
        toks = self._submit(descs + hdr_descs)
        self.stats["sync_submits"] += 1 if self.batch else len(toks)
        self._sync_inflight = set(toks[:len(descs)])
        self._head_inflight = set(toks[len(descs):])
        self._sync_pending_limit = limit
        self.stats["syncs"] += 1
        return True

    def s_scan(self, max_blocks: int) -> list[SBlockView]:
        views, self.scan_cursor = s_scan_mem(self.mem, self.layout.s_off, self.s_cap,
                                             self.scan_cursor, max_blocks, self.synced_limit)
        self.stats["scanned"] += len(views)
        return views

    def s_complete(self, view: SBlockView, retval: int) -> None:
        """Post ``retval`` then, once it has landed, flip the flag to W_DONE."""
        if view.flag not in SYNC_FLAGS:
            raise NotSynchronousKind(f"{FLAG_NAMES.get(view.flag, view.flag)} has no return slot")
        self._w(view.off + SB_HDR_LEN, RETVAL.pack(retval))
        if self.audit is not None:
            self.audit.allow_nic(view.off + SB_HDR_LEN - self.layout.s_off)
        self._queued_retvals.append(view)
        self.stats["completions"] += 1

    def s_release(self, view: SBlockView) -> None:
        """Mark an asynchronous block consumed so the host can reuse its space."""
        self._queued_flags.append(view)

    def _flag_desc(self, view: SBlockView) -> DmaDescriptor:
        self._w(view.off, struct.pack("<I", W_DONE))
        if self.audit is not None:
            self.audit.allow_nic(view.off - self.layout.s_off)
        return DmaDescriptor(NIC, view.off, view.off, 4)

    # -- G-rings ------------------------------------------------------------------

    def g_produce(self, fd: int, payload, which: str = DATA) -> DataRef:
        n = len(payload)
        if n == 0:
            raise EmptyPayload("zero-length payload")
        ring = self.data if which == DATA else self.events
        cap = ring.capacity
        if which == EVENT:
            if n != EVENT_REC_LEN:
                raise ValueError("event records are 8 bytes")
            if ring.free < EVENT_REC_LEN:
                raise DataRingFull("event ring full")
            vpos = ring.tail
            self._w(ring.base + vpos % cap, payload)
            ring.tail += EVENT_REC_LEN
            self.stats["event_records"] += 1
            return DataRef(EVENT, fd, vpos, ring.tail, vpos, ring.tail)
        fp = align8(CHUNK_HDR_LEN + n)
        pos = ring.tail % cap
        skip = cap - pos if pos + fp > cap else 0
        if fp > cap or skip + fp > ring.free:
            raise DataRingFull(f"chunk of {fp} bytes, {ring.free} free")
        if skip:
            self._w(ring.base + pos, CHUNK_HDR.pack(WRAP_FD, skip - CHUNK_HDR_LEN))
            ring.tail += skip
            pos = 0
        vpos = ring.tail
        if fd not in self._started:
            st = self._slot_state[self._slot_index(fd, True)]
            st[2] = st[3] = vpos
            self._started.add(fd)
        off = ring.base + pos
        self._w(off, CHUNK_HDR.pack(fd, n))
        self._w(off + CHUNK_HDR_LEN, payload)
        ring.tail += fp
        self.stats["data_chunks"] += 1
        self.stats["data_bytes"] += n
        return DataRef(DATA, fd, vpos, ring.tail, vpos + CHUNK_HDR_LEN, vpos + CHUNK_HDR_LEN + n)

    def g_event(self, fd: int, events: int) -> DataRef:
        return self.g_produce(fd, EVENT_REC.pack(fd, events), EVENT)

    def flushed(self, ref: DataRef) -> bool:
        ring = self.data if ref.which == DATA else self.events
        return ref.end <= ring.flush.prefix

    # -- stream info --------------------------------------------------------------

    def _slot_index(self, fd: int, create: bool) -> int | None:
        idx = self._slots.get(fd)
        if idx is not None or not create:
            return idx
        n = self.slot_count
        i = fd_hash(fd, n)
        for _ in range(n):
            st = self._slot_state.get(i)
            if st is None or st[1] == SLOT_TOMB:
                self._slots[fd] = i
                # fd, state, data_begin, data_end, event_count, generation, parent, flags, err
                gen = st[5] if st is not None else 0
                self._slot_state[i] = [fd, SLOT_USED, self.data.tail, self.data.tail, 0, gen, 0, 0, 0]
                return i
            i = (i + 1) & (n - 1)
        raise RingFull("stream info ring has no free slot")

    def slot_open(self, fd: int, parent_fd: int = 0, flags: int = 0, host_known: bool = False) -> None:
        i = self._slot_index(fd, True)
        st = self._slot_state[i]
        st[6] = parent_fd
        st[7] |= flags
        if host_known:
            self._known.add(fd)
        self._bump(i)

    def announce(self, fd: int, events: int, parent_fd: int = 0, flags: int = 0) -> DataRef:
        """Open fd's slot and tell the host about it with an event record.

        The host only pins data-ring space for fds it knows, so data for an
        announced fd is not published until the announcement has landed.
        """
        self.slot_open(fd, parent_fd, flags)
        ref = self.g_event(fd, events)
        self._announce[fd] = ref
        return ref

    def publishable(self, fd: int, ref: DataRef | None) -> bool:
        if ref is not None and not self.flushed(ref):
            return False
        if ref is None or ref.which != DATA or fd in self._known:
            return True
        ann = self._announce.get(fd)
        return ann is not None and self.flushed(ann)

    def g_publish(self, fd: int, ref: DataRef | None, event_delta: int = 0, *,
                  set_flags: int = 0, err: int = 0) -> None:
        """Extend fd's published extent to ``ref`` and queue it for the host."""
        if (ref is None or len(ref) == 0) and event_delta == 0 and not set_flags:
            return
        if self.guard and not self.publishable(fd, ref):
            self.stats["ordering_stalls"] += 1
            raise OrderingViolation(f"fd {fd}: data [{ref.begin}, {ref.end}) not yet flushed")
        if ref is not None and ref.which == DATA and fd not in self._known:
            self._known.add(fd)
            self._announce.pop(fd, None)
        i = self._slot_index(fd, True)
        st = self._slot_state[i]
        if ref is not None and ref.which == DATA:
            st[3] = max(st[3], ref.end)
        st[4] += event_delta
        st[7] |= set_flags
        if err:
            st[8] = err
        self._bump(i)
        self.stats["publishes"] += 1

    def slot_close(self, fd: int) -> None:
        self._started.discard(fd)
        self._known.discard(fd)
        self._announce.pop(fd, None)
        i = self._slots.pop(fd, None)
        if i is None:
            return
        st = self._slot_state[i]
        st[1] = SLOT_TOMB
        self._bump(i)

    def slot(self, fd: int) -> list | None:
        i = self._slots.get(fd)
        return None if i is None else self._slot_state[i]

    def _bump(self, i: int) -> None:
        st = self._slot_state[i]
        st[5] = (st[5] + 1) & 0xFFFFFFFF
        self._w(self.layout.info_nic_off + INFO_HDR_LEN + i * SLOT_SIZE, SLOT.pack(*st))
        if i > self._dirty_max:
            self._dirty_max = i

    @property
    def info_dirty(self) -> bool:
        return self._dirty_max >= 0

    def info_flush(self) -> bool:
        """Publish header and dirty slots as one descriptor so they land together."""
        if self._info_inflight:
            return False
        if self.guard:
            data_tail, event_tail = self.data.flush.prefix, self.events.flush.prefix
        else:
            data_tail, event_tail = self.data.flush.submitted, self.events.flush.submitted
        if self._dirty_max < 0 and (data_tail, event_tail) == self._hdr_tails:
            return False
        self._hdr_tails = (data_tail, event_tail)
        self.info_generation += 1
        off = self.layout.info_nic_off
        self._w(off, INFO_HDR.pack(self.info_generation, data_tail, event_tail, self.slot_count))
        n = INFO_HDR_LEN + (self._dirty_max + 1) * SLOT_SIZE
        self._dirty_max = -1
        self.stats["dma_submits"] += 1
        self._info_inflight = {self.port.submit(DmaDescriptor(NIC, off, off, n))}
        self.stats["info_flushes"] += 1
        return True

    # -- per-cycle DMA --------------------------------------------------------------

    def flush(self, include_g: bool = True) -> int:
        """Submit queued retvals, W_DONE flags and (optionally) new G-ring bytes.

        Returns the number of transactions submitted.
        """
        txns = 0
        if self._queued_retvals:
            views, self._queued_retvals = self._queued_retvals, []
            descs = [DmaDescriptor(NIC, v.off + SB_HDR_LEN, v.off + SB_HDR_LEN, RETVAL_LEN) for v in views]
            for tok, v in zip(self._submit(descs), views):
                self._retval_pending[tok] = v
            txns += 1
        if self._queued_flags:
            views, self._queued_flags = self._queued_flags, []
            txns += self._submit_flags(views)
        for ring in (self.data, self.events) if include_g else ():
            start, end = ring.flush.submitted, ring.tail
            if end <= start:
                continue
            descs = [DmaDescriptor(NIC, off, off, n) for off, n in ring.ranges(start, end)]
            toks = self._submit(descs)
            seg = ring.flush.add(start, end, toks)
            for t in toks:
                self._g_tokens[t] = [ring, seg]
            txns += 1
        self.stats["flush_txns"] += txns
        return txns

    def _submit_flags(self, views: list[SBlockView]) -> int:
        descs = [self._flag_desc(v) for v in views]
        for tok, v in zip(self._submit(descs), views):
            self._flag_pending[tok] = v.vpos
        self.stats["flag_writes"] += len(views)
        return 1

    def handle(self, completion) -> bool:
        """Apply one polled DMA completion; False if the token is not ours."""
        tok = completion.token
        if tok in self._g_tokens:
            ring, seg = self._g_tokens.pop(tok)
            seg[2].discard(tok)
            ring.flush.advance()
            return True
        if tok in self._sync_inflight:
            self._sync_inflight.discard(tok)
            if not self._sync_inflight:
                self.synced_limit = self._sync_pending_limit
            return True
        if tok in self._head_inflight:
            self._head_inflight.discard(tok)
            _gen, dhead, ehead, _n = INFO_HDR.unpack_from(self.mem, self.layout.info_host_off)
            self.data.head = max(self.data.head, dhead)
            self.events.head = max(self.events.head, ehead)
            return True
        if tok in self._flag_pending:
            del self._flag_pending[tok]
            return True
        if tok in self._retval_pending:
            view = self._retval_pending.pop(tok)
            # retval is visible on the host; only now may the flag say so
            self._submit_flags([view])
            return True
        if tok in self._info_inflight:
            self._info_inflight.discard(tok)
            return True
        return False


# -- G-rings: host consumer side -----------------------------------------------

class SlotView:
    __slots__ = ("index", "fd", "state", "data_begin", "data_end", "event_count",
                 "generation", "parent_fd", "flags", "err")

    def __init__(self, index, values):
        self.index = index
        (self.fd, self.state, self.data_begin, self.data_end, self.event_count,
         self.generation, self.parent_fd, self.flags, self.err) = values


class HostRings:
    """Host end of one core's ring set."""

    def __init__(self, layout: RingLayout, host_mem: bytearray, audit: WriteAudit | None = None):
        self.layout = layout
        self.cfg = layout.cfg
        self.mem = host_mem
        self.audit = audit
        self.s = SRingProducer(host_mem, layout.s_off, layout.cfg.s_ring_bytes, audit)
        self.slot_count = layout.cfg.info_slots
        self._cursor: dict[int, int | None] = {}   # fd -> next unread position (None: not started)
        self._partial: dict[int, int] = {}    # fd -> bytes already read from the chunk at cursor
        self.event_cursor = 0
        self.data_head = 0
        self.stats = {"consumed_bytes": 0, "events_read": 0, "head_updates": 0, "chunks_walked": 0}

    # -- stream info reads ----------------------------------------------------------

    def info_header(self) -> tuple[int, int, int]:
        gen, dtail, etail, _ = INFO_HDR.unpack_from(self.mem, self.layout.info_nic_off)
        return gen, dtail, etail

    def slot_lookup(self, fd: int) -> SlotView | None:
        n = self.slot_count
        base = self.layout.info_nic_off + INFO_HDR_LEN
        i = fd_hash(fd, n)
        for _ in range(n):
            vals = SLOT.unpack_from(self.mem, base + i * SLOT_SIZE)
            if vals[1] == SLOT_EMPTY:
                return None
            if vals[1] == SLOT_USED and vals[0] == fd:
                return SlotView(i, vals)
            i = (i + 1) & (n - 1)
        return None

    # -- data ring ------------------------------------------------------------------

    def _start(self, fd: int, slot: SlotView) -> int:
        cur = self._cursor.get(fd)
        return slot.data_begin if cur is None else max(cur, slot.data_begin)

    def available(self, fd: int, slot: SlotView | None = None) -> bool:
        slot = slot or self.slot_lookup(fd)
        if slot is None:
            return False
        return self._start(fd, slot) < slot.data_end

    def g_consume(self, fd: int, max_bytes: int, slot: SlotView | None = None) -> bytes:
        """Up to ``max_bytes`` of fd's published stream, in production order."""
        slot = slot or self.slot_lookup(fd)
        if slot is None:
            raise WouldBlock(f"fd {fd} has no published stream")
        cap = self.cfg.data_ring_bytes
        base = self.layout.data_off
        mem = self.mem
        cur = self._start(fd, slot)
        skip = self._partial.get(fd, 0)
        end = slot.data_end
        out = []
        got = 0
        while cur < end and got < max_bytes:
            pos = cur % cap
            cfd, n = CHUNK_HDR.unpack_from(mem, base + pos)
            self.stats["chunks_walked"] += 1
            if cfd == WRAP_FD:
                cur += cap - pos
                continue
            fp = align8(CHUNK_HDR_LEN + n)
            if cfd != fd:
                cur += fp
                continue
            take = min(n - skip, max_bytes - got)
            start = base + pos + CHUNK_HDR_LEN + skip
            out.append(mem[start:start + take])
            got += take
            skip += take
            if skip == n:
                cur += fp
                skip = 0
        if got == 0:
            self._cursor[fd] = cur
            raise WouldBlock(f"fd {fd}: no data")
        self._cursor[fd] = cur
        self._partial[fd] = skip
        self.stats["consumed_bytes"] += got
        return b"".join(out)

    def forget(self, fd: int) -> None:
        self._cursor.pop(fd, None)
        self._partial.pop(fd, None)

    def track(self, fd: int) -> None:
        """Pin data-ring space for fd from the start of its published stream."""
        self._cursor.setdefault(fd, None)

    # -- events ---------------------------------------------------------------------

    def read_events(self, max_records: int = 1 << 30) -> list[tuple[int, int]]:
        _, _, etail = self.info_header()
        cap = self.cfg.event_ring_bytes
        base = self.layout.event_off
        out = []
        cur = self.event_cursor
        while cur < etail and len(out) < max_records:
            rec = EVENT_REC.unpack_from(self.mem, base + cur % cap)
            self._cursor.setdefault(rec[0], None)
            out.append(rec)
            cur += EVENT_REC_LEN
        self.event_cursor = cur
        self.stats["events_read"] += len(out)
        return out

    # -- head pointers ---------------------------------------------------------------

    def publish_heads(self) -> None:
        """Write consumption heads into the host-owned info ring header.

        Fully consumed streams are moved up to the published tail first, so an
        idle connection does not pin the data ring.
        """
        _, dtail, _ = self.info_header()
        head = dtail
        for fd in self._cursor:
            slot = self.slot_lookup(fd)
            if slot is None:
                continue
            cur = self._start(fd, slot)
            if cur >= slot.data_end and not self._partial.get(fd):
                if cur < dtail:
                    self._cursor[fd] = cur = dtail
            elif cur < head:
                head = cur
        head = max(head, self.data_head)
        off = self.layout.info_host_off
        INFO_HDR.pack_into(self.mem, off, self.stats["head_updates"] + 1, head, self.event_cursor,
                           self.slot_count)
        if self.audit is not None:
            self.audit.record(HOST, HOST, off, INFO_HDR.size)
        self.data_head = head
        self.stats["head_updates"] += 1


def dump_layout(layout: RingLayout, mem: bytearray | None = None, width: int = 32) -> str:
    """Human-readable description of a ring set, with hex previews when ``mem`` is given."""
    lines = [f"ring set at base {layout.base:#x}, {layout.size} bytes"]
    for name, off, length in layout.regions():
        lines.append(f"{name:<11} offset {off:#010x} length {length:#x}")
        if mem is not None:
            lines.append(f"    {bytes(mem[off:off + width]).hex(' ')}")
    lines.append("s-block header: flag u32 | length u32 | retval i64 (sync kinds) | body")
    lines.append("data chunk: fd u32 | len u32 | payload | pad8 ; wrap marker fd=0xffffffff")
    lines.append("event record: fd u32 | events u32")
    lines.append("info slot (64B): fd u32 | state u32 | data_begin u64 | data_end u64 | "
                 "event_count u32 | generation u32 | parent_fd u32 | flags u32 | err i32")
    flags = ", ".join(f"{v}={k}" for k, v in sorted(FLAG_NAMES.items()))
    lines.append(f"flags: {flags}")
    return "\n".join(lines)
