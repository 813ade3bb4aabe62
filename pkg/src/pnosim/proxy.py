"""Host-side socket API over the ring pair.

Descriptors at or above 1000 are offloaded: writes and control calls become
S-ring blocks, reads and readiness are served from the host copy of the
G-rings. Lower descriptors belong to a host-local event facility; epoll sets
hold both kinds and merge their readiness.
"""

from __future__ import annotations

import errno
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from .bridge import (
    CLOSE_BODY, CONNECT_BODY, EPOLL_CTL_ADD, EPOLL_CTL_BODY, EPOLL_CTL_DEL, EPOLL_CTL_MOD,
    EPOLLERR, EPOLLET, EPOLLHUP, EPOLLIN, EPOLLOUT, EPOLLRDHUP, EV_NEW_CONN, FD_BASE, FENCE_BODY,
    LISTEN_BODY, SETOPT_BODY, SOCK_STREAM, SOCKET_BODY, WRITE_HDR,
)
from .errors import BadEpfd, BadFd, RingFull, SocketError, WouldBlock, from_errno
from .rings import (
    SF_CONNECTED, SF_EOF, SF_ERR, SF_LISTENING, W_CLOSE, W_CONNECT, W_EPOLL_CTL, W_FENCE,
    W_LISTEN, W_SENDFILE, W_SETOPT, W_SOCKET, W_WRITE, HostRings,
)
from .wire import ip_to_bytes

LOCAL = "local"
OFFLOADED = "offloaded"

AF_INET = 2
LOCAL_FD_START = 3


def route_fd(fd: int) -> str:
    if fd < 0:
        raise BadFd(f"negative fd {fd}")
    return OFFLOADED if fd >= FD_BASE else LOCAL


# -- host-local readiness facility ---------------------------------------------------

class LocalEventSource:
    """Readiness of descriptors that never leave the host."""

    def poll(self, fds) -> list[tuple[int, int]]:
        """Level-triggered (fd, events) for the fds of interest that are ready now."""
        raise NotImplementedError

    def owns(self, fd: int) -> bool:
        raise NotImplementedError


class LocalSources(LocalEventSource):
    """Deterministic pipe and timer descriptors for hermetic tests.

    Descriptors are numbered from 3 and never reach 1000.
    """

    def __init__(self, clock: Callable[[], float] = lambda: 0.0):
        self.clock = clock
        self._next = LOCAL_FD_START
        self.pipes: dict[int, bytearray] = {}
        self.timers: dict[int, float | None] = {}
        self.others: set[int] = set()

    def _alloc(self) -> int:
        fd = self._next
        if fd >= FD_BASE:
            raise SocketError("local descriptor space exhausted", errno.EMFILE)
        self._next += 1
        return fd

    def pipe(self) -> int:
        fd = self._alloc()
        self.pipes[fd] = bytearray()
        return fd

    def timer(self, deadline: float | None = None) -> int:
        fd = self._alloc()
        self.timers[fd] = deadline
        return fd

    def handle(self) -> int:
        """A bare local descriptor (epoll instances use these)."""
        fd = self._alloc()
        self.others.add(fd)
        return fd

    def owns(self, fd: int) -> bool:
        return fd in self.pipes or fd in self.timers or fd in self.others

    def arm(self, fd: int, deadline: float) -> None:
        self.timers[fd] = deadline

    def write(self, fd: int, data: bytes) -> int:
        if fd not in self.pipes:
            raise BadFd(f"fd {fd} is not a local pipe")
        self.pipes[fd] += data
        return len(data)

    def read(self, fd: int, max_bytes: int) -> bytes:
        if fd in self.pipes:
            buf = self.pipes[fd]
            if not buf:
                raise WouldBlock(f"pipe {fd} empty")
            out = bytes(buf[:max_bytes])
            del buf[:max_bytes]
            return out
        if fd in self.timers:
            dl = self.timers[fd]
            if dl is None or self.clock() < dl:
                raise WouldBlock(f"timer {fd} not expired")
            self.timers[fd] = None
            return struct.pack("<Q", 1)
        raise BadFd(f"fd {fd} not readable")

    def close(self, fd: int) -> None:
        self.pipes.pop(fd, None)
        self.timers.pop(fd, None)
        self.others.discard(fd)

    def poll(self, fds) -> list[tuple[int, int]]:
        now = self.clock()
        out = []
        for fd, interest in fds.items():
            ev = 0
            if fd in self.pipes:
                ev = EPOLLOUT | (EPOLLIN if self.pipes[fd] else 0)
            elif fd in self.timers:
                dl = self.timers[fd]
                ev = EPOLLIN if dl is not None and now >= dl else 0
            ev &= interest | EPOLLERR | EPOLLHUP
            if ev:
                out.append((fd, ev))
        return out


# -- descriptor tables -------------------------------------------------------------

@dataclass
class FdEntry:
    fd: int
    kind: str = "socket"        # socket | listener | conn
    nonblocking: bool = False
    port: int = 0
    epolls: set = field(default_factory=set)


class FdTable:
    """Offloaded descriptors known to this host thread."""

    def __init__(self):
        self.entries: dict[int, FdEntry] = {}

    def add(self, fd: int, kind: str = "socket") -> FdEntry:
        if fd < FD_BASE:
            raise ValueError(f"offloaded fd {fd} below {FD_BASE}")
        if fd in self.entries:
            raise ValueError(f"fd {fd} already open")
        e = self.entries[fd] = FdEntry(fd, kind)
        return e

    def get(self, fd: int) -> FdEntry:
        e = self.entries.get(fd)
        if e is None:
            raise BadFd(f"fd {fd} is not open")
        return e

    def remove(self, fd: int) -> FdEntry | None:
        return self.entries.pop(fd, None)

    def __contains__(self, fd: int) -> bool:
        return fd in self.entries


class EpollSet:
    def __init__(self, epfd: int):
        self.epfd = epfd
        self.offloaded: dict[int, int] = {}
        self.local: dict[int, int] = {}
        self.armed: dict[int, bool] = {}      # offloaded fd -> already reported since armed


@dataclass
class ProxyConfig:
    spin_budget_us: float = 10_000.0   # longest synchronous wait before giving up
    max_block: int = 16 << 10          # largest payload per write block
    sync_per_call: bool = False        # baseline: every call waits for a NIC round trip
    host_call_us: float = 0.1          # simulated host cost of one API call

    def __post_init__(self) -> None:
        if self.spin_budget_us <= 0:
            raise ValueError("proxy.spin_budget_us must be > 0")
        if self.max_block < 1:
            raise ValueError("proxy.max_block must be >= 1")


Waiter = Callable[[Callable[[], bool], float], bool]


def _no_waiter(pred: Callable[[], bool], budget: float) -> bool:
    return pred()


class Proxy:
    """The p_* API for one host thread bound to one core's ring set.

    ``waiter(pred, budget_us)`` must run the rest of the system until
    ``pred()`` holds or the budget is spent, returning ``pred()``.
    """

    def __init__(self, rings: HostRings, local: LocalSources | None = None,
                 config: ProxyConfig | None = None, waiter: Waiter | None = None):
        self.rings = rings
        self.local = local or LocalSources()
        self.cfg = config or ProxyConfig()
        self.waiter = waiter or _no_waiter
        self.fds = FdTable()
        self.epolls: dict[int, EpollSet] = {}
        self.accept_q: dict[int, deque] = {}
        self._max_block = min(self.cfg.max_block,
                              rings.cfg.s_ring_bytes // 4 - 24, rings.cfg.scan_window - 24)
        self.cost_us = 0.0
        self.stats = dict.fromkeys((
            "calls", "sync_waits", "sync_waits_read", "sync_waits_epoll", "writes",
            "bytes_written", "short_writes", "reads", "bytes_read", "epoll_waits",
            "events_returned", "accepts"), 0)

    # -- plumbing -------------------------------------------------------------------

    def _call(self) -> None:
        self.stats["calls"] += 1
        self.cost_us += self.cfg.host_call_us

    def _wait(self, pred: Callable[[], bool], what: str) -> None:
        if pred():
            return
        if not self.waiter(pred, self.cfg.spin_budget_us):
            raise SocketError(f"{what}: no answer within spin budget", errno.ETIMEDOUT)

    def _alloc(self, size: int, sync: bool, nonblocking: bool = False):
        s = self.rings.s
        try:
            return s.s_alloc(size, sync=sync)
        except RingFull:
            if nonblocking:
                raise
        box = []

        def got_space() -> bool:
            try:
                box.append(s.s_alloc(size, sync=sync))
                return True
            except RingFull:
                return False

        self._wait(got_space, "S-ring allocation")
        return box[0]

    def _sync(self, flag: int, body: bytes, path: str = "") -> int:
        blk = self._alloc(len(body), sync=True)
        blk.write(0, body)
        self.rings.s.s_commit(blk, flag)
        self.stats["sync_waits"] += 1
        if path:
            self.stats[path] += 1
        self._wait(lambda: blk.done, f"{flag} request")
        rv = blk.retval
        blk.retire()
        return rv

    def _fence(self, path: str) -> None:
        self._sync(W_FENCE, FENCE_BODY.pack(0, 0), path)

    def _check(self, rv: int) -> int:
        if rv < 0:
            raise from_errno(-rv, "bridge refused request")
        return rv

    def _pump_events(self) -> None:
        """Fold newly published event records into accept queues and epoll arming."""
        for fd, ev in self.rings.read_events():
            if ev & EV_NEW_CONN:
                slot = self.rings.slot_lookup(fd)
                parent = slot.parent_fd if slot is not None else 0
                if parent in self.fds:
                    self.accept_q.setdefault(parent, deque()).append(fd)
                    self._arm(parent)
                continue
            self._arm(fd)

    def _arm(self, fd: int) -> None:
        entry = self.fds.entries.get(fd)
        if entry is None:
            return
        for epfd in entry.epolls:
            es = self.epolls.get(epfd)
            if es is not None and fd in es.offloaded:
                es.armed[fd] = False

    # -- socket lifecycle --------------------------------------------------------------

    def p_socket(self, domain: int = AF_INET, stype: int = SOCK_STREAM) -> int:
        self._call()
        fd = self._check(self._sync(W_SOCKET, SOCKET_BODY.pack(domain, stype)))
        self.fds.add(fd)
        self.rings.track(fd)
        return fd

    def p_setnonblocking(self, fd: int, flag: bool = True) -> None:
        self._call()
        if route_fd(fd) == OFFLOADED:
            self.fds.get(fd).nonblocking = flag

    def p_bind(self, fd: int, port: int) -> int:
        self._call()
        e = self.fds.get(fd)
        if not 0 < port < 65536:
            raise SocketError(f"bad port {port}", errno.EINVAL)
        e.port = port
        return 0

    def p_listen(self, fd: int, backlog: int = 128) -> int:
        self._call()
        e = self.fds.get(fd)
        if not e.port:
            raise SocketError("listen before bind", errno.EDESTADDRREQ)
        self._check(self._sync(W_LISTEN, LISTEN_BODY.pack(fd, e.port, backlog)))
        e.kind = "listener"
        self.accept_q.setdefault(fd, deque())
        return 0

    def p_connect(self, fd: int, addr: tuple[str, int]) -> int:
        self._call()
        e = self.fds.get(fd)
        ip, port = addr
        self._check(self._sync(W_CONNECT, CONNECT_BODY.pack(fd, port, ip_to_bytes(ip))))
        e.kind = "conn"
        return 0

    def p_accept(self, fd: int) -> int:
        self._call()
        e = self.fds.get(fd)
        if e.kind != "listener":
            raise SocketError(f"fd {fd} is not listening", errno.EINVAL)
        if self.cfg.sync_per_call:
            self._fence("sync_waits_read")
        q = self.accept_q.setdefault(fd, deque())
        self._pump_events()
        if not q:
            if e.nonblocking:
                raise WouldBlock("no pending connection")

            def pending() -> bool:
                self._pump_events()
                return bool(q)

            self._wait(pending, "accept")
        new = q.popleft()
        ne = self.fds.add(new, "conn")
        ne.nonblocking = e.nonblocking
        self.stats["accepts"] += 1
        return new

    def p_close(self, fd: int) -> int:
        self._call()
        if route_fd(fd) == LOCAL:
            if fd in self.epolls:
                del self.epolls[fd]
            elif not self.local.owns(fd):
                raise BadFd(f"fd {fd} is not open")
            self.local.close(fd)
            for es in self.epolls.values():
                es.local.pop(fd, None)
            return 0
        e = self.fds.get(fd)
        blk = self._alloc(CLOSE_BODY.size, sync=False)
        blk.write(0, CLOSE_BODY.pack(fd))
        self.rings.s.s_commit(blk, W_CLOSE)
        for epfd in e.epolls:
            es = self.epolls.get(epfd)
            if es is not None:
                es.offloaded.pop(fd, None)
                es.armed.pop(fd, None)
        self.fds.remove(fd)
        self.accept_q.pop(fd, None)
        self.rings.forget(fd)
        return 0

    def p_setsockopt(self, fd: int, level: int, option: int, value: int) -> int:
        self._call()
        self.fds.get(fd)
        return self._check(self._sync(W_SETOPT, SETOPT_BODY.pack(fd, level, option, value)))

    # -- data path --------------------------------------------------------------------

    def p_write(self, fd: int, data, _flag: int = W_WRITE) -> int:
        self._call()
        if route_fd(fd) == LOCAL:
            return self.local.write(fd, bytes(data))
        e = self.fds.get(fd)
        mv = memoryview(data).cast("B")
        n = len(mv)
        if n == 0:
            return 0
        s = self.rings.s
        sent = 0
        while sent < n:
            take = min(self._max_block, n - sent)
            try:
                blk = self._alloc(WRITE_HDR.size + take, sync=False, nonblocking=e.nonblocking)
            except RingFull:
                if sent:
                    self.stats["short_writes"] += 1
                    break
                raise WouldBlock("S-ring full")
            blk.write(0, WRITE_HDR.pack(fd, take))
            blk.write(WRITE_HDR.size, mv[sent:sent + take])
            s.s_commit(blk, _flag)
            sent += take
            if self.cfg.sync_per_call:
                self.stats["sync_waits"] += 1
                self._wait(lambda: blk.done, "write")
        self.stats["writes"] += 1
        self.stats["bytes_written"] += sent
        return sent

    def p_read(self, fd: int, max_bytes: int) -> bytes:
        self._call()
        if route_fd(fd) == LOCAL:
            return self.local.read(fd, max_bytes)
        e = self.fds.get(fd)
        if self.cfg.sync_per_call:
            self._fence("sync_waits_read")
        self.stats["reads"] += 1
        rings = self.rings
        while True:
            slot = rings.slot_lookup(fd)
            if slot is not None:
                try:
                    out = rings.g_consume(fd, max_bytes, slot)
                    self.stats["bytes_read"] += len(out)
                    return out
                except WouldBlock:
                    if slot.flags & SF_EOF:
                        return b""
                    if slot.flags & SF_ERR:
                        raise from_errno(slot.err or errno.ECONNRESET, f"fd {fd}")
            if e.nonblocking:
                raise WouldBlock(f"fd {fd}: no data")
            self._wait(lambda: self._readable(fd), "read")

    def _readable(self, fd: int) -> bool:
        slot = self.rings.slot_lookup(fd)
        return slot is not None and (self.rings.available(fd, slot) or bool(slot.flags & (SF_EOF | SF_ERR)))

    def p_sendfile(self, out_fd: int, source, count: int, offset: int = 0) -> int:
        """Stream ``count`` bytes of ``source`` (bytes-like or readable file) to ``out_fd``."""
        self._call()
        if count <= 0:
            return 0
        if route_fd(out_fd) == LOCAL:
            raise SocketError("sendfile target must be an offloaded socket", errno.EINVAL)
        self.fds.get(out_fd)
        sent = 0
        while sent < count:
            want = min(self._max_block, count - sent)
            if hasattr(source, "read"):
                source.seek(offset + sent)
                piece = source.read(want)
            else:
                piece = bytes(source[offset + sent:offset + sent + want])
            if not piece:
                break
            try:
                n = self.p_write(out_fd, piece, _flag=W_SENDFILE)
            except WouldBlock:
                if sent:
                    break
                raise
            sent += n
            if n < len(piece):
                break
        return sent

    # -- epoll ----------------------------------------------------------------------------

    def p_epoll_create(self) -> int:
        self._call()
        epfd = self.local.handle()
        self.epolls[epfd] = EpollSet(epfd)
        return epfd

    def p_epoll_ctl(self, epfd: int, op: int, fd: int, events: int = EPOLLIN) -> int:
        self._call()
        es = self.epolls.get(epfd)
        if es is None:
            raise BadEpfd(f"epfd {epfd} unknown")
        if op not in (EPOLL_CTL_ADD, EPOLL_CTL_MOD, EPOLL_CTL_DEL):
            raise SocketError(f"bad epoll op {op}", errno.EINVAL)
        if events & EPOLLET:
            raise SocketError("edge-triggered epoll is not supported", errno.EINVAL)
        if route_fd(fd) == LOCAL:
            if not self.local.owns(fd) or fd in self.epolls:
                raise BadFd(f"fd {fd} is not pollable")
            return self._ctl(es.local, op, fd, events)
        e = self.fds.get(fd)
        self._ctl(es.offloaded, op, fd, events)
        self._check(self._sync(W_EPOLL_CTL, EPOLL_CTL_BODY.pack(epfd, op, fd, events)))
        if op == EPOLL_CTL_DEL:
            e.epolls.discard(epfd)
            es.armed.pop(fd, None)
        else:
            e.epolls.add(epfd)
            es.armed[fd] = False  # anything already pending is reported once
        return 0

    @staticmethod
    def _ctl(table: dict, op: int, fd: int, events: int) -> int:
        if op == EPOLL_CTL_ADD:
            if fd in table:
                raise SocketError(f"fd {fd} already registered", errno.EEXIST)
            table[fd] = events
        elif op == EPOLL_CTL_MOD:
            if fd not in table:
                raise SocketError(f"fd {fd} not registered", errno.ENOENT)
            table[fd] = events
        else:
            if table.pop(fd, None) is None:
                raise SocketError(f"fd {fd} not registered", errno.ENOENT)
        return 0

    def readiness(self, fd: int) -> int:
        """Current readiness mask of an offloaded fd from the host-side G cache."""
        e = self.fds.entries.get(fd)
        if e is None:
            return 0
        if e.kind == "listener":
            return EPOLLIN if self.accept_q.get(fd) else 0
        slot = self.rings.slot_lookup(fd)
        if slot is None:
            return 0
        ev = 0
        if self.rings.available(fd, slot):
            ev |= EPOLLIN
        if slot.flags & SF_EOF:
            ev |= EPOLLIN | EPOLLRDHUP
        if slot.flags & SF_ERR:
            ev |= EPOLLERR | EPOLLHUP
        if slot.flags & SF_CONNECTED and not slot.flags & (SF_ERR | SF_LISTENING) \
                and self.rings.s.free >= self._max_block + 32:
            ev |= EPOLLOUT
        return ev

    def _collect(self, es: EpollSet, max_events: int) -> list[tuple[int, int]]:
        out = self.local.poll(es.local)[:max_events]
        mask_extra = EPOLLERR | EPOLLHUP
        for fd, interest in es.offloaded.items():
            if len(out) >= max_events:
                break
            if fd in es.armed:
                ev = self.readiness(fd) & (interest | mask_extra)
                if ev:
                    out.append((fd, ev))
                    es.armed[fd] = True
                elif es.armed[fd]:
                    del es.armed[fd]  # reported earlier and since consumed
            elif interest & EPOLLOUT:
                ev = self.readiness(fd) & EPOLLOUT
                if ev:
                    out.append((fd, ev))
        return out

    def p_epoll_wait(self, epfd: int, max_events: int = 64, timeout_us: float = 0) -> list[tuple[int, int]]:
        """Ready (fd, events) pairs; ``timeout_us`` < 0 waits indefinitely, 0 never waits."""
        self._call()
        es = self.epolls.get(epfd)
        if es is None:
            raise BadEpfd(f"epfd {epfd} unknown")
        if max_events < 1:
            raise SocketError("max_events must be >= 1", errno.EINVAL)
        if self.cfg.sync_per_call:
            self._fence("sync_waits_epoll")
        self.stats["epoll_waits"] += 1
        self._pump_events()
        out = self._collect(es, max_events)
        if not out and timeout_us != 0:
            box = []

            def ready() -> bool:
                self._pump_events()
                box[:] = self._collect(es, max_events)
                return bool(box)

            budget = self.cfg.spin_budget_us if timeout_us < 0 else timeout_us
            self.waiter(ready, budget)
            out = box
        self.rings.publish_heads()
        self.stats["events_returned"] += len(out)
        return out

    def pump(self) -> None:
        """Housekeeping a thread calls when idle: fold events, return ring space."""
        self._pump_events()
        self.rings.publish_heads()
        self.rings.s.reclaim()
