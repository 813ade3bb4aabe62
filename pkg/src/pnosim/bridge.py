"""NIC-side bridge: turns S-ring requests into TCP stack calls and moves
received stream data and readiness into the G-rings."""

from __future__ import annotations

import errno
import struct
from collections import deque
from dataclasses import dataclass, field

from .errors import BadFd, ConnClosed, DataRingFull, OrderingViolation, SocketError, WindowFull, WouldBlock
from .rings import (
    FLAG_NAMES, SF_CONNECTED, SF_EOF, SF_ERR, SF_LISTENING, SYNC_FLAGS, W_CLOSE,
    W_CONNECT, W_EPOLL_CTL, W_FENCE, W_LISTEN, W_SENDFILE, W_SETOPT, W_SOCKET, W_WRITE,
    NicRings, SBlockView,
)
from .tcp import TcpConn, TcpStack, TcpState
from .tcp.stack import (
    EV_ACCEPT, EV_CLOSED, EV_CONNECTED, EV_EOF, EV_ERROR, EV_READABLE, EV_WRITABLE,
)

FD_BASE = 1000

EPOLLIN = 0x001
EPOLLOUT = 0x004
EPOLLERR = 0x008
EPOLLHUP = 0x010
EPOLLRDHUP = 0x2000
EPOLLET = 1 << 31            # edge-triggered mode is not supported
EV_NEW_CONN = 1 << 16       # event record announcing an accepted connection
EV_CONNECT_DONE = 1 << 17

EPOLL_CTL_ADD = 1
EPOLL_CTL_DEL = 2
EPOLL_CTL_MOD = 3

SOCK_STREAM = 1

# S-block bodies
SOCKET_BODY = struct.Struct("<II")       # domain, type
LISTEN_BODY = struct.Struct("<III")      # fd, port, backlog
CONNECT_BODY = struct.Struct("<II4s")    # fd, port, ipv4
WRITE_HDR = struct.Struct("<II")         # fd, size; payload follows
CLOSE_BODY = struct.Struct("<I")         # fd
SETOPT_BODY = struct.Struct("<IIIi")     # fd, level, option, value
EPOLL_CTL_BODY = struct.Struct("<IIII")  # epfd, op, fd, events
FENCE_BODY = struct.Struct("<II")        # fd, reason


class FdAllocator:
    """Offloaded descriptor numbers, shared by every core's bridge."""

    def __init__(self, start: int = FD_BASE):
        self.next_fd = start

    def allocate(self) -> int:
        fd = self.next_fd
        self.next_fd += 1
        return fd


@dataclass
class BridgeConfig:
    poll_budget: int = 256          # S-blocks dispatched per cycle
    rx_budget: int = 64             # receive blocks drained per connection per cycle
    batch_window_us: float = 0.0    # hold G-ring flushes this long to batch more data
    batch_max: int = 64             # flush early once this many chunks are waiting
    tx_backlog_bytes: int = 1 << 20
    guard: bool = True
    batch: bool = True

    def __post_init__(self) -> None:
        if self.poll_budget < 1 or self.rx_budget < 1 or self.batch_max < 1:
            raise ValueError("bridge budgets must be >= 1")
        if self.batch_window_us < 0:
            raise ValueError("bridge.batch_window_us must be >= 0")
        if self.tx_backlog_bytes < 1:
            raise ValueError("bridge.tx_backlog_bytes must be >= 1")


@dataclass
class Sock:
    fd: int
    kind: str = "raw"                       # raw | listener | conn
    conn: TcpConn | None = None
    listener: object = None
    txq: deque = field(default_factory=deque)
    txq_bytes: int = 0
    close_pending: bool = False
    connect_view: SBlockView | None = None
    opts: dict = field(default_factory=dict)
    eof_sent: bool = False
    err_sent: bool = False


REPORT_KEYS = ("scanned", "dispatched", "tx_bytes", "rx_bytes", "chunks", "events",
               "published", "dma_txns", "info_flushes")


class Bridge:
    """One core's bridge task.

    ``bridge_poll_once`` runs a full cycle: dispatch newly synced S-blocks,
    react to stack events, drain received data into the data ring, push DMA,
    publish whatever has landed, and start the next S-ring/head sync.
    """

    def __init__(self, stack: TcpStack, rings: NicRings, fds: FdAllocator | None = None,
                 config: BridgeConfig | None = None, own_poller: bool = True, record: bool = False):
        self.stack = stack
        self.rings = rings
        self.fds = fds or FdAllocator()
        self.cfg = config or BridgeConfig()
        rings.guard = self.cfg.guard
        rings.batch = self.cfg.batch
        self.own_poller = own_poller
        self.sockets: dict[int, Sock] = {}
        self.conn_fd: dict[TcpConn, int] = {}
        self.listen_fd: dict[int, int] = {}          # port -> listener fd
        self.epoll_sets: dict[int, dict[int, int]] = {}
        self.watched: dict[int, int] = {}            # fd -> number of epoll sets holding it
        self.readable: dict[int, None] = {}
        self.pending_pub: deque = deque()
        self.pending_events: deque = deque()
        self.pending_flags: dict[int, tuple[int, int]] = {}
        self.tx_waiting: dict[int, None] = {}
        self.backlog = 0
        self._unflushed = 0
        self._window_start: float | None = None
        self._evented: set[int] = set()
        self.dispatched: list[int] | None = [] if record else None
        self.stats = dict.fromkeys((
            "cycles", "blocks_parsed", "bytes_bridged_tx", "bytes_bridged_rx", "ordering_stalls",
            "unknown_flag", "bad_fd", "sync_completions", "accepts", "connects", "closes",
            "events_out", "event_ring_full", "data_ring_full", "publishes", "rx_dropped"), 0)

    # -- cycle ----------------------------------------------------------------------

    def bridge_poll_once(self, now: float) -> dict[str, int]:
        rings = self.rings
        report = dict.fromkeys(REPORT_KEYS, 0)
        st0 = dict(rings.stats)
        self.stats["cycles"] += 1
        self._now = now
        self._reap()
        # (1) synced S-ring window -> (2) dispatch
        if self.backlog < self.cfg.tx_backlog_bytes:
            views = rings.s_scan(self.cfg.poll_budget)
            report["scanned"] = len(views)
            for v in views:
                self.dispatch(v, now)
                report["dispatched"] += 1
        self._stack_events(now)
        self._retry_tx()
        # (3) receive data into the data ring, then DMA it out
        report["rx_bytes"] = self._drain_rx()
        self._emit_pending_events()
        self._maybe_flush(now)
        # (4) publish refs whose bytes have landed, then push stream info
        self._reap()
        report["published"] = self._publish_ready()
        rings.info_flush()
        # (5) pull the next S-ring window together with host head pointers
        rings.begin_sync()
        report["chunks"] = rings.stats["data_chunks"] - st0["data_chunks"]
        report["events"] = rings.stats["event_records"] - st0["event_records"]
        # the per-cycle S-ring/head poll is cadence, not progress, and is left out
        polls = rings.stats["sync_submits"] - st0["sync_submits"]
        report["dma_txns"] = rings.stats["dma_submits"] - st0["dma_submits"] - polls
        report["info_flushes"] = rings.stats["info_flushes"] - st0["info_flushes"]
        report["tx_bytes"] = self._tx_bytes_cycle
        self._tx_bytes_cycle = 0
        return report

    _tx_bytes_cycle = 0
    _now = 0.0

    def _reap(self) -> None:
        port = self.rings.port
        done = port.poll() if self.own_poller else port.take()
        for c in done:
            self.rings.handle(c)

    @property
    def busy(self) -> bool:
        """True while work is queued that a cycle could advance without new input."""
        # flushes and publications wait on DMA landings, which wake the core anyway
        return bool(self.readable or self.pending_events or self.tx_waiting or self.stack.events
                    or self.stack.has_output())

    def next_deadline(self) -> float | None:
        if self._unflushed and self._window_start is not None:
            return self._window_start + self.cfg.batch_window_us
        return None

    # -- S-block dispatch ---------------------------------------------------------------

    def dispatch(self, view: SBlockView, now: float) -> None:
        self.stats["blocks_parsed"] += 1
        if self.dispatched is not None:
            self.dispatched.append(view.vpos)
        flag = view.flag
        handler = self._handlers.get(flag)
        if handler is None:
            self.stats["unknown_flag"] += 1
            self._finish(view, -1)
            return
        try:
            rv = handler(self, view, now)
        except SocketError as exc:
            rv = -(exc.errno or errno.EINVAL)
        if rv is not None:
            self._finish(view, rv)

    def _finish(self, view: SBlockView, rv: int) -> None:
        if view.flag in SYNC_FLAGS:
            self.rings.s_complete(view, rv)
            self.stats["sync_completions"] += 1
        else:
            self.rings.s_release(view)

    def _sock(self, fd: int) -> Sock:
        s = self.sockets.get(fd)
        if s is None:
            self.stats["bad_fd"] += 1
            raise BadFd(f"fd {fd} unknown to bridge")
        return s

    def _on_socket(self, view, now):
        _domain, stype = view.unpack(SOCKET_BODY)
        if stype != SOCK_STREAM:
            return -errno.EPROTONOSUPPORT
        fd = self.fds.allocate()
        self.sockets[fd] = Sock(fd)
        self.rings.slot_open(fd, host_known=True)
        return fd

    def _on_listen(self, view, now):
        fd, port, backlog = view.unpack(LISTEN_BODY)
        s = self._sock(fd)
        if s.kind != "raw":
            return -errno.EINVAL
        s.listener = self.stack.listen(port, max(1, backlog))
        s.listener.user = fd
        s.kind = "listener"
        self.listen_fd[port] = fd
        self.rings.slot_open(fd, flags=SF_LISTENING, host_known=True)
        return 0

    def _on_connect(self, view, now):
        fd, port, ip = view.unpack(CONNECT_BODY)
        s = self._sock(fd)
        if s.kind != "raw":
            return -errno.EISCONN
        conn = self.stack.connect(ip, port, now)
        s.kind = "conn"
        s.conn = conn
        s.connect_view = view
        self.conn_fd[conn] = fd
        self.stats["connects"] += 1
        return None  # completed when the handshake finishes

    def _on_write(self, view, now):
        fd, size = view.unpack(WRITE_HDR)
        s = self.sockets.get(fd)
        if s is None or s.kind != "conn" or s.close_pending or size > view.body_len - WRITE_HDR.size:
            self.stats["bad_fd"] += 1
            return -1
        start = view.body_off + WRITE_HDR.size
        # the one copy across the host boundary: block body -> packet blocks
        data = view.mem[start:start + size]
        self.stats["bytes_bridged_tx"] += size
        self._tx_bytes_cycle += size
        if s.txq:
            s.txq.append(data)
            s.txq_bytes += size
            self.backlog += size
        else:
            self._send(s, data)
        return 0

    def _send(self, s: Sock, data: bytes) -> bool:
        """Hand ``data`` to the stack; park the remainder at the queue head."""
        done = 0
        try:
            done = self.stack.tx_enqueue(s.conn, data) if data else 0
        except WindowFull:
            pass
        except ConnClosed:
            done = len(data)  # the connection is gone; the bytes have nowhere to go
        if done == len(data):
            return True
        rest = data[done:]
        s.txq.appendleft(rest)
        s.txq_bytes += len(rest)
        self.backlog += len(rest)
        return False

    def _retry_tx(self) -> None:
        # fds land here when the stack reports freed send space
        for fd in list(self.tx_waiting):
            del self.tx_waiting[fd]
            s = self.sockets.get(fd)
            if s is None or s.conn is None:
                continue
            while s.txq:
                data = s.txq.popleft()
                s.txq_bytes -= len(data)
                self.backlog -= len(data)
                if not self._send(s, data):
                    break
            if not s.txq and s.close_pending:
                self.stack.close(s.conn, self._now)

    def _on_close(self, view, now):
        (fd,) = view.unpack(CLOSE_BODY)
        s = self.sockets.get(fd)
        if s is None:
            self.stats["bad_fd"] += 1
            return -1
        self.stats["closes"] += 1
        for epfd in list(self.epoll_sets):
            if self.epoll_sets[epfd].pop(fd, None) is not None:
                self._unwatch(fd)
        self.rings.slot_close(fd)
        self.readable.pop(fd, None)
        self.pending_flags.pop(fd, None)
        if s.kind == "listener":
            self.stack.close_listener(s.listener)
            self.listen_fd.pop(s.listener.port, None)
            del self.sockets[fd]
        elif s.kind == "conn":
            s.close_pending = True
            if not s.txq:
                self.stack.close(s.conn, now)
            if s.conn.state == TcpState.CLOSED:
                self._drop(s)
        else:
            del self.sockets[fd]
        return 0

    def _drop(self, s: Sock) -> None:
        self.sockets.pop(s.fd, None)
        if s.conn is not None:
            self.conn_fd.pop(s.conn, None)
        if s.txq_bytes:
            self.backlog -= s.txq_bytes
            s.txq.clear()
            s.txq_bytes = 0
        self.tx_waiting.pop(s.fd, None)

    def _on_setopt(self, view, now):
        fd, level, opt, value = view.unpack(SETOPT_BODY)
        self._sock(fd).opts[(level, opt)] = value
        return 0

    def _on_epoll_ctl(self, view, now):
        epfd, op, fd, events = view.unpack(EPOLL_CTL_BODY)
        self._sock(fd)
        es = self.epoll_sets.setdefault(epfd, {})
        if op == EPOLL_CTL_ADD:
            if fd in es:
                return -errno.EEXIST
            es[fd] = events
            self.watched[fd] = self.watched.get(fd, 0) + 1
        elif op == EPOLL_CTL_MOD:
            if fd not in es:
                return -errno.ENOENT
            es[fd] = events
        elif op == EPOLL_CTL_DEL:
            if es.pop(fd, None) is None:
                return -errno.ENOENT
            self._unwatch(fd)
        else:
            return -errno.EINVAL
        return 0

    def _unwatch(self, fd: int) -> None:
        n = self.watched.get(fd, 0) - 1
        if n <= 0:
            self.watched.pop(fd, None)
        else:
            self.watched[fd] = n

    def _on_fence(self, view, now):
        return 0

    _handlers = {
        W_SOCKET: _on_socket, W_LISTEN: _on_listen, W_CONNECT: _on_connect,
        W_WRITE: _on_write, W_SENDFILE: _on_write, W_CLOSE: _on_close,
        W_SETOPT: _on_setopt, W_EPOLL_CTL: _on_epoll_ctl, W_FENCE: _on_fence,
    }

    # -- stack events ---------------------------------------------------------------------

    def _stack_events(self, now: float) -> None:
        events = self.stack.events
        while events:
            kind, conn = events.popleft()
            if kind == EV_READABLE or kind == EV_EOF:
                fd = self.conn_fd.get(conn)
                if fd is not None:
                    self.readable[fd] = None
            elif kind == EV_ACCEPT:
                self._accept(conn)
            elif kind == EV_CONNECTED:
                fd = self.conn_fd.get(conn)
                s = self.sockets.get(fd) if fd is not None else None
                if s is not None and s.connect_view is not None:
                    self._finish(s.connect_view, 0)
                    s.connect_view = None
                    self._set_flags(fd, SF_CONNECTED)
                    self._event(fd, EPOLLOUT | EV_CONNECT_DONE)
            elif kind == EV_ERROR:
                fd = self.conn_fd.get(conn)
                s = self.sockets.get(fd) if fd is not None else None
                if s is None:
                    continue
                if s.connect_view is not None:
                    self._finish(s.connect_view, -(conn.error or errno.ECONNREFUSED))
                    s.connect_view = None
                    s.kind = "raw"
                    s.conn = None
                    self.conn_fd.pop(conn, None)
                    continue
                self.readable[fd] = None
            elif kind == EV_CLOSED:
                fd = self.conn_fd.get(conn)
                s = self.sockets.get(fd) if fd is not None else None
                if s is not None and s.close_pending:
                    self._drop(s)
            elif kind == EV_WRITABLE:
                fd = self.conn_fd.get(conn)
                if fd is not None and fd in self.sockets and self.sockets[fd].txq:
                    self.tx_waiting[fd] = None

    def _accept(self, conn: TcpConn) -> None:
        lst = conn.listener
        lfd = lst.user if lst is not None else None
        if lfd is None or lfd not in self.sockets:
            return
        while True:
            c = self.stack.accept(lst)
            if c is None:
                return
            fd = self.fds.allocate()
            s = Sock(fd, "conn", c)
            self.sockets[fd] = s
            self.conn_fd[c] = fd
            self.stats["accepts"] += 1
            self.pending_events.append((fd, EV_NEW_CONN, lfd))
            if c.readable_bytes or c.at_eof:
                self.readable[fd] = None

    # -- G-ring production ----------------------------------------------------------------

    def _set_flags(self, fd: int, flags: int, err: int = 0) -> None:
        prev = self.pending_flags.get(fd, (0, 0))
        self.pending_flags[fd] = (prev[0] | flags, err or prev[1])

    def _event(self, fd: int, events: int) -> None:
        self.pending_events.append((fd, events, None))

    def _emit_pending_events(self) -> None:
        rings = self.rings
        while self.pending_events:
            fd, events, parent = self.pending_events[0]
            try:
                if parent is not None:
                    rings.announce(fd, events, parent_fd=parent, flags=SF_CONNECTED)
                else:
                    rings.g_event(fd, events)
            except DataRingFull:
                self.stats["event_ring_full"] += 1
                return
            self.pending_events.popleft()
            self._unflushed += 1
            if self._window_start is None:
                self._window_start = self._now
            self.stats["events_out"] += 1

    def _drain_rx(self) -> int:
        if not self.readable:
            return 0
        rings = self.rings
        total = 0
        self._evented.clear()
        for fd in list(self.readable):
            s = self.sockets.get(fd)
            if s is None or s.conn is None:
                self.readable.pop(fd, None)
                continue
            conn = s.conn
            if s.close_pending:
                # host closed its end: received bytes are discarded
                try:
                    while True:
                        for b in self.stack.rx_read(conn, self.cfg.rx_budget):
                            self.stats["rx_dropped"] += b.len
                except WouldBlock:
                    pass
                self.readable.pop(fd, None)
                continue
            blocked = False
            for _ in range(self.cfg.rx_budget):
                if not conn.pool.assembled:
                    break
                blk = conn.pool.assembled[0]
                try:
                    ref = rings.g_produce(fd, blk.payload)
                except DataRingFull:
                    self.stats["data_ring_full"] += 1
                    blocked = True
                    break
                self.stack.rx_read(conn, 1)
                self.pending_pub.append((fd, ref))
                self._unflushed += 1
                total += len(ref)
                if self._window_start is None:
                    self._window_start = self._now
                if fd in self.watched and fd not in self._evented:
                    self._evented.add(fd)
                    self.pending_events.append((fd, EPOLLIN, None))
            if blocked:
                break
            if not conn.pool.assembled:
                self.readable.pop(fd, None)
                if conn.at_eof and not s.eof_sent:
                    s.eof_sent = True
                    self._set_flags(fd, SF_EOF)
                    if fd in self.watched:
                        self.pending_events.append((fd, EPOLLIN | EPOLLRDHUP, None))
            if conn.error and not conn.pool.assembled and not s.err_sent:
                s.err_sent = True
                self._set_flags(fd, SF_ERR, conn.error)
                if fd in self.watched:
                    self.pending_events.append((fd, EPOLLERR | EPOLLHUP, None))
        self.stats["bytes_bridged_rx"] += total
        return total

    def _maybe_flush(self, now: float) -> None:
        rings = self.rings
        if self._unflushed:
            window = self.cfg.batch_window_us
            due = (window == 0 or self._unflushed >= self.cfg.batch_max
                   or now - self._window_start >= window - 1e-9)
            if not due:
                # S-ring completions are not held back by the batch window
                rings.flush(include_g=False)
                return
            self._unflushed = 0
            self._window_start = None
        rings.flush()

    def _publish_ready(self) -> int:
        rings = self.rings
        n = 0
        latest: dict[int, object] = {}
        guard = self.cfg.guard
        while self.pending_pub:
            fd, ref = self.pending_pub[0]
            if guard and not rings.publishable(fd, ref):
                break
            self.pending_pub.popleft()
            if self._open(fd):
                latest[fd] = ref
        for fd, ref in latest.items():
            try:
                rings.g_publish(fd, ref)
            except OrderingViolation:
                self.stats["ordering_stalls"] += 1
                raise
            n += 1
        if self.pending_flags:
            waiting = {fd for fd, _ in self.pending_pub}
            for fd in list(self.pending_flags):
                if fd in waiting:
                    continue
                flags, err = self.pending_flags.pop(fd)
                if self._open(fd):
                    rings.g_publish(fd, None, set_flags=flags, err=err)
                    n += 1
        self.stats["publishes"] += n
        return n

    def _open(self, fd: int) -> bool:
        s = self.sockets.get(fd)
        return s is not None and not s.close_pending

    # -- reporting ------------------------------------------------------------------------

    def stats_text(self) -> str:
        merged = {f"bridge.{k}": v for k, v in self.stats.items()}
        merged.update({f"rings.{k}": v for k, v in self.rings.stats.items()})
        return "".join(f"{k}={merged[k]}\n" for k in sorted(merged))


def flag_name(flag: int) -> str:
    return FLAG_NAMES.get(flag, str(flag))
