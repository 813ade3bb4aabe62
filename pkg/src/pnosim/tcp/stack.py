"""Per-core TCP engine: handshake, zero-copy send path, reassembly, timers."""

from __future__ import annotations

import errno
import random
import zlib
from collections import deque

from ..errors import AddrInUse, ConnClosed, NoRoute, UnknownSeq, WindowFull, WouldBlock
from ..wire import (
    ACK, FIN, HDR_LEN, PSH, RST, SYN, MalformedFrame, ip_to_bytes, parse_frame,
    refresh_tcp_fields, write_headers,
)
from .block import HEADROOM, PacketBlock
from .conn import RECV_STATES, SEND_STATES, Listener, TcpConfig, TcpConn, TcpState
from .recvpool import RecvPool
from .seq import MASK, unwrap
from .timers import TimerWheel

# event kinds published on TcpStack.events as (kind, conn)
EV_ACCEPT = "accept"
EV_CONNECTED = "connected"
EV_READABLE = "readable"
EV_EOF = "eof"
EV_ERROR = "error"
EV_CLOSED = "closed"
EV_WRITABLE = "writable"

EPHEMERAL_LO = 49152

STAT_KEYS = (
    "frames_in", "frames_out", "rx_malformed", "rx_bad_checksum", "rx_not_for_us",
    "data_segments_out", "data_bytes_out", "retransmits", "fast_retransmits", "timeouts",
    "dup_acks", "acks_ignored", "rx_duplicates", "rx_out_of_order", "rx_payload_bytes",
    "acks_out", "rst_out", "rst_in", "probes_out", "syn_dropped",
    "payload_bytes_written", "conns_opened", "conns_closed", "aborts",
)


def rss_core(ip_a, port_a: int, ip_b, port_b: int, ncores: int) -> int:
    """Direction-independent flow hash standing in for NIC receive-side scaling."""
    if ncores <= 1:
        return 0
    a = ip_to_bytes(ip_a) + port_a.to_bytes(2, "big")
    b = ip_to_bytes(ip_b) + port_b.to_bytes(2, "big")
    lo, hi = sorted((a, b))
    return zlib.crc32(lo + hi) % ncores


class TcpStack:
    """TCP endpoint set owned by one simulated core.

    Frames come in through :meth:`rx_segment`; :meth:`poll` runs timers and
    returns every frame ready to go on the wire. Times are simulated
    microseconds supplied by the caller.
    """

    def __init__(self, ip, mac: bytes = b"\x02\x00\x00\x00\x00\x01",
                 config: TcpConfig | None = None, core: int = 0, ncores: int = 1):
        self.ip = ip_to_bytes(ip)
        self.mac = mac
        self.cfg = config or TcpConfig()
        self.core = core
        self.ncores = ncores
        self.neighbors: dict[bytes, bytes] = {}
        self.conns: dict[tuple, TcpConn] = {}
        self.listeners: dict[int, Listener] = {}
        self.timers = TimerWheel(self.cfg.timer_granularity_us)
        self.events: deque[tuple[str, TcpConn]] = deque()
        self.stats = dict.fromkeys(STAT_KEYS, 0)
        self._out: list[bytes] = []
        self._dirty: dict[TcpConn, None] = {}
        self._rng = random.Random(self.cfg.seed * 1009 + core)
        self._next_port = EPHEMERAL_LO
        self._ip_id = 0
        self.now = 0.0

    # -- setup -----------------------------------------------------------------

    def add_neighbor(self, ip, mac: bytes) -> None:
        self.neighbors[ip_to_bytes(ip)] = mac

    def conn_open_passive(self, port: int, backlog: int = 128) -> Listener:
        if not 0 < port < 65536:
            raise ValueError(f"bad port {port}")
        if port in self.listeners:
            raise AddrInUse(f"port {port} already listening")
        lst = Listener(port, backlog)
        self.listeners[port] = lst
        return lst

    listen = conn_open_passive

    def close_listener(self, lst: Listener) -> None:
        if self.listeners.get(lst.port) is lst:
            del self.listeners[lst.port]
        lst.state = TcpState.CLOSED
        while lst.accept_queue:
            self.abort(lst.accept_queue.popleft(), errno.ECONNABORTED)

    def conn_open_active(self, remote_ip, remote_port: int, now: float,
                         local_port: int | None = None) -> TcpConn:
        rip = ip_to_bytes(remote_ip)
        mac = self.neighbors.get(rip)
        if mac is None:
            raise NoRoute(f"no route to {remote_ip}")
        if local_port is None:
            local_port = self._pick_port(rip, remote_port)
        elif (local_port, rip, remote_port) in self.conns:
            raise AddrInUse(f"4-tuple in use for port {local_port}")
        conn = self._new_conn(local_port, rip, remote_port, mac)
        conn.state = TcpState.SYN_SENT
        self._queue_ctl(conn, SYN)
        self.now = max(self.now, now)
        return conn

    connect = conn_open_active

    def _pick_port(self, rip: bytes, rport: int) -> int:
        for _ in range(65536 - EPHEMERAL_LO):
            port = self._next_port
            self._next_port = port + 1 if port < 65535 else EPHEMERAL_LO
            if (port, rip, rport) in self.conns or port in self.listeners:
                continue
            if rss_core(self.ip, port, rip, rport, self.ncores) == self.core:
                return port
        raise AddrInUse("ephemeral ports exhausted")

    def _new_conn(self, lport: int, rip: bytes, rport: int, rmac: bytes) -> TcpConn:
        iss = self.cfg.iss if self.cfg.iss is not None else self._rng.getrandbits(32)
        conn = TcpConn(self.cfg, self.ip, lport, rip, rport, rmac, iss)
        self.conns[conn.key] = conn
        self.stats["conns_opened"] += 1
        return conn

    def _queue_ctl(self, conn: TcpConn, ctl: int) -> PacketBlock:
        block = PacketBlock(seq=conn.snd_end, ctl=ctl)
        conn.window.push(block)
        conn.snd_end += 1
        if ctl & FIN:
            conn.fin_block = block
        self._dirty[conn] = None
        return block

    def accept(self, lst: Listener) -> TcpConn | None:
        return lst.accept_queue.popleft() if lst.accept_queue else None

    # -- send path -------------------------------------------------------------

    def tx_enqueue(self, conn: TcpConn, data) -> int:
        """Copy ``data`` once into packet blocks at the headroom offset.

        Returns how many bytes were accepted; raises WindowFull when none fit.
        """
        if conn.state not in SEND_STATES or conn.fin_block is not None or conn.fin_pending:
            raise ConnClosed(f"cannot send in state {conn.state.value}")
        mv = memoryview(data).cast("B")
        n = len(mv)
        if n == 0:
            return 0
        mss = conn.mss
        win = conn.window
        done = 0
        # top up a block that has never been transmitted
        last = win.last()
        if last is not None and last.transmissions == 0 and not last.ctl and last.len < mss:
            take = min(mss - last.len, n)
            end = last.payload_off + last.len
            last.buf[end:end + take] = mv[:take]
            last.len += take
            done = take
        while done < n and win.free_slots:
            take = min(mss, n - done)
            block = PacketBlock(seq=conn.snd_end + done)
            block.buf[HEADROOM:HEADROOM + take] = mv[done:done + take]
            block.len = take
            win.push(block)
            done += take
        if done == 0:
            conn.want_writable = True
            raise WindowFull("send window full")
        conn.snd_end += done
        self.stats["payload_bytes_written"] += done
        if done < n:
            conn.want_writable = True
        self._dirty[conn] = None
        return done

    def send_space(self, conn: TcpConn) -> int:
        """Bytes tx_enqueue would accept right now."""
        if conn.state not in SEND_STATES or conn.fin_block is not None or conn.fin_pending:
            return 0
        space = conn.window.free_slots * conn.mss
        last = conn.window.last()
        if last is not None and last.transmissions == 0 and not last.ctl:
            space += conn.mss - last.len
        return space

    def _adv_window(self, conn: TcpConn) -> int:
        wnd = max(self.cfg.rcv_buf - conn.pool.assembled_bytes, conn.rcv_adv - conn.rcv_nxt, 0)
        wnd = min(wnd, 0xFFFF)
        conn.rcv_adv = conn.rcv_nxt + wnd
        return wnd

    def _carry_ack(self, conn: TcpConn) -> None:
        if conn.delack_segs:
            conn.delack_segs = 0
            self.timers.cancel(conn, "delack")

    def _emit_block(self, conn: TcpConn, block: PacketBlock, now: float) -> bytes:
        flags = block.ctl
        if conn.state != TcpState.SYN_SENT:
            flags |= ACK
        if block.len:
            flags |= PSH
        wnd = self._adv_window(conn)
        if block.transmissions == 0:
            self._ip_id += 1
            block.data_offset = write_headers(
                block.buf, block.payload_off, block.len,
                src_mac=self.mac, dst_mac=conn.remote_mac, src_ip=self.ip, dst_ip=conn.remote_ip,
                sport=conn.local_port, dport=conn.remote_port, seq=block.seq & MASK,
                ack=conn.rcv_nxt & MASK, flags=flags, window=wnd, ip_id=self._ip_id,
                mss=self.cfg.mss if block.ctl & SYN else None)
        else:
            refresh_tcp_fields(block.buf, block.data_offset, ack=conn.rcv_nxt & MASK,
                               window=wnd, flags=flags)
        block.transmissions += 1
        block.sent_at = now
        self._carry_ack(conn)
        self.stats["frames_out"] += 1
        if block.len:
            self.stats["data_segments_out"] += 1
            self.stats["data_bytes_out"] += block.len
        return bytes(block.buf[block.data_offset:block.payload_off + block.len])

    def tx_emit(self, conn: TcpConn, now: float) -> list[bytes]:
        """Emit every block the congestion and receive windows allow."""
        frames = []
        if conn.state in (TcpState.CLOSED, TcpState.LISTEN):
            return frames
        if conn.fin_pending and conn.window.free_slots:
            conn.fin_pending = False
            self._queue_ctl(conn, FIN)
        win = conn.window
        while True:
            block = win.next_to_send()
            if block is None:
                break
            if block.len:
                if conn.state in (TcpState.SYN_SENT, TcpState.SYN_RCVD):
                    break
                if block.end - conn.snd_una > min(conn.cc.cwnd, conn.snd_wnd):
                    if (conn.snd_nxt == conn.snd_una and block.end - conn.snd_una > conn.snd_wnd
                            and self.timers.pending(conn, "persist") is None):
                        self._arm_persist(conn, now)
                    break
            retrans = block.end <= conn.snd_max
            frames.append(self._emit_block(conn, block, now))
            win.mark_sent()
            conn.snd_nxt = block.end
            if conn.snd_nxt > conn.snd_max:
                conn.snd_max = conn.snd_nxt
            if retrans:
                self.stats["retransmits"] += 1
            if self.timers.pending(conn, "rto") is None:
                self.timers.schedule(conn, "rto", now + conn.rtt.rto)
        return frames

    def retransmit(self, conn: TcpConn, seq: int, now: float) -> bytes:
        """Re-emit the stored block starting at wire sequence ``seq``."""
        block = conn.window.lookup(seq)
        if block is None:
            raise UnknownSeq(seq)
        self.stats["retransmits"] += 1
        return self._emit_block(conn, block, now)

    def _retransmit_head(self, conn: TcpConn, now: float) -> None:
        block = conn.window.lookup(conn.snd_una & MASK)
        if block is None:
            # snd_una sits inside a block after a partial ack
            block = conn.window.first()
            if block is None or block.transmissions == 0:
                return
        self.stats["retransmits"] += 1
        self._out.append(self._emit_block(conn, block, now))
        self.timers.schedule(conn, "rto", now + conn.rtt.rto)

    def _pure_frame(self, conn: TcpConn, flags: int, seq: int) -> bytes:
        wnd = self._adv_window(conn)
        buf = bytearray(HDR_LEN)
        self._ip_id += 1
        write_headers(buf, HDR_LEN, 0, src_mac=self.mac, dst_mac=conn.remote_mac,
                      src_ip=self.ip, dst_ip=conn.remote_ip, sport=conn.local_port,
                      dport=conn.remote_port, seq=seq & MASK, ack=conn.rcv_nxt & MASK,
                      flags=flags, window=wnd, ip_id=self._ip_id)
        self.stats["frames_out"] += 1
        return bytes(buf)

    def _send_ack(self, conn: TcpConn) -> None:
        self._carry_ack(conn)
        self.stats["acks_out"] += 1
        self._out.append(self._pure_frame(conn, ACK, conn.snd_nxt))

    def _send_rst_for(self, seg) -> None:
        if seg.flags & RST:
            return
        if seg.flags & ACK:
            seq, ack, flags = seg.ack, 0, RST
        else:
            seq, ack, flags = 0, (seg.seq + seg.seg_len) & MASK, RST | ACK
        buf = bytearray(HDR_LEN)
        self._ip_id += 1
        write_headers(buf, HDR_LEN, 0, src_mac=self.mac, dst_mac=seg.src_mac, src_ip=self.ip,
                      dst_ip=seg.src_ip, sport=seg.dport, dport=seg.sport, seq=seq, ack=ack,
                      flags=flags, window=0, ip_id=self._ip_id)
        self.stats["rst_out"] += 1
        self.stats["frames_out"] += 1
        self._out.append(bytes(buf))

    # -- ack processing --------------------------------------------------------

    def on_ack(self, conn: TcpConn, ack_no: int, window: int, now: float,
               seg_seq: int | None = None, pure: bool = True) -> bool:
        """Apply an acknowledgment (wire ``ack_no``); returns False if ignored."""
        ack = unwrap(ack_no, conn.snd_una)
        if ack < conn.snd_una or ack > conn.snd_max:
            self.stats["acks_ignored"] += 1
            return False
        if seg_seq is None or conn.snd_wl1 < seg_seq or (
                conn.snd_wl1 == seg_seq and conn.snd_wl2 <= ack):
            window_changed = window != conn.snd_wnd
            if window > conn.snd_wnd:
                self._dirty[conn] = None
            conn.snd_wnd = window
            if seg_seq is not None:
                conn.snd_wl1, conn.snd_wl2 = seg_seq, ack
        else:
            window_changed = False

        if ack > conn.snd_una:
            acked = ack - conn.snd_una
            released = conn.window.release_acked(ack)
            if released and all(b.transmissions == 1 for b in released):
                conn.rtt.sample(now - released[-1].sent_at)
            else:
                conn.rtt.recompute()
            conn.snd_una = ack
            if conn.snd_nxt < ack:
                conn.snd_nxt = ack
            conn.retries = 0
            conn.persist_backoff = 0
            partial = conn.cc.on_new_ack(acked, ack, conn.snd_max - ack)
            if partial:
                self._retransmit_head(conn, now)
            if conn.snd_una < conn.snd_max:
                self.timers.schedule(conn, "rto", now + conn.rtt.rto)
            else:
                self.timers.cancel(conn, "rto")
            self.timers.cancel(conn, "persist")
            if released:
                self._dirty[conn] = None
                if conn.want_writable and conn.state in SEND_STATES:
                    conn.want_writable = False
                    self.events.append((EV_WRITABLE, conn))
            return True

        if pure and not window_changed and conn.snd_max > conn.snd_una:
            self.stats["dup_acks"] += 1
            if conn.cc.on_dup_ack(conn.snd_max - conn.snd_una, conn.snd_max):
                self.stats["fast_retransmits"] += 1
                self._retransmit_head(conn, now)
            elif conn.cc.in_recovery:
                self._dirty[conn] = None
        return True

    # -- receive path ----------------------------------------------------------

    def rx_segment(self, frame: bytes, now: float) -> None:
        self.now = max(self.now, now)
        self.stats["frames_in"] += 1
        try:
            seg = parse_frame(frame)
        except MalformedFrame as e:
            key = "rx_bad_checksum" if "checksum" in str(e) else "rx_malformed"
            self.stats[key] += 1
            return
        if seg.dst_ip != self.ip:
            self.stats["rx_not_for_us"] += 1
            return
        self.neighbors.setdefault(seg.src_ip, seg.src_mac)
        conn = self.conns.get((seg.dport, seg.src_ip, seg.sport))
        if conn is None:
            self._rx_listen(seg)
        elif conn.state == TcpState.SYN_SENT:
            self._rx_syn_sent(conn, seg, now)
        else:
            self._rx_sync(conn, seg, now)

    def _rx_listen(self, seg) -> None:
        lst = self.listeners.get(seg.dport)
        if lst is None or seg.flags & (RST | ACK) or not seg.flags & SYN:
            self._send_rst_for(seg)
            return
        if len(lst.accept_queue) + lst.half_open >= lst.backlog:
            self.stats["syn_dropped"] += 1
            return
        conn = self._new_conn(seg.dport, seg.src_ip, seg.sport, seg.src_mac)
        conn.state = TcpState.SYN_RCVD
        conn.listener = lst
        lst.half_open += 1
        self._learn_peer(conn, seg)
        self._queue_ctl(conn, SYN)

    def _learn_peer(self, conn: TcpConn, seg) -> None:
        conn.irs = seg.seq
        conn.pool = RecvPool(seg.seq + 1)
        conn.rcv_adv = conn.rcv_nxt
        conn.mss = min(self.cfg.mss, seg.mss or 536)
        conn.cc.mss = conn.mss
        conn.snd_wnd = seg.window
        conn.snd_wl1 = seg.seq
        conn.snd_wl2 = conn.snd_una

    def _rx_syn_sent(self, conn: TcpConn, seg, now: float) -> None:
        ack_ok = False
        if seg.flags & ACK:
            ack = unwrap(seg.ack, conn.snd_una)
            ack_ok = conn.snd_una < ack <= conn.snd_max
            if not ack_ok:
                self._send_rst_for(seg)
                return
        if seg.flags & RST:
            if ack_ok:
                self.stats["rst_in"] += 1
                self._fail(conn, errno.ECONNREFUSED)
            return
        if not seg.flags & SYN or not ack_ok:
            return
        self._learn_peer(conn, seg)
        conn.state = TcpState.ESTABLISHED
        self.on_ack(conn, seg.ack, seg.window, now, pure=False)
        conn.snd_wl1 = conn.irs
        self.events.append((EV_CONNECTED, conn))
        self._send_ack(conn)

    def _rx_sync(self, conn: TcpConn, seg, now: float) -> None:
        flags = seg.flags
        seq = unwrap(seg.seq, conn.rcv_nxt)
        plen = seg.payload_len
        rcv_nxt = conn.rcv_nxt

        if flags & RST:
            if rcv_nxt <= seq < max(conn.rcv_adv, rcv_nxt + 1):
                self.stats["rst_in"] += 1
                self._fail(conn, errno.ECONNRESET if conn.state != TcpState.SYN_RCVD else errno.ECONNREFUSED)
            return
        if flags & SYN:
            if conn.state == TcpState.SYN_RCVD and seq == conn.irs:
                # our SYN-ACK was lost; resend it right away
                self._retransmit_head(conn, now)
            else:
                self._send_ack(conn)
            return
        if not flags & ACK:
            return

        if conn.state == TcpState.SYN_RCVD:
            ack = unwrap(seg.ack, conn.snd_una)
            if not conn.snd_una < ack <= conn.snd_max:
                self._send_rst_for(seg)
                return
            conn.state = TcpState.ESTABLISHED
            lst = conn.listener
            if lst is not None:
                lst.half_open -= 1
                if lst.state == TcpState.LISTEN:
                    lst.accept_queue.append(conn)
                    self.events.append((EV_ACCEPT, conn))

        ack_now = False
        if plen == 0 and seq < rcv_nxt:
            # window probe or stale segment
            ack_now = True
        self.on_ack(conn, seg.ack, seg.window, now, seg_seq=seq,
                    pure=plen == 0 and not flags & FIN)
        if conn.state == TcpState.CLOSED:
            return
        if conn.fin_block is not None and conn.snd_una >= conn.fin_block.end:
            if conn.state == TcpState.FIN_WAIT_1:
                conn.state = TcpState.FIN_WAIT_2
            elif conn.state == TcpState.CLOSING:
                self._enter_time_wait(conn, now)
            elif conn.state == TcpState.LAST_ACK:
                self._reclaim(conn)
                return

        if plen and conn.state in RECV_STATES and not conn.fin_received:
            pool = conn.pool
            had_holes = len(pool) > 0
            block = PacketBlock(seg.frame, seg.payload_off, plen, seq)
            block.data_offset = 0
            block.tcp_off = seg.tcp_off
            kept = pool.insert(block, limit=max(conn.rcv_adv, rcv_nxt))
            self.stats["rx_payload_bytes"] += kept
            if kept == 0:
                self.stats["rx_duplicates"] += 1
                ack_now = True
            elif seq != rcv_nxt:
                self.stats["rx_out_of_order"] += 1
                ack_now = True
            elif had_holes:
                ack_now = True
            else:
                conn.delack_segs += 1
                if conn.delack_segs >= self.cfg.delayed_ack_segments:
                    ack_now = True
                elif self.timers.pending(conn, "delack") is None:
                    self.timers.schedule(conn, "delack", now + self.cfg.delayed_ack_us)
            if conn.rcv_nxt > rcv_nxt and not conn.readable_signalled:
                conn.readable_signalled = True
                self.events.append((EV_READABLE, conn))
        elif plen:
            ack_now = True

        if flags & FIN and conn.fin_seq is None and conn.state in RECV_STATES:
            conn.fin_seq = seq + plen
        if (conn.fin_seq is not None and not conn.fin_received
                and conn.rcv_nxt == conn.fin_seq):
            conn.pool.rcv_nxt += 1
            conn.fin_received = True
            ack_now = True
            self.events.append((EV_EOF, conn))
            if conn.state == TcpState.ESTABLISHED:
                conn.state = TcpState.CLOSE_WAIT
            elif conn.state == TcpState.FIN_WAIT_1:
                conn.state = TcpState.CLOSING
            elif conn.state == TcpState.FIN_WAIT_2:
                self._enter_time_wait(conn, now)
        elif flags & FIN and conn.fin_received:
            ack_now = True

        if ack_now:
            self._send_ack(conn)

    def rx_read(self, conn: TcpConn, max_blocks: int = 1 << 30) -> list[PacketBlock]:
        """Hand in-order payload blocks to the caller (zero-copy views)."""
        blocks = conn.pool.read(max_blocks)
        if not blocks:
            conn.readable_signalled = False
            raise WouldBlock("no assembled data")
        if not conn.pool.assembled:
            conn.readable_signalled = False
        if conn.state in RECV_STATES or conn.state == TcpState.SYN_RCVD:
            offered = conn.rcv_adv - conn.rcv_nxt
            free = self.cfg.rcv_buf - conn.pool.assembled_bytes
            if free - offered >= min(2 * conn.mss, self.cfg.rcv_buf // 2):
                self._send_ack(conn)
        return blocks

    # -- close / teardown ------------------------------------------------------

    def close(self, conn: TcpConn, now: float) -> None:
        st = conn.state
        if st == TcpState.SYN_SENT:
            self._reclaim(conn)
            return
        if st in (TcpState.ESTABLISHED, TcpState.SYN_RCVD):
            conn.state = TcpState.FIN_WAIT_1
        elif st == TcpState.CLOSE_WAIT:
            conn.state = TcpState.LAST_ACK
        else:
            return
        if conn.window.free_slots:
            self._queue_ctl(conn, FIN)
        else:
            conn.fin_pending = True
            self._dirty[conn] = None

    def abort(self, conn: TcpConn, err: int = errno.ECONNABORTED) -> None:
        if conn.state not in (TcpState.CLOSED, TcpState.SYN_SENT, TcpState.TIME_WAIT):
            self.stats["rst_out"] += 1
            self._out.append(self._pure_frame(conn, RST | ACK, conn.snd_nxt))
        self.stats["aborts"] += 1
        self._fail(conn, err)

    def _fail(self, conn: TcpConn, err: int) -> None:
        conn.error = err
        if conn.listener is not None and conn.state == TcpState.SYN_RCVD:
            conn.listener.half_open -= 1
        self.events.append((EV_ERROR, conn))
        self._reclaim(conn)

    def _enter_time_wait(self, conn: TcpConn, now: float) -> None:
        conn.state = TcpState.TIME_WAIT
        self.timers.cancel(conn, "rto")
        self.timers.cancel(conn, "persist")
        self.timers.schedule(conn, "timewait", now + 2 * self.cfg.msl_us)

    def _reclaim(self, conn: TcpConn) -> None:
        if self.conns.get(conn.key) is conn:
            del self.conns[conn.key]
        self.timers.cancel_all(conn)
        self._dirty.pop(conn, None)
        conn.state = TcpState.CLOSED
        self.stats["conns_closed"] += 1
        self.events.append((EV_CLOSED, conn))

    # -- timers ----------------------------------------------------------------

    def _arm_persist(self, conn: TcpConn, now: float) -> None:
        delay = min(conn.rtt.rto * (1 << min(conn.persist_backoff, 16)), self.cfg.max_rto_us)
        self.timers.schedule(conn, "persist", now + delay)

    def timer_tick(self, now: float) -> None:
        self.now = max(self.now, now)
        for conn, kind, _ in self.timers.expire(now):
            if conn.state == TcpState.CLOSED:
                continue
            if kind == "rto":
                self._on_rto(conn, now)
            elif kind == "delack":
                if conn.delack_segs:
                    self._send_ack(conn)
            elif kind == "persist":
                if conn.snd_nxt == conn.snd_una and conn.window.next_to_send() is not None:
                    self.stats["probes_out"] += 1
                    self._out.append(self._pure_frame(conn, ACK, conn.snd_una - 1))
                    conn.persist_backoff += 1
                    self._arm_persist(conn, now)
            elif kind == "timewait":
                self._reclaim(conn)

    def _on_rto(self, conn: TcpConn, now: float) -> None:
        if conn.snd_una >= conn.snd_max:
            return
        conn.retries += 1
        if conn.retries > self.cfg.max_retries:
            self.abort(conn, errno.ETIMEDOUT)
            return
        self.stats["timeouts"] += 1
        conn.cc.on_timeout(conn.snd_max - conn.snd_una, conn.snd_max)
        conn.rtt.backoff()
        conn.window.rewind()
        conn.snd_nxt = conn.snd_una
        self._dirty[conn] = None

    # -- driver interface ------------------------------------------------------

    def poll(self, now: float) -> list[bytes]:
        """Run due timers and collect every frame ready for the wire."""
        self.timer_tick(now)
        while self._dirty:
            conn = next(iter(self._dirty))
            del self._dirty[conn]
            if conn.state != TcpState.CLOSED:
                self._out.extend(self.tx_emit(conn, now))
        out, self._out = self._out, []
        return out

    def has_output(self) -> bool:
        return bool(self._out or self._dirty)

    def next_deadline(self) -> float | None:
        return self.timers.next_deadline()
