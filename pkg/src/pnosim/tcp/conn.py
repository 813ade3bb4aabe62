"""Connection state and tunables."""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass

from ..wire import HDR_LEN, MSS_OPT_LEN
from .block import BLOCK_CAPACITY, HEADROOM
from .congestion import NewReno, RtoEstimator
from .recvpool import RecvPool
from .window import SendWindow


class TcpState(enum.Enum):
    CLOSED = "CLOSED"
    LISTEN = "LISTEN"
    SYN_SENT = "SYN_SENT"
    SYN_RCVD = "SYN_RCVD"
    ESTABLISHED = "ESTABLISHED"
    FIN_WAIT_1 = "FIN_WAIT_1"
    FIN_WAIT_2 = "FIN_WAIT_2"
    CLOSE_WAIT = "CLOSE_WAIT"
    CLOSING = "CLOSING"
    LAST_ACK = "LAST_ACK"
    TIME_WAIT = "TIME_WAIT"


# states in which the peer may still send us payload
RECV_STATES = (TcpState.ESTABLISHED, TcpState.FIN_WAIT_1, TcpState.FIN_WAIT_2)
# states in which the application may still queue payload
SEND_STATES = (TcpState.ESTABLISHED, TcpState.CLOSE_WAIT)


@dataclass
class TcpConfig:
    mss: int = 1460
    mtu: int = 1500
    rcv_buf: int = 65535
    send_slots: int = 64
    initial_cwnd_segments: int = 10
    initial_rto_us: float = 10_000.0
    # must exceed the delayed-ACK timeout or a 1-MSS window stalls into a timeout
    min_rto_us: float = 10_000.0
    max_rto_us: float = 1_000_000.0
    timer_granularity_us: float = 10.0
    delayed_ack_us: float = 5000.0
    delayed_ack_segments: int = 2
    msl_us: float = 10_000.0
    max_retries: int = 30
    iss: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mss < 1 or self.mss + 40 > self.mtu:
            raise ValueError(f"tcp.mss {self.mss} does not fit mtu {self.mtu}")
        if HEADROOM + self.mss > BLOCK_CAPACITY or HDR_LEN + MSS_OPT_LEN > HEADROOM:
            raise ValueError("tcp.mss exceeds packet block capacity")
        if not 1 <= self.rcv_buf <= 0xFFFF:
            raise ValueError("tcp.rcv_buf must be in [1, 65535] (no window scaling)")
        if self.send_slots < 2:
            raise ValueError("tcp.send_slots must be >= 2")
        if not 0 < self.min_rto_us <= self.max_rto_us:
            raise ValueError("tcp rto bounds invalid")
        if self.delayed_ack_segments < 1:
            raise ValueError("tcp.delayed_ack_segments must be >= 1")


class Listener:
    def __init__(self, port: int, backlog: int):
        self.port = port
        self.backlog = max(1, backlog)
        self.accept_queue: deque[TcpConn] = deque()
        self.half_open = 0
        self.state = TcpState.LISTEN
        self.user = None

    def __repr__(self) -> str:
        return f"Listener(port={self.port}, queued={len(self.accept_queue)})"


class TcpConn:
    """One TCP endpoint. Sequence numbers are kept unwrapped (absolute)."""

    def __init__(self, cfg: TcpConfig, local_ip: bytes, local_port: int,
                 remote_ip: bytes, remote_port: int, remote_mac: bytes, iss: int):
        self.cfg = cfg
        self.local_ip = local_ip
        self.local_port = local_port
        self.remote_ip = remote_ip
        self.remote_port = remote_port
        self.remote_mac = remote_mac
        self.state = TcpState.CLOSED

        self.iss = iss
        self.snd_una = iss
        self.snd_nxt = iss
        self.snd_max = iss
        self.snd_end = iss          # next sequence number to hand out
        self.snd_wnd = cfg.mss
        self.snd_wl1 = 0
        self.snd_wl2 = 0
        self.window = SendWindow(cfg.send_slots)

        self.irs = 0
        self.pool = RecvPool(0)
        self.rcv_adv = 0            # right edge of the advertised window
        self.fin_seq: int | None = None
        self.fin_received = False
        self.fin_block = None
        self.fin_pending = False

        self.mss = cfg.mss
        self.cc = NewReno(cfg.mss, cfg.initial_cwnd_segments)
        self.rtt = RtoEstimator(cfg.initial_rto_us, cfg.min_rto_us, cfg.max_rto_us,
                                cfg.timer_granularity_us)
        self.retries = 0
        self.persist_backoff = 0
        self.delack_segs = 0
        self.listener: Listener | None = None
        self.error = 0
        self.readable_signalled = False
        self.want_writable = False
        self.user = None

    @property
    def key(self) -> tuple:
        return (self.local_port, self.remote_ip, self.remote_port)

    @property
    def rcv_nxt(self) -> int:
        return self.pool.rcv_nxt

    @property
    def rwnd(self) -> int:
        return self.snd_wnd

    @property
    def cwnd(self) -> int:
        return self.cc.cwnd

    @property
    def ssthresh(self) -> int:
        return self.cc.ssthresh

    @property
    def dup_ack_count(self) -> int:
        return self.cc.dup_acks

    @property
    def srtt(self) -> float | None:
        return self.rtt.srtt

    @property
    def rttvar(self) -> float:
        return self.rtt.rttvar

    @property
    def rto(self) -> float:
        return self.rtt.rto

    @property
    def flight(self) -> int:
        return self.snd_nxt - self.snd_una

    @property
    def readable_bytes(self) -> int:
        return self.pool.assembled_bytes

    @property
    def at_eof(self) -> bool:
        return self.fin_received and not self.pool.assembled

    def __repr__(self) -> str:
        return (f"TcpConn({self.local_port}->{self.remote_port} {self.state.value} "
                f"una={self.snd_una} nxt={self.snd_nxt} rcv={self.rcv_nxt})")
