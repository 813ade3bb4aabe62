"""Two TCP stacks joined by a pair of simulated links, driven by next-event time."""

from __future__ import annotations

from typing import Callable

from .errors import WindowFull, WouldBlock
from .netsim import Link, LinkConfig
from .tcp import TcpConfig, TcpStack, TcpState

IP_A, MAC_A = "10.0.0.1", b"\x02\x00\x00\x00\x00\x0a"
IP_B, MAC_B = "10.0.0.2", b"\x02\x00\x00\x00\x00\x0b"


class StackPair:
    def __init__(self, link: LinkConfig | None = None, tcp: TcpConfig | None = None,
                 reverse_link: LinkConfig | None = None, record: bool = False,
                 tcp_b: TcpConfig | None = None):
        self.a = TcpStack(IP_A, MAC_A, tcp)
        self.b = TcpStack(IP_B, MAC_B, tcp_b or tcp)
        self.a.add_neighbor(IP_B, MAC_B)
        self.b.add_neighbor(IP_A, MAC_A)
        self.ab = Link(link, record=record)
        self.ba = Link(reverse_link or link, record=record)
        self.now = 0.0
        self.steps = 0

    def step(self) -> None:
        now = self.now
        for f in self.ab.link_poll(now):
            self.b.rx_segment(f, now)
        for f in self.ba.link_poll(now):
            self.a.rx_segment(f, now)
        for f in self.a.poll(now):
            self.ab.link_send(f, now)
        for f in self.b.poll(now):
            self.ba.link_send(f, now)
        self.steps += 1

    def next_time(self) -> float | None:
        if self.a.has_output() or self.b.has_output():
            return self.now
        times = [t for t in (self.ab.next_event_time(), self.ba.next_event_time(),
                             self.a.next_deadline(), self.b.next_deadline()) if t is not None]
        return max(min(times), self.now) if times else None

    def run(self, until: Callable[[], bool], app: Callable[[], None] | None = None,
            max_time_us: float = 600e6, max_steps: int = 50_000_000) -> bool:
        """Step until ``until()`` holds; ``app`` runs after every step."""
        while not until():
            self.step()
            if app is not None:
                app()
            if until():
                return True
            t = self.next_time()
            if t is None or t > max_time_us or self.steps > max_steps:
                return False
            self.now = t
        return True

    def record(self):
        """Every frame sent in either direction, ordered by send time."""
        return sorted(self.ab.trace + self.ba.trace, key=lambda r: r[0])


def transfer(data: bytes, link: LinkConfig | None = None, tcp: TcpConfig | None = None,
             reverse_link: LinkConfig | None = None, port: int = 5001,
             chunk: int = 1 << 16, max_time_us: float = 600e6) -> tuple[bytes, StackPair]:
    """Send ``data`` from stack A to stack B, closing afterwards; return what B read."""
    pair = StackPair(link, tcp, reverse_link)
    lst = pair.b.conn_open_passive(port)
    client = pair.a.conn_open_active(IP_B, port, 0.0)
    got = bytearray()
    state = {"sent": 0, "server": None, "closed": False}

    def app() -> None:
        if client.state in (TcpState.ESTABLISHED, TcpState.CLOSE_WAIT) and not state["closed"]:
            while state["sent"] < len(data):
                piece = memoryview(data)[state["sent"]:state["sent"] + chunk]
                try:
                    state["sent"] += pair.a.tx_enqueue(client, piece)
                except WindowFull:
                    break
            if state["sent"] == len(data):
                pair.a.close(client, pair.now)
                state["closed"] = True
        srv = state["server"]
        if srv is None:
            srv = state["server"] = pair.b.accept(lst)
        if srv is not None:
            while True:
                try:
                    blocks = pair.b.rx_read(srv)
                except WouldBlock:
                    break
                for blk in blocks:
                    got.extend(blk.payload)
            if srv.at_eof and srv.state == TcpState.CLOSE_WAIT:
                pair.b.close(srv, pair.now)

    def done() -> bool:
        srv = state["server"]
        return srv is not None and srv.at_eof and len(got) >= len(data)

    pair.run(done, app, max_time_us=max_time_us)
    return bytes(got), pair
