"""Deterministic driver for the whole offload pipeline.

A testbed owns one simulated clock, one DMA engine shared by every core,
the dedicated DMA polling task, per-core NIC tasks (bridge plus TCP stack),
one host thread per core talking through its own ring set, and a client TCP
stack on the far side of a simulated link. Everything runs cooperatively in
a single event loop; time only moves when no task can make progress at the
current instant.

NIC and host tasks charge simulated CPU time from :class:`CostModel`; the
client is a free load generator.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from .bridge import Bridge, BridgeConfig, FdAllocator
from .errors import PnoError
from .netsim import Link, LinkConfig
from .proxy import LocalSources, Proxy, ProxyConfig
from .rings import HostRings, NicRings, RingConfig, RingLayout
from .simdma import HOST, DmaConfig, DmaEngine, DmaPoller, SimClock
from .tcp import TcpConfig, TcpStack
from .tcp.stack import rss_core
from .wire import ETH_LEN, IP_LEN

CLIENT_IP, CLIENT_MAC = "10.0.0.1", b"\x02\x00\x00\x00\x00\x0a"
SERVER_IP, SERVER_MAC = "10.0.0.2", b"\x02\x00\x00\x00\x00\x0b"


class SimulationFault(PnoError):
    """The event loop stopped making progress or a task broke an invariant."""


@dataclass
class CostModel:
    """Simulated CPU time per unit of work, in microseconds."""
    nic_cycle_us: float = 0.1
    block_us: float = 0.15
    packet_us: float = 0.6
    dma_submit_us: float = 0.05
    host_call_us: float = 0.1

    def __post_init__(self) -> None:
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"cost.{k} must be >= 0")
        if self.nic_cycle_us <= 0:
            raise ValueError("cost.nic_cycle_us must be > 0")


def _testbed_rings() -> RingConfig:
    return RingConfig(s_ring_bytes=256 << 10, data_ring_bytes=1 << 20, event_ring_bytes=64 << 10,
                      info_slots=1024, scan_window=16 << 10)


@dataclass
class SimConfig:
    cores: int = 1
    dma: DmaConfig = field(default_factory=DmaConfig)
    link: LinkConfig = field(default_factory=LinkConfig)
    tcp: TcpConfig = field(default_factory=TcpConfig)
    rings: RingConfig = field(default_factory=_testbed_rings)
    bridge: BridgeConfig = field(default_factory=BridgeConfig)
    proxy: ProxyConfig = field(default_factory=ProxyConfig)
    cost: CostModel = field(default_factory=CostModel)

    def __post_init__(self) -> None:
        if self.cores < 1:
            raise ValueError("cores must be >= 1")


class NicCore:
    """Bridge and TCP stack sharing one NIC core, run as one cooperative pair."""

    def __init__(self, tb: "Testbed", idx: int, layout: RingLayout, fds: FdAllocator):
        cfg = tb.cfg
        self.tb = tb
        self.idx = idx
        tcp = TcpConfig(**{**vars(cfg.tcp), "seed": cfg.tcp.seed * 31 + idx})
        self.stack = TcpStack(SERVER_IP, SERVER_MAC, tcp, core=idx, ncores=cfg.cores)
        self.stack.add_neighbor(CLIENT_IP, CLIENT_MAC)
        self.port = tb.poller.register(("nic", idx))
        self.rings = NicRings(layout, tb.nic_mem, self.port, batch=cfg.bridge.batch, guard=cfg.bridge.guard)
        self.bridge = Bridge(self.stack, self.rings, fds, cfg.bridge, own_poller=False)
        self.inbound: deque[bytes] = deque()
        self.free_at = 0.0
        self.busy_us = 0.0
        self.cycles = 0

    def has_work(self, now: float) -> bool:
        if self.inbound or self.port.pending or self.bridge.busy or not self.rings._sync_inflight:
            return True
        due = self.wake_time()
        return due is not None and due <= now

    def wake_time(self) -> float | None:
        times = [t for t in (self.stack.next_deadline(), self.bridge.next_deadline()) if t is not None]
        return min(times) if times else None

    def run(self, now: float) -> None:
        stack = self.stack
        n_in = len(self.inbound)
        while self.inbound:
            stack.rx_segment(self.inbound.popleft(), now)
        polls0 = self.rings.stats["sync_submits"]
        report = self.bridge.bridge_poll_once(now)
        polls = self.rings.stats["sync_submits"] - polls0
        out = stack.poll(now)
        for f in out:
            self.tb.to_client.link_send(f, now)
        c = self.tb.cfg.cost
        cost = (c.nic_cycle_us + c.block_us * report["dispatched"]
                + c.packet_us * (n_in + len(out)) + c.dma_submit_us * (report["dma_txns"] + polls))
        self.free_at = now + cost
        self.busy_us += cost
        self.cycles += 1


HostApp = Callable[[Proxy, float], "float | None"]


class HostThread:
    """One host application thread bound to one core's rings.

    ``app(proxy, now)`` runs one step and returns when it next wants to run:
    a time, or None to sleep until the next DMA landing in host memory.
    """

    def __init__(self, tb: "Testbed", idx: int, layout: RingLayout, app: HostApp | None):
        self.tb = tb
        self.idx = idx
        self.rings = HostRings(layout, tb.host_mem)
        self.local = LocalSources(lambda: tb.clock.now)
        self.proxy = Proxy(self.rings, self.local, tb.cfg.proxy, waiter=self._wait)
        self.app = app
        self.free_at = 0.0
        self.wake_at: float | None = 0.0
        self.seen = -1
        self.busy_us = 0.0
        self.steps = 0

    def _wait(self, pred: Callable[[], bool], budget_us: float) -> bool:
        return self.tb.run_until(pred, self.tb.clock.now + budget_us, blocked=self)

    def wants(self, now: float) -> bool:
        if self.app is None or self.free_at > now:
            return False
        if self.seen != self.tb.host_landings:
            return True
        return self.wake_at is not None and self.wake_at <= now

    def next_time(self, now: float) -> float | None:
        if self.app is None:
            return None
        if self.seen != self.tb.host_landings:
            return max(self.free_at, now)
        if self.wake_at is None:
            return None
        return max(self.free_at, self.wake_at)

    def run(self, now: float) -> None:
        self.seen = self.tb.host_landings
        c0 = self.proxy.cost_us
        self.wake_at = self.app(self.proxy, now)
        cost = self.proxy.cost_us - c0
        self.busy_us += cost
        self.free_at = self.tb.clock.now + cost
        self.steps += 1


ClientApp = Callable[[TcpStack, float], "float | None"]


class Testbed:
    def __init__(self, cfg: SimConfig | None = None, host_apps: list[HostApp | None] | None = None,
                 client_app: ClientApp | None = None, record: bool = False):
        self.cfg = cfg = cfg or SimConfig()
        layouts = []
        base = 0
        for _ in range(cfg.cores):
            lay = RingLayout(cfg.rings, base)
            layouts.append(lay)
            base = lay.end
        self.layouts = layouts
        self.host_mem = bytearray(base)
        self.nic_mem = bytearray(base)
        self.clock = SimClock()
        self.engine = DmaEngine(self.clock, self.host_mem, self.nic_mem, cfg.dma)
        self.poller = DmaPoller(self.engine)
        self.host_landings = 0
        self.engine.add_landing_hook(self._landed)
        self.fds = FdAllocator()
        self.cores = [NicCore(self, i, layouts[i], self.fds) for i in range(cfg.cores)]
        apps = list(host_apps or [])
        apps += [None] * (cfg.cores - len(apps))
        self.threads = [HostThread(self, i, layouts[i], apps[i]) for i in range(cfg.cores)]
        self.client = TcpStack(CLIENT_IP, CLIENT_MAC, TcpConfig(**{**vars(cfg.tcp), "seed": cfg.tcp.seed + 7}))
        self.client.add_neighbor(SERVER_IP, SERVER_MAC)
        self.client_app = client_app
        self.client_wake: float | None = 0.0 if client_app is not None else None
        lc = cfg.link
        self.to_server = Link(lc, record=record)
        self.to_client = Link(LinkConfig(**{**vars(lc), "seed": lc.seed + 1}), record=record)
        self._blocked: set[HostThread] = set()
        self.iterations = 0

    def _landed(self, desc, token) -> None:
        if desc.dst_domain == HOST:
            self.host_landings += 1

    def _steer(self, frame: bytes) -> int:
        n = len(self.cores)
        if n == 1:
            return 0
        off = ETH_LEN + IP_LEN
        src = frame[ETH_LEN + 12:ETH_LEN + 16]
        dst = frame[ETH_LEN + 16:ETH_LEN + 20]
        sport = int.from_bytes(frame[off:off + 2], "big")
        dport = int.from_bytes(frame[off + 2:off + 4], "big")
        return rss_core(src, sport, dst, dport, n)

    # -- event loop -----------------------------------------------------------------

    def _iterate(self) -> bool:
        clock = self.clock
        ran = False
        self.poller.poll_once()
        now = clock.now
        for f in self.to_server.link_poll(now):
            self.cores[self._steer(f)].inbound.append(f)
        for f in self.to_client.link_poll(now):
            self.client.rx_segment(f, now)
        for core in self.cores:
            now = clock.now
            if core.free_at <= now and core.has_work(now):
                core.run(now)
                ran = True
        for th in self.threads:
            now = clock.now
            if th not in self._blocked and th.wants(now):
                self._blocked.add(th)
                try:
                    th.run(now)
                finally:
                    self._blocked.discard(th)
                ran = True
        now = clock.now
        client = self.client
        if self.client_app is not None and (client.events or (self.client_wake is not None
                                                               and self.client_wake <= now)):
            self.client_wake = self.client_app(client, now)
            ran = True
        if client.has_output() or (client.next_deadline() or float("inf")) <= now:
            for f in client.poll(now):
                self.to_server.link_send(f, now)
            ran = True
        self.iterations += 1
        return ran

    def _next_time(self) -> float | None:
        now = self.clock.now
        cands = [self.engine.next_event_time(), self.to_server.next_event_time(),
                 self.to_client.next_event_time(), self.client.next_deadline(), self.client_wake]
        if self.engine._done:
            cands.append(now)
        if self.client.has_output() or (self.client_app is not None and self.client.events):
            cands.append(now)
        for core in self.cores:
            if core.has_work(max(now, core.free_at)):
                cands.append(max(now, core.free_at))
            else:
                w = core.wake_time()
                if w is not None:
                    cands.append(max(w, core.free_at))
        for th in self.threads:
            if th not in self._blocked:
                cands.append(th.next_time(now))
        cands = [t for t in cands if t is not None]
        return max(min(cands), now) if cands else None

    def run_until(self, pred: Callable[[], bool], deadline_us: float,
                  blocked: HostThread | None = None, max_idle: int = 1000) -> bool:
        """Run tasks until ``pred()`` holds; False once simulated time would pass the deadline."""
        clock = self.clock
        if blocked is not None:
            self._blocked.add(blocked)
        idle = 0
        try:
            while not pred():
                ran = self._iterate()
                if pred():
                    return True
                t = self._next_time()
                if t is None or t > deadline_us:
                    if deadline_us > clock.now:
                        clock.advance_to(deadline_us)  # the wait spins out its budget
                    return pred()
                if t > clock.now:
                    clock.advance_to(t)
                    idle = 0
                elif not ran:
                    idle += 1
                    if idle > max_idle:
                        raise SimulationFault(f"no progress at t={clock.now:.3f} us")
            return True
        finally:
            if blocked is not None:
                self._blocked.discard(blocked)

    def run_for(self, dt_us: float) -> None:
        end = self.clock.now + dt_us
        self.run_until(lambda: self.clock.now >= end, end)
        if self.clock.now < end:
            self.clock.advance_to(end)

    # -- reporting ------------------------------------------------------------------

    def counters(self) -> dict[str, int | float]:
        out: dict[str, int | float] = {}
        for core in self.cores:
            p = f"core{core.idx}."
            out.update({p + "bridge." + k: v for k, v in core.bridge.stats.items()})
            out.update({p + "rings." + k: v for k, v in core.rings.stats.items()})
            out.update({p + "tcp." + k: v for k, v in core.stack.stats.items()})
            out[p + "nic.cycles"] = core.cycles
            out[p + "nic.busy_us"] = round(core.busy_us, 3)
        for th in self.threads:
            p = f"thread{th.idx}."
            out.update({p + "proxy." + k: v for k, v in th.proxy.stats.items()})
            out[p + "host.busy_us"] = round(th.busy_us, 3)
        out.update({"dma." + k: v for k, v in self.engine.stats.items()})
        for name, link in (("link.to_server.", self.to_server), ("link.to_client.", self.to_client)):
            out.update({name + k: v for k, v in link.stats.items()})
        return out

    def frames(self) -> list[tuple[float, bytes]]:
        return sorted(self.to_server.trace + self.to_client.trace, key=lambda r: r[0])
