"""Randomized local + offloaded readiness interleavings against the proxy's epoll.

A real bridge feeds the G-rings from a scripted receive source, so readiness
reaches the host through the same DMA path as in a full run. The model keeps
a delivery ledger: every readiness episode on a registered fd must be
reported exactly once, and nothing may be reported without one.
"""

from __future__ import annotations

import random
from types import SimpleNamespace

from hazard import FeedStack, _Conn
from pnosim.bridge import EPOLL_CTL_ADD, EPOLL_CTL_DEL, EPOLLIN, Bridge, BridgeConfig, Sock
from pnosim.errors import WouldBlock
from pnosim.proxy import LocalSources, Proxy, route_fd
from pnosim.rings import HostRings, NicRings, RingConfig, RingLayout
from pnosim.simdma import DmaConfig, DmaEngine, DmaPoller, SimClock
from pnosim.tcp.stack import EV_READABLE


class EpollRig:
    def __init__(self, seed: int = 0, ordering: str = "unordered"):
        cfg = RingConfig(s_ring_bytes=4096, data_ring_bytes=8192, event_ring_bytes=1024,
                         info_slots=32, scan_window=4096)
        self.layout = RingLayout(cfg)
        self.host_mem = bytearray(self.layout.end)
        self.nic_mem = bytearray(self.layout.end)
        self.clock = SimClock()
        self.engine = DmaEngine(self.clock, self.host_mem, self.nic_mem,
                                DmaConfig(completion_ordering=ordering, rng_seed=seed))
        port = DmaPoller(self.engine).register("nic")
        self.nic = NicRings(self.layout, self.nic_mem, port)
        self.stack = FeedStack()
        self.bridge = Bridge(self.stack, self.nic, config=BridgeConfig())
        self.host = HostRings(self.layout, self.host_mem)
        self.local = LocalSources(lambda: self.clock.now)
        self.proxy = Proxy(self.host, self.local, waiter=self.wait)
        self.conns = {}

    def step(self) -> None:
        self.bridge.bridge_poll_once(self.clock.now)
        t = self.engine.next_event_time()
        self.clock.advance_to(t if t is not None else self.clock.now + 1.0)

    def wait(self, pred, budget_us: float) -> bool:
        end = self.clock.now + budget_us
        while not pred():
            if self.clock.now > end:
                return False
            self.step()
        return True

    def settle(self, cycles: int = 12) -> None:
        for _ in range(cycles):
            self.step()

    def add_conn(self, fd: int) -> None:
        c = _Conn()
        self.bridge.sockets[fd] = Sock(fd, "conn", c)
        self.bridge.conn_fd[c] = fd
        self.nic.slot_open(fd, host_known=True)
        self.proxy.fds.add(fd, "conn").nonblocking = True
        self.host.track(fd)
        self.conns[fd] = c

    def arrive(self, fd: int, payload: bytes) -> None:
        c = self.conns[fd]
        c.pool.assembled.append(SimpleNamespace(payload=payload, len=len(payload)))
        self.stack.events.append((EV_READABLE, c))


def run_interleaving(seed: int) -> list[str]:
    rng = random.Random(seed)
    rig = EpollRig(seed, rng.choice(("ordered", "unordered")))
    p = rig.proxy
    bad: list[str] = []
    offl = [1000 + i for i in range(rng.randint(1, 4))]
    for fd in offl:
        rig.add_conn(fd)
    pipes = [rig.local.pipe() for _ in range(rng.randint(0, 2))]
    timers = [rig.local.timer() for _ in range(rng.randint(0, 2))]
    local = pipes + timers
    epfd = p.p_epoll_create()
    registered = set()
    pending = dict.fromkeys(offl + local, 0)     # unconsumed bytes (timers: 1 when armed)
    shadow = {fd: bytearray() for fd in offl + pipes}
    open_ep: dict[int, int] = {}                 # fd -> id of its undelivered episode
    delivered: dict[int, int] = {}
    next_ep = 0

    def open_episode(fd):
        nonlocal next_ep
        if fd in registered and fd not in open_ep and pending[fd]:
            open_ep[fd] = next_ep
            delivered[next_ep] = 0
            next_ep += 1

    for fd in offl + local:
        p.p_epoll_ctl(epfd, EPOLL_CTL_ADD, fd, EPOLLIN)
        registered.add(fd)

    def consume(fd):
        if fd in timers:
            try:
                p.p_read(fd, 8)
            except WouldBlock:
                pass
            pending[fd] = 0
            return
        got = bytearray()
        while True:
            try:
                got += p.p_read(fd, rng.randint(1, 512))
            except WouldBlock:
                break
        if bytes(got) != bytes(shadow[fd][:len(got)]):
            bad.append(f"fd {fd}: read bytes out of order or corrupted")
        del shadow[fd][:len(got)]
        pending[fd] = len(shadow[fd])
        open_episode(fd)  # bytes still in flight owe a later report

    def do_wait():
        for fd, ev in p.p_epoll_wait(epfd, 64, 0):
            if route_fd(fd) == "offloaded" and fd not in offl or fd not in pending:
                bad.append(f"unknown fd {fd} reported")
                continue
            if fd not in registered:
                bad.append(f"fd {fd} reported after EPOLL_CTL_DEL")
            ep = open_ep.pop(fd, None)
            if ep is None:
                bad.append(f"fd {fd} reported with no pending readiness")
            else:
                delivered[ep] += 1
            consume(fd)

    for _ in range(rng.randint(5, 30)):
        op = rng.random()
        if op < 0.3 and offl:
            fd = rng.choice(offl)
            data = rng.randbytes(rng.randint(1, 200))
            rig.arrive(fd, data)
            shadow[fd] += data
            pending[fd] += len(data)
            open_episode(fd)
        elif op < 0.4 and pipes:
            fd = rng.choice(pipes)
            data = rng.randbytes(rng.randint(1, 50))
            rig.local.write(fd, data)
            shadow[fd] += data
            pending[fd] += len(data)
            open_episode(fd)
        elif op < 0.45 and timers:
            fd = rng.choice(timers)
            rig.local.arm(fd, rig.clock.now)
            pending[fd] = 1
            open_episode(fd)
        elif op < 0.55:
            rig.settle(rng.randint(1, 10))
        elif op < 0.8:
            do_wait()
        elif op < 0.9:
            fd = rng.choice(offl + local)
            if fd in registered:
                p.p_epoll_ctl(epfd, EPOLL_CTL_DEL, fd)
                registered.discard(fd)
                ep = open_ep.pop(fd, None)
                if ep is not None:
                    del delivered[ep]   # a deregistered fd owes no delivery
            else:
                p.p_epoll_ctl(epfd, EPOLL_CTL_ADD, fd, EPOLLIN)
                registered.add(fd)
                open_episode(fd)
        else:
            rig.settle(1)
    # quiesce: everything still pending on a registered fd must come out once
    for _ in range(6):
        rig.settle()
        do_wait()
    rig.settle()
    if p.p_epoll_wait(epfd, 64, 0):
        bad.append("readiness reported after every condition was consumed")
    for ep, n in delivered.items():
        if n != 1:
            bad.append(f"episode {ep} delivered {n} times")
    return bad
