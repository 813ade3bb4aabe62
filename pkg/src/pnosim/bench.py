"""Benchmark workloads and their reports.

``run_echo`` drives ping-pong clients through the simulated link against an
echo server written on the p_* API; ``run_stream`` has the host push a bulk
byte stream down every connection with p_sendfile. ``run_dma_micro`` sweeps
queue depth and request size over the DMA engine alone. Reports serialize to stable text or
JSON lines and parse back to the same values.
"""

from __future__ import annotations

import dataclasses
import heapq
import json
import math
import random
import statistics
from dataclasses import dataclass, field
from typing import IO

from .bridge import EPOLL_CTL_ADD, EPOLL_CTL_DEL, EPOLL_CTL_MOD, EPOLLIN, EPOLLOUT
from .errors import SocketError, WindowFull, WouldBlock
from .proxy import Proxy
from .simdma import HOST, DmaDescriptor, DmaEngine, SimClock
from .tcp.stack import EV_CONNECTED, EV_EOF, EV_ERROR, EV_READABLE
from .testbed import SERVER_IP, SimConfig, SimulationFault, Testbed

WORKLOADS = ("echo", "stream", "dma_micro")
MODES = ("batched", "sync")
REPORT_HEADER = "# pno-sim report v1"


@dataclass
class WorkloadConfig:
    workload: str = "echo"
    connections: int = 120
    msg_size: int = 64
    cores: int = 1
    messages: int = 2000          # measured round trips (stream: msg_size chunks per connection)
    warmup: int = 240             # round trips completed before measuring starts
    mode: str = "batched"
    port: int = 7
    think_us: float = 0.0         # mean of the exponential pause before each next request
    max_time_us: float = 5e6
    qd: tuple[int, ...] = (1, 2, 4, 8, 10, 16)
    sizes: tuple[int, ...] = (64, 512, 4096)
    iterations: int = 1000        # transactions per dma_micro cell
    seed: int | None = None
    report_path: str | None = None
    format: str = "text"

    def __post_init__(self) -> None:
        if self.workload not in WORKLOADS:
            raise ValueError(f"workload must be one of {WORKLOADS}, got {self.workload!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("connections", "msg_size", "cores", "messages", "iterations"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        if self.think_us < 0:
            raise ValueError("think_us must be >= 0")
        self.qd = tuple(int(q) for q in self.qd)
        self.sizes = tuple(int(s) for s in self.sizes)
        if not self.qd or min(self.qd) < 1 or not self.sizes or min(self.sizes) < 1:
            raise ValueError("qd and sizes must be non-empty lists of positive integers")
        if self.format not in ("text", "json-lines"):
            raise ValueError("format must be text or json-lines")


@dataclass
class MetricsReport:
    workload: str = ""
    config: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)

    def __post_init__(self) -> None:
        m = self.metrics
        if {"latency_p50_us", "latency_p99_us", "latency_max_us"} <= m.keys():
            if not m["latency_p50_us"] <= m["latency_p99_us"] <= m["latency_max_us"]:
                raise ValueError("latency percentiles out of order")
        for k in ("msgs_per_sec", "bytes_per_sec"):
            if m.get(k, 0) < 0:
                raise ValueError(f"{k} must be >= 0")


def percentile(sorted_vals: list[float], q: float) -> float:
    """Nearest-rank percentile of an ascending list."""
    if not sorted_vals:
        return 0.0
    k = max(1, math.ceil(q / 100.0 * len(sorted_vals)))
    return sorted_vals[k - 1]


def latency_metrics(samples: list[float]) -> dict[str, float]:
    s = sorted(samples)
    if not s:
        return {}
    return {
        "latency_mean_us": statistics.fmean(s),
        "latency_p50_us": percentile(s, 50),
        "latency_p99_us": percentile(s, 99),
        "latency_max_us": s[-1],
        "latency_stddev_us": statistics.pstdev(s),
    }


# -- echo -------------------------------------------------------------------------------

class EchoServer:
    """Host application: level-triggered epoll loop echoing every byte back."""

    def __init__(self, port: int):
        self.port = port
        self.lfd: int | None = None
        self.epfd: int | None = None
        self.ready = False
        self.backlog: dict[int, bytearray] = {}
        self.echoed = 0

    def __call__(self, p: Proxy, now: float) -> float | None:
        if not self.ready:
            self.lfd = p.p_socket()
            p.p_bind(self.lfd, self.port)
            p.p_listen(self.lfd, 1024)
            p.p_setnonblocking(self.lfd)
            self.epfd = p.p_epoll_create()
            p.p_epoll_ctl(self.epfd, EPOLL_CTL_ADD, self.lfd, EPOLLIN)
            self.ready = True
            return now
        events = p.p_epoll_wait(self.epfd, 256, 0)
        for fd, ev in events:
            if fd == self.lfd:
                self._accept(p)
                continue
            if ev & EPOLLOUT:
                self._flush(p, fd)
            if ev & EPOLLIN:
                self._echo(p, fd)
        p.pump()
        return now if events else None

    def _accept(self, p: Proxy) -> None:
        while True:
            try:
                fd = p.p_accept(self.lfd)
            except WouldBlock:
                return
            p.p_epoll_ctl(self.epfd, EPOLL_CTL_ADD, fd, EPOLLIN)

    def _echo(self, p: Proxy, fd: int) -> None:
        while True:
            try:
                data = p.p_read(fd, 1 << 16)
            except WouldBlock:
                return
            except SocketError:
                self._close(p, fd)
                return
            if not data:
                self._close(p, fd)
                return
            if fd in self.backlog:
                self.backlog[fd] += data
                continue
            n = p.p_write(fd, data)
            self.echoed += n
            if n < len(data):
                self.backlog[fd] = bytearray(data[n:])
                p.p_epoll_ctl(self.epfd, EPOLL_CTL_MOD, fd, EPOLLIN | EPOLLOUT)

    def _flush(self, p: Proxy, fd: int) -> None:
        buf = self.backlog.get(fd)
        if buf is None:
            return
        try:
            n = p.p_write(fd, bytes(buf))
        except WouldBlock:
            return
        self.echoed += n
        del buf[:n]
        if not buf:
            del self.backlog[fd]
            p.p_epoll_ctl(self.epfd, EPOLL_CTL_MOD, fd, EPOLLIN)

    def _close(self, p: Proxy, fd: int) -> None:
        self.backlog.pop(fd, None)
        p.p_close(fd)


class EchoClient:
    """Ping-pong load generator: each connection waits for its echo before sending again."""

    def __init__(self, servers: list[EchoServer], connections: int, msg_size: int,
                 total: int, warmup: int, port: int, seed: int, think_us: float = 0.0):
        self.servers = servers
        self.think_us = think_us
        self.due: list = []         # (time, order, conn) of paused connections
        self.n = connections
        self.msg_size = msg_size
        self.total = total
        self.warmup = warmup
        self.port = port
        self.rng = random.Random(seed)
        self.started = False
        self.conns = []
        self.sent_at: dict = {}
        self.expect: dict = {}
        self.got: dict = {}
        self.completed = 0
        self.issued = 0
        self.latencies: list[float] = []
        self.t_start: float | None = None
        self.t_end: float | None = None
        self.corrupt = 0
        self.errors = 0

    @property
    def done(self) -> bool:
        return self.completed >= self.total

    def __call__(self, stack, now: float) -> float | None:
        if not self.started:
            if not all(s.ready for s in self.servers):
                return now + 1.0
            self.started = True
            for _ in range(self.n):
                self.conns.append(stack.connect(SERVER_IP, self.port, now))
            return None
        due = self.due
        while due and due[0][0] <= now:
            self._send(stack, heapq.heappop(due)[2], now)
        events = stack.events
        while events:
            kind, conn = events.popleft()
            if kind == EV_CONNECTED:
                self._send(stack, conn, now)
            elif kind in (EV_READABLE, EV_EOF):
                self._receive(stack, conn, now)
            elif kind == EV_ERROR:
                self.errors += 1
        return due[0][0] if due else None

    def _send(self, stack, conn, now: float) -> None:
        if self.issued >= self.total:
            return
        msg = self.rng.randbytes(self.msg_size)
        self.expect[conn] = msg
        self.got[conn] = bytearray()
        self.sent_at[conn] = now
        self.issued += 1
        try:
            n = stack.tx_enqueue(conn, msg)
        except WindowFull:
            n = 0
        if n != len(msg):
            raise SimulationFault("client send window cannot hold one message")

    def _receive(self, stack, conn, now: float) -> None:
        buf = self.got.get(conn)
        try:
            blocks = stack.rx_read(conn)
        except WouldBlock:
            return
        if buf is None:
            return
        for b in blocks:
            buf += b.payload
        if len(buf) < self.msg_size:
            return
        if bytes(buf) != self.expect[conn]:
            self.corrupt += 1
        self.completed += 1
        if self.completed == self.warmup:
            self.t_start = now
        elif self.completed > self.warmup:
            self.latencies.append(now - self.sent_at[conn])
        if self.completed == self.total:
            self.t_end = now
        del self.got[conn]
        if self.think_us:
            heapq.heappush(self.due, (now + self.rng.expovariate(1.0 / self.think_us), self.completed, conn))
        else:
            self._send(stack, conn, now)


class StreamServer:
    """Host application: sendfile the same blob down every accepted connection."""

    def __init__(self, port: int, blob: bytes):
        self.port = port
        self.blob = blob
        self.lfd: int | None = None
        self.epfd: int | None = None
        self.ready = False
        self.offset: dict[int, int] = {}

    def __call__(self, p: Proxy, now: float) -> float | None:
        if not self.ready:
            self.lfd = p.p_socket()
            p.p_bind(self.lfd, self.port)
            p.p_listen(self.lfd, 1024)
            p.p_setnonblocking(self.lfd)
            self.epfd = p.p_epoll_create()
            p.p_epoll_ctl(self.epfd, EPOLL_CTL_ADD, self.lfd, EPOLLIN)
            self.ready = True
            return now
        events = p.p_epoll_wait(self.epfd, 256, 0)
        for fd, ev in events:
            if fd == self.lfd:
                while True:
                    try:
                        cfd = p.p_accept(self.lfd)
                    except WouldBlock:
                        break
                    p.p_setnonblocking(cfd)
                    self.offset[cfd] = 0
                    p.p_epoll_ctl(self.epfd, EPOLL_CTL_ADD, cfd, EPOLLOUT)
            elif ev & EPOLLOUT and fd in self.offset:
                self._push(p, fd)
        p.pump()
        return now if events else None

    def _push(self, p: Proxy, fd: int) -> None:
        off = self.offset[fd]
        try:
            off += p.p_sendfile(fd, self.blob, len(self.blob) - off, off)
        except WouldBlock:
            return
        self.offset[fd] = off
        if off >= len(self.blob):
            del self.offset[fd]
            p.p_epoll_ctl(self.epfd, EPOLL_CTL_DEL, fd)


class StreamClient:
    """Opens the connections and checks every received byte against the blob."""

    def __init__(self, servers: list[StreamServer], connections: int, blob: bytes, port: int):
        self.servers = servers
        self.n = connections
        self.blob = blob
        self.port = port
        self.started = False
        self.got: dict = {}
        self.finished = 0
        self.corrupt = 0
        self.t_first: float | None = None
        self.t_end: float | None = None

    @property
    def done(self) -> bool:
        return self.finished >= self.n

    def __call__(self, stack, now: float) -> float | None:
        if not self.started:
            if not all(s.ready for s in self.servers):
                return now + 1.0
            self.started = True
            for _ in range(self.n):
                self.got[stack.connect(SERVER_IP, self.port, now)] = 0
            return None
        events = stack.events
        while events:
            kind, conn = events.popleft()
            if kind in (EV_READABLE, EV_EOF) and conn in self.got:
                self._receive(stack, conn, now)
        return None

    def _receive(self, stack, conn, now: float) -> None:
        try:
            blocks = stack.rx_read(conn)
        except WouldBlock:
            return
        if self.t_first is None:
            self.t_first = now
        off = self.got[conn]
        for b in blocks:
            if b.payload != self.blob[off:off + b.len]:
                self.corrupt += 1
            off += b.len
        self.got[conn] = off
        if off >= len(self.blob):
            del self.got[conn]
            self.finished += 1
            self.t_end = now


def run_stream(wl: WorkloadConfig, sim: SimConfig | None = None) -> MetricsReport:
    sim = _sim_config(sim or SimConfig(), wl)
    blob = random.Random(sim.tcp.seed + 2).randbytes(wl.messages * wl.msg_size)
    servers = [StreamServer(wl.port, blob) for _ in range(wl.cores)]
    client = StreamClient(servers, wl.connections, blob, wl.port)
    tb = Testbed(sim, host_apps=list(servers), client_app=client)
    if not tb.run_until(lambda: client.done, wl.max_time_us):
        raise SimulationFault(f"stream did not finish: {client.finished}/{client.n} connections "
                              f"by t={tb.clock.now:.1f} us")
    if client.corrupt:
        raise SimulationFault(f"{client.corrupt} received blocks differ from the source")
    span = max(client.t_end - client.t_first, 1e-9)
    chunks = wl.messages * wl.connections
    metrics = {
        "messages": chunks,
        "sim_time_us": tb.clock.now,
        "msgs_per_sec": chunks / span * 1e6,
        "bytes_per_sec": chunks * wl.msg_size / span * 1e6,
        "corrupt_messages": client.corrupt,
    }
    return MetricsReport("stream", _config_echo(wl, sim), metrics, tb.counters())


def _sim_config(sim: SimConfig, wl: WorkloadConfig) -> SimConfig:
    sim = dataclasses.replace(sim, cores=wl.cores)
    if wl.seed is not None:
        sim.link = dataclasses.replace(sim.link, seed=wl.seed)
        sim.dma = dataclasses.replace(sim.dma, rng_seed=wl.seed)
        sim.tcp = dataclasses.replace(sim.tcp, seed=wl.seed)
    if wl.mode == "sync":
        sim.proxy = dataclasses.replace(sim.proxy, sync_per_call=True)
        sim.bridge = dataclasses.replace(sim.bridge, batch=False)
    return sim


def _echo_testbed(wl: WorkloadConfig, sim: SimConfig, record: bool = False) -> tuple[Testbed, EchoClient]:
    servers = [EchoServer(wl.port) for _ in range(wl.cores)]
    client = EchoClient(servers, wl.connections, wl.msg_size, wl.warmup + wl.messages,
                        wl.warmup, wl.port, seed=sim.tcp.seed + 1, think_us=wl.think_us)
    tb = Testbed(sim, host_apps=list(servers), client_app=client, record=record)
    finished = tb.run_until(lambda: client.done, wl.max_time_us)
    if not finished:
        raise SimulationFault(f"echo did not finish: {client.completed}/{client.total} round trips "
                              f"by t={tb.clock.now:.1f} us")
    if client.corrupt:
        raise SimulationFault(f"{client.corrupt} echoed messages differ from what was sent")
    return tb, client


def run_echo(wl: WorkloadConfig, sim: SimConfig | None = None) -> MetricsReport:
    sim = _sim_config(sim or SimConfig(), wl)
    tb, client = _echo_testbed(wl, sim)
    start = client.t_start if client.t_start is not None else 0.0
    span = max(client.t_end - start, 1e-9)
    measured = len(client.latencies) if wl.warmup else client.completed
    metrics = {
        "messages": measured,
        "sim_time_us": tb.clock.now,
        "msgs_per_sec": measured / span * 1e6,
        "bytes_per_sec": measured * wl.msg_size * 2 / span * 1e6,
        "corrupt_messages": client.corrupt,
    }
    metrics.update(latency_metrics(client.latencies))
    return MetricsReport("echo", _config_echo(wl, sim), metrics, tb.counters())


def capture_trace(wl: WorkloadConfig, sim: SimConfig | None = None) -> list[tuple[float, bytes]]:
    """Every frame of an echo run, both directions, in send order."""
    sim = _sim_config(sim or SimConfig(), wl)
    tb, _ = _echo_testbed(wl, sim, record=True)
    return tb.frames()


# -- DMA micro-benchmark ----------------------------------------------------------------

def run_dma_micro(wl: WorkloadConfig, sim: SimConfig | None = None) -> MetricsReport:
    """Closed-loop sweep: post QD descriptors as one transaction, wait, poll, repeat.

    Each round also pays one descriptor-post overhead (``marginal_us``)
    before the next transaction can be posted.
    """
    sim = _sim_config(sim or SimConfig(), wl)
    dma = sim.dma
    rows = []
    for size in wl.sizes:
        for qd in wl.qd:
            region = qd * size
            clock = SimClock()
            engine = DmaEngine(clock, bytearray(region), bytearray(region),
                               dataclasses.replace(dma, max_inflight=max(qd, dma.max_inflight)))
            descs = [DmaDescriptor(HOST, i * size, i * size, size) for i in range(qd)]
            total_lat = 0.0
            done = 0
            for _ in range(wl.iterations):
                t0 = clock.now
                engine.dma_submit_batch(descs)
                clock.advance_to(engine.next_event_time())
                comps = engine.dma_poll_completions()
                done += len(comps)
                total_lat += max(c.complete_at for c in comps) - t0
                clock.advance(dma.marginal_us)
            batch_lat = total_lat / wl.iterations
            rows.append({"qd": qd, "size": size, "batch_latency_us": round(batch_lat, 6),
                         "amortized_us": round(batch_lat / qd, 6),
                         "rps": round(done / clock.now * 1e6, 1)})
    metrics = {}
    if rows:
        first = rows[0]
        metrics = {"qd1_latency_us": next((r["amortized_us"] for r in rows if r["qd"] == 1), first["amortized_us"]),
                   "cells": len(rows)}
    return MetricsReport("dma_micro", _config_echo(wl, sim), metrics, {}, rows)


def _config_echo(wl: WorkloadConfig, sim: SimConfig) -> dict:
    out = {}
    for k, v in dataclasses.asdict(wl).items():
        if k in ("report_path", "format"):
            continue
        out[f"workload.{k}"] = ",".join(map(str, v)) if isinstance(v, tuple) else v
    for section in ("dma", "link", "tcp", "rings", "bridge", "proxy", "cost"):
        for k, v in dataclasses.asdict(getattr(sim, section)).items():
            out[f"{section}.{k}"] = v
    out["cores"] = sim.cores
    return out


# -- serialization ----------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, bool) or v is None:
        return json.dumps(v)
    if isinstance(v, float):
        return repr(v)
    return str(v) if isinstance(v, int) else json.dumps(v)


def _parse_value(s: str):
    try:
        return json.loads(s)
    except json.JSONDecodeError:
        return s


_DECODER = json.JSONDecoder()


def _parse_row(rest: str) -> dict:
    row = {}
    i = 0
    while i < len(rest):
        eq = rest.index("=", i)
        key = rest[i:eq]
        value, end = _DECODER.raw_decode(rest, eq + 1)
        row[key] = value
        i = end + 1
    return row


def emit_report(report: MetricsReport, fmt: str = "text", out: IO[str] | None = None) -> str:
    """Serialize ``report``; also write it to ``out`` when given."""
    lines = [REPORT_HEADER]
    if fmt == "text":
        if report.workload:
            lines.append(f"workload {report.workload}")
        for section, data in (("config", report.config), ("metric", report.metrics),
                              ("counter", report.counters)):
            lines.extend(f"{section} {k} = {_fmt(data[k])}" for k in sorted(data))
        for row in report.rows:
            lines.append("row " + " ".join(f"{k}={_fmt(row[k])}" for k in row))
    elif fmt == "json-lines":
        lines[0] = json.dumps({"header": REPORT_HEADER})
        if report.workload:
            lines.append(json.dumps({"workload": report.workload}))
        for section, data in (("config", report.config), ("metric", report.metrics),
                              ("counter", report.counters)):
            lines.extend(json.dumps({"section": section, "key": k, "value": data[k]}) for k in sorted(data))
        lines.extend(json.dumps({"section": "row", "value": row}) for row in report.rows)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    text = "\n".join(lines) + "\n"
    if out is not None:
        out.write(text)
    return text


def parse_report(text: str) -> MetricsReport:
    lines = text.splitlines()
    if not lines:
        raise ValueError("empty report")
    rep = MetricsReport()
    sections = {"config": rep.config, "metric": rep.metrics, "counter": rep.counters}
    if lines[0] == REPORT_HEADER:
        for line in lines[1:]:
            kind, _, rest = line.partition(" ")
            if kind == "workload":
                rep.workload = rest
            elif kind == "row":
                rep.rows.append(_parse_row(rest))
            elif kind in sections:
                k, _, v = rest.partition(" = ")
                sections[kind][k] = _parse_value(v)
            else:
                raise ValueError(f"bad report line {line!r}")
    elif json.loads(lines[0]).get("header") == REPORT_HEADER:
        for line in lines[1:]:
            obj = json.loads(line)
            if "workload" in obj:
                rep.workload = obj["workload"]
            elif obj["section"] == "row":
                rep.rows.append(obj["value"])
            else:
                sections[obj["section"]][obj["key"]] = obj["value"]
    else:
        raise ValueError("not a pno-sim report")
    return rep
