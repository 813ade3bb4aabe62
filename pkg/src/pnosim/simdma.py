"""Simulated DMA engine between the host and NIC memory domains.

Latency model (all times in simulated microseconds)::

    transaction_latency(n, nbytes) = base_latency_us
                                     + (n - 1) * marginal_us
                                     + nbytes * per_byte_ns / 1000

A single descriptor therefore takes ``base_latency_us`` (2.1 by default) and a
batch of ten 4 KiB descriptors amortizes to roughly 0.42 us per request.
Transactions run concurrently up to ``max_inflight`` outstanding descriptors.

Source bytes are snapshotted at submission. Every descriptor of a transaction
lands in destination memory at the transaction's ``complete_at``; with
``unordered`` completion the landing (and polling) order inside a transaction,
and across transactions that complete at the same instant, is a seeded
permutation instead of submission order.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass
from typing import Callable, Iterable

from .errors import EmptyBatch, QueueFull, RangeError

HOST = "host"
NIC = "nic"
DOMAINS = (HOST, NIC)

ORDERED = "ordered"
UNORDERED = "unordered"


class SimClock:
    """Monotone simulated time in microseconds."""

    def __init__(self, now_us: float = 0.0):
        self.now_us = float(now_us)
        self._listeners: list[Callable[[float], None]] = []

    @property
    def now(self) -> float:
        return self.now_us

    def subscribe(self, fn: Callable[[float], None]) -> None:
        """Call ``fn(new_now)`` every time the clock moves."""
        self._listeners.append(fn)

    def advance(self, dt_us: float) -> float:
        if dt_us < 0:
            raise ValueError(f"negative time step {dt_us}")
        return self.advance_to(self.now_us + dt_us)

    def advance_to(self, t_us: float) -> float:
        if t_us < self.now_us:
            raise ValueError(f"clock cannot go back from {self.now_us} to {t_us}")
        self.now_us = float(t_us)
        for fn in self._listeners:
            fn(self.now_us)
        return self.now_us


@dataclass
class DmaConfig:
    base_latency_us: float = 2.1
    marginal_us: float = 0.23
    per_byte_ns: float = 0.0
    max_inflight: int = 1024
    completion_ordering: str = ORDERED
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not self.base_latency_us > 0:
            raise ValueError("dma.base_latency_us must be > 0")
        if self.marginal_us < 0 or self.per_byte_ns < 0:
            raise ValueError("dma costs must be >= 0")
        if self.max_inflight < 1:
            raise ValueError("dma.max_inflight must be >= 1")
        if self.completion_ordering not in (ORDERED, UNORDERED):
            raise ValueError(f"dma.ordering must be ordered|unordered, got {self.completion_ordering!r}")

    def transaction_latency(self, n: int, nbytes: int = 0) -> float:
        return self.base_latency_us + (n - 1) * self.marginal_us + nbytes * self.per_byte_ns / 1000.0

    def amortized_latency(self, n: int, nbytes_each: int = 0) -> float:
        return self.transaction_latency(n, n * nbytes_each) / n


@dataclass(frozen=True)
class DmaDescriptor:
    src_domain: str
    src_offset: int
    dst_offset: int
    len: int

    @property
    def dst_domain(self) -> str:
        return NIC if self.src_domain == HOST else HOST


@dataclass(frozen=True)
class DmaCompletion:
    token: int
    complete_at: float
    batch: int
    desc: DmaDescriptor


class _Pending:
    __slots__ = ("token", "batch", "desc", "data", "complete_at", "submitted_at")

    def __init__(self, token, batch, desc, data, complete_at, submitted_at):
        self.token = token
        self.batch = batch
        self.desc = desc
        self.data = data
        self.complete_at = complete_at
        self.submitted_at = submitted_at


LandingHook = Callable[[DmaDescriptor, int], None]


class DmaEngine:
    """Copies byte ranges between two registered memory regions.

    ``host_mem`` and ``nic_mem`` are the registered regions of each domain.
    The engine subscribes to ``clock`` and applies landings as time passes.
    """

    def __init__(self, clock: SimClock, host_mem: bytearray, nic_mem: bytearray,
                 config: DmaConfig | None = None):
        self.clock = clock
        self.config = config or DmaConfig()
        self.mem = {HOST: host_mem, NIC: nic_mem}
        self._rng = random.Random(self.config.rng_seed)
        self._next_token = 1
        self._seq = 0
        # (complete_at, tiebreak, seq, _Pending) not yet landed
        self._landing: list[tuple] = []
        # landed, waiting to be polled, in landing order
        self._done: list[_Pending] = []
        self._outstanding = 0
        self._hooks: list[LandingHook] = []
        self.stats = {"transactions": 0, "descriptors": 0, "bytes": 0, "polled": 0}
        clock.subscribe(self._on_tick)

    # -- submission ----------------------------------------------------------

    @property
    def inflight(self) -> int:
        """Descriptors submitted whose completion has not been polled yet."""
        return self._outstanding

    def add_landing_hook(self, fn: LandingHook) -> None:
        """``fn(desc, token)`` runs right after each descriptor's bytes land."""
        self._hooks.append(fn)

    def dma_submit(self, desc: DmaDescriptor) -> int:
        return self._submit([desc])[0]

    def dma_submit_batch(self, descs: Iterable[DmaDescriptor]) -> int:
        """Submit ``descs`` as one transaction and return its batch token.

        Descriptor tokens are ``batch_token, batch_token + 1, ...`` in
        submission order.
        """
        descs = list(descs)
        if not descs:
            raise EmptyBatch("dma_submit_batch needs at least one descriptor")
        return self._submit(descs)[0]

    submit = dma_submit
    submit_batch = dma_submit_batch

    def _submit(self, descs: list[DmaDescriptor]) -> list[int]:
        cfg = self.config
        if self._outstanding + len(descs) > cfg.max_inflight:
            raise QueueFull(f"{self._outstanding} outstanding + {len(descs)} > max_inflight {cfg.max_inflight}")
        for d in descs:
            self._check(d)
        now = self.clock.now_us
        nbytes = sum(d.len for d in descs)
        complete_at = now + cfg.transaction_latency(len(descs), nbytes)
        batch = self._next_token
        tokens = list(range(batch, batch + len(descs)))
        self._next_token += len(descs)

        order = list(range(len(descs)))
        if cfg.completion_ordering == UNORDERED:
            self._rng.shuffle(order)
            tiebreak = self._rng.random()
        else:
            tiebreak = 0.0
        for rank, i in enumerate(order):
            d = descs[i]
            src = self.mem[d.src_domain]
            p = _Pending(tokens[i], batch, d, bytes(src[d.src_offset:d.src_offset + d.len]),
                         complete_at, now)
            self._seq += 1
            heapq.heappush(self._landing, (complete_at, tiebreak, self._seq, p))
        self._outstanding += len(descs)
        self.stats["transactions"] += 1
        self.stats["descriptors"] += len(descs)
        self.stats["bytes"] += nbytes
        return tokens

    def _check(self, d: DmaDescriptor) -> None:
        if d.src_domain not in DOMAINS:
            raise RangeError(f"unknown domain {d.src_domain!r}")
        if d.len <= 0:
            raise RangeError("empty DMA transfer")
        src = self.mem[d.src_domain]
        dst = self.mem[d.dst_domain]
        if d.src_offset < 0 or d.src_offset + d.len > len(src):
            raise RangeError(f"source range [{d.src_offset}, {d.src_offset + d.len}) outside {d.src_domain} region")
        if d.dst_offset < 0 or d.dst_offset + d.len > len(dst):
            raise RangeError(f"destination range [{d.dst_offset}, {d.dst_offset + d.len}) outside {d.dst_domain} region")

    # -- time ----------------------------------------------------------------

    def clock_advance(self, dt_us: float) -> float:
        return self.clock.advance(dt_us)

    def next_event_time(self) -> float | None:
        """Earliest pending landing, or None when nothing is in flight."""
        return self._landing[0][0] if self._landing else None

    def next_landing_to(self, domain: str) -> float | None:
        times = [e[0] for e in self._landing if e[3].desc.dst_domain == domain]
        return min(times) if times else None

    def _on_tick(self, now: float) -> None:
        landing = self._landing
        while landing and landing[0][0] <= now:
            _, _, _, p = heapq.heappop(landing)
            d = p.desc
            self.mem[d.dst_domain][d.dst_offset:d.dst_offset + d.len] = p.data
            p.data = None
            self._done.append(p)
            for fn in self._hooks:
                fn(d, p.token)

    # -- completion ----------------------------------------------------------

    def dma_poll_completions(self, max_count: int | None = None) -> list[DmaCompletion]:
        n = len(self._done) if max_count is None else min(max_count, len(self._done))
        if n == 0:
            return []
        ready, self._done = self._done[:n], self._done[n:]
        self._outstanding -= n
        self.stats["polled"] += n
        return [DmaCompletion(p.token, p.complete_at, p.batch, p.desc) for p in ready]

    poll = dma_poll_completions


class DmaPoller:
    """Routes completions from a shared engine to the component that asked.

    A single poller task reaps the engine and hands each completion to the
    owner registered for its token; owners drain their inbox with ``take``.
    """

    def __init__(self, engine: DmaEngine):
        self.engine = engine
        self._owner: dict[int, object] = {}
        self._inbox: dict[object, list[DmaCompletion]] = {}

    def register(self, owner: object) -> "DmaPort":
        self._inbox.setdefault(owner, [])
        return DmaPort(self, owner)

    def poll_once(self, max_count: int | None = None) -> int:
        done = self.engine.dma_poll_completions(max_count)
        for c in done:
            owner = self._owner.pop(c.token, None)
            if owner is not None:
                self._inbox[owner].append(c)
        return len(done)

    def _track(self, owner, first_token: int, n: int) -> None:
        for t in range(first_token, first_token + n):
            self._owner[t] = owner

    def take(self, owner) -> list[DmaCompletion]:
        box = self._inbox[owner]
        if not box:
            return []
        self._inbox[owner] = []
        return box


class DmaPort:
    """One owner's view of a shared engine."""

    def __init__(self, poller: DmaPoller, owner: object):
        self.poller = poller
        self.owner = owner
        self.engine = poller.engine

    def submit(self, desc: DmaDescriptor) -> int:
        token = self.engine.dma_submit(desc)
        self.poller._track(self.owner, token, 1)
        return token

    def submit_batch(self, descs: list[DmaDescriptor]) -> list[int]:
        batch = self.engine.dma_submit_batch(descs)
        self.poller._track(self.owner, batch, len(descs))
        return list(range(batch, batch + len(descs)))

    def take(self) -> list[DmaCompletion]:
        return self.poller.take(self.owner)

    @property
    def pending(self) -> int:
        """Completions routed to this owner and not yet taken."""
        return len(self.poller._inbox[self.owner])

    def poll(self) -> list[DmaCompletion]:
        """Reap the engine and return this owner's completions."""
        self.poller.poll_once()
        return self.take()
