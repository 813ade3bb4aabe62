"""Test rig wiring one core's host and NIC ring ends through a DMA engine,
plus a randomized schedule runner that checks ring invariants."""

from __future__ import annotations

import random
import struct
import zlib

from pnosim.errors import DataRingFull, RingFull, WouldBlock
from pnosim.rings import (
    W_FENCE, W_WRITE, HostRings, NicRings, RingConfig, RingLayout, WriteAudit,
)
from pnosim.simdma import DmaConfig, DmaEngine, DmaPoller, SimClock

SMALL = dict(s_ring_bytes=256, data_ring_bytes=512, event_ring_bytes=64, info_slots=16, scan_window=256)
BODY = struct.Struct("<II")   # request id, crc32 of the rest of the body


class RingRig:
    def __init__(self, ordering="ordered", seed=0, guard=True, batch=True, **cfg):
        self.cfg = RingConfig(**{**SMALL, **cfg})
        self.layout = RingLayout(self.cfg)
        self.host_mem = bytearray(self.layout.end)
        self.nic_mem = bytearray(self.layout.end)
        self.clock = SimClock()
        self.engine = DmaEngine(self.clock, self.host_mem, self.nic_mem,
                                DmaConfig(completion_ordering=ordering, rng_seed=seed))
        self.audit = WriteAudit(self.layout)
        self.engine.add_landing_hook(self.audit.landing_hook)
        self.port = DmaPoller(self.engine).register("nic")
        self.nic = NicRings(self.layout, self.nic_mem, self.port, batch=batch, guard=guard, audit=self.audit)
        self.host = HostRings(self.layout, self.host_mem, self.audit)

    def reap(self) -> int:
        done = self.port.poll()
        for c in done:
            assert self.nic.handle(c)
        return len(done)

    def step(self, dt: float = 0.5) -> None:
        self.clock.advance(dt)
        self.reap()

    def settle(self, limit: float = 1000.0) -> None:
        """Advance until no DMA is in flight."""
        end = self.clock.now + limit
        while self.engine.inflight:
            nxt = self.engine.next_event_time()
            if nxt is None:
                self.reap()
                continue
            if nxt > end:
                raise AssertionError("DMA did not settle")
            self.clock.advance_to(nxt)
            self.reap()

    def sync_scan(self, max_blocks: int = 1 << 20):
        self.nic.begin_sync()
        self.settle()
        return self.nic.s_scan(max_blocks)

    def publish_ready(self, pending: list) -> list:
        """Publish every (fd, ref) whose bytes have landed; return the rest."""
        rest = []
        for fd, ref in pending:
            if self.nic.publishable(fd, ref):
                self.nic.g_publish(fd, ref)
            else:
                rest.append((fd, ref))
        return rest


def seal(req_id: int, extra: bytes) -> bytes:
    return BODY.pack(req_id, zlib.crc32(extra)) + extra


def check_seal(body: bytes) -> int | None:
    if len(body) < BODY.size:
        return None
    req_id, crc = BODY.unpack_from(body)
    return req_id if zlib.crc32(body[BODY.size:]) == crc else None


def run_schedule(seed: int, steps: int = 40) -> list[str]:
    """One randomized host/NIC interleaving; returns invariant violations."""
    rng = random.Random(seed)
    rig = RingRig(ordering=rng.choice(["ordered", "unordered"]), seed=seed, batch=rng.random() < 0.7)
    host, nic = rig.host, rig.nic
    bad: list[str] = []
    next_id = 0
    uncommitted = []            # (block, flag, id)
    committed_order = []        # ids in allocation order (expected scan order)
    alloc_order = {}            # id -> allocation rank
    waiting = {}                # id -> sync block
    scanned = []
    fds = [1000, 1001, 1002]
    shadow = {fd: bytearray() for fd in fds}
    got = {fd: bytearray() for fd in fds}
    pending_pub = []
    for fd in fds:
        host.track(fd)
        nic.slot_open(fd, host_known=True)

    def nic_cycle(max_blocks, produce=True):
        nonlocal pending_pub
        for v in nic.s_scan(max_blocks):
            body = bytes(v.body())
            rid = check_seal(body)
            if rid is None:
                bad.append(f"torn block at {v.vpos}")
                continue
            scanned.append(rid)
            if v.sync:
                nic.s_complete(v, rid * 7 + 1)
            else:
                nic.s_release(v)
        for _ in range(rng.randint(0, 3) if produce else 0):
            fd = rng.choice(fds)
            data = rng.randbytes(rng.randint(1, 96))
            try:
                ref = nic.g_produce(fd, data)
            except DataRingFull:
                break
            shadow[fd] += data
            pending_pub.append((fd, ref))
        if produce and rng.random() < 0.3:
            try:
                nic.g_event(rng.choice(fds), 1)
            except DataRingFull:
                pass
        pending_pub = rig.publish_ready(pending_pub)
        nic.flush()
        nic.info_flush()
        nic.begin_sync()

    def host_read():
        for fd in fds:
            try:
                got[fd] += host.g_consume(fd, rng.randint(1, 200))
            except WouldBlock:
                pass
        host.read_events()
        host.publish_heads()

    for _ in range(steps):
        op = rng.random()
        if op < 0.25:
            sync = rng.random() < 0.3
            extra = rng.randbytes(rng.randint(0, 56))
            try:
                blk = host.s.s_alloc(BODY.size + len(extra), sync=sync)
            except RingFull:
                continue
            blk.write(0, seal(next_id, extra))
            alloc_order[next_id] = len(alloc_order)
            uncommitted.append((blk, W_FENCE if sync else W_WRITE, next_id))
            next_id += 1
        elif op < 0.45 and uncommitted:
            blk, flag, rid = uncommitted.pop(rng.randrange(len(uncommitted)))
            host.s.s_commit(blk, flag)
            committed_order.append(rid)
            if blk.sync:
                waiting[rid] = blk
        elif op < 0.7:
            rig.reap()
            nic_cycle(rng.randint(1, 8))
        elif op < 0.85:
            rig.step(rng.uniform(0, 3))
        else:
            host_read()
        for rid, blk in list(waiting.items()):
            if blk.done:
                if blk.retval != rid * 7 + 1:
                    bad.append(f"request {rid} got retval {blk.retval}")
                blk.retire()
                del waiting[rid]

    # drain: commit leftovers, then run until the NIC has seen everything
    for blk, flag, rid in uncommitted:
        host.s.s_commit(blk, flag)
        committed_order.append(rid)
        if blk.sync:
            waiting[rid] = blk
    for _ in range(400):
        rig.reap()
        nic_cycle(64, produce=False)
        rig.settle()
        rig.reap()
        pending_pub = rig.publish_ready(pending_pub)
        nic.info_flush()
        rig.settle()
        host_read()
        for rid, blk in list(waiting.items()):
            if blk.done:
                if blk.retval != rid * 7 + 1:
                    bad.append(f"request {rid} got retval {blk.retval}")
                blk.retire()
                del waiting[rid]
        if (len(scanned) == len(committed_order) and not waiting and not pending_pub
                and all(len(got[f]) == len(shadow[f]) for f in fds) and not nic.busy):
            break
    expected = sorted(committed_order, key=alloc_order.__getitem__)
    if scanned != expected:
        bad.append(f"scan order {scanned[:10]} != allocation order {expected[:10]}")
    if waiting:
        bad.append(f"{len(waiting)} synchronous requests never completed")
    for fd in fds:
        if got[fd] != shadow[fd]:
            bad.append(f"fd {fd}: consumed {len(got[fd])} bytes differ from {len(shadow[fd])} produced")
    host.s.reclaim()
    if host.s.alloc_cursor != host.s.reclaim_cursor:
        bad.append("S-ring space not fully reclaimed")
    bad.extend(rig.audit.violations)
    return bad
