from __future__ import annotations

import itertools
import random
import struct
import threading
import time

import pytest
from hypothesis import given, settings, strategies as st

from pnosim.errors import (
    AlreadyCommitted, DataRingFull, EmptyPayload, InvalidFlag, NotSynchronousKind,
    OrderingViolation, RingFull, WouldBlock,
)
from pnosim.rings import (
    INFO_HDR_LEN, SB_HDR, SLOT, SLOT_SIZE, W_CLOSE, W_DONE, W_FENCE, W_NONE, W_SKIP, W_SOCKET,
    W_WRITE, RingConfig, RingLayout, SRingProducer, align8, dump_layout, fd_hash, s_scan_mem,
)
from pnosim.simdma import NIC, DmaDescriptor
from ring_model import RingRig, check_seal, run_schedule, seal


def producer(cap=4096):
    return SRingProducer(bytearray(cap), 0, cap)


def test_write_block_length_is_size_plus_16():
    ring = producer()
    blk = ring.s_alloc(8 + 100)
    assert blk.length == 116
    assert SB_HDR.unpack_from(ring.mem, blk.off) == (W_NONE, 116)
    assert ring.alloc_cursor == align8(116) == 120


def test_empty_payload_block_is_header_only():
    ring = producer()
    assert ring.s_alloc(0).length == 8


def test_fill_with_64_byte_blocks_then_full():
    ring = producer(4096)
    blocks = []
    with pytest.raises(RingFull):
        while True:
            blocks.append(ring.s_alloc(56))
    assert len(blocks) == 4096 // 64


def test_commit_rules():
    ring = producer()
    blk = ring.s_alloc(16)
    with pytest.raises(InvalidFlag):
        ring.s_commit(blk, W_DONE)
    with pytest.raises(InvalidFlag):
        ring.s_commit(blk, 77)
    with pytest.raises(InvalidFlag):
        ring.s_commit(blk, W_SOCKET)  # synchronous kind needs a return slot
    ring.s_commit(blk, W_WRITE)
    with pytest.raises(AlreadyCommitted):
        ring.s_commit(blk, W_WRITE)
    with pytest.raises(AlreadyCommitted):
        blk.write(0, b"x")


def test_scan_stops_at_first_uncommitted():
    ring = producer()
    a, b, c = (ring.s_alloc(8) for _ in range(3))
    ring.s_commit(a, W_WRITE)
    ring.s_commit(c, W_CLOSE)
    views, cur = s_scan_mem(ring.mem, 0, ring.capacity, 0, 10)
    assert [v.vpos for v in views] == [a.vpos]
    ring.s_commit(b, W_WRITE)
    views, cur = s_scan_mem(ring.mem, 0, ring.capacity, cur, 10)
    assert [v.vpos for v in views] == [b.vpos, c.vpos]
    assert [v.flag for v in views] == [W_WRITE, W_CLOSE]


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
def test_every_commit_order_scans_in_allocation_order(n):
    """Model check: all n! commit orders, scanning after every commit."""
    for order in itertools.permutations(range(n)):
        ring = producer(1024)
        blocks = []
        for i in range(n):
            blk = ring.s_alloc(8 + 8 * i)
            blk.write(0, seal(i, bytes(8 * i)))
            blocks.append(blk)
        committed = set()
        seen = []
        cur = 0
        for i in order:
            ring.s_commit(blocks[i], W_WRITE)
            committed.add(i)
            views, cur = s_scan_mem(ring.mem, 0, ring.capacity, cur, 64)
            seen += [check_seal(bytes(v.body())) for v in views]
            prefix = 0
            while prefix in committed:
                prefix += 1
            assert seen == list(range(prefix))
            for v, i2 in zip(views, seen[len(seen) - len(views):]):
                assert v.length == blocks[i2].length
        assert seen == list(range(n))


def test_wrap_writes_skip_marker():
    ring = producer(256)
    first = ring.s_alloc(200 - 8)  # footprint 200
    ring.s_commit(first, W_WRITE)
    struct.pack_into("<I", ring.mem, first.off, W_DONE)  # NIC done
    blk = ring.s_alloc(56)  # 64 bytes do not fit in the 56 left before the end
    assert SB_HDR.unpack_from(ring.mem, 200) == (W_SKIP, 56)
    assert blk.off == 0 and blk.vpos == 256
    ring.s_commit(blk, W_WRITE)
    views, cur = s_scan_mem(ring.mem, 0, 256, 200, 4)
    assert [v.vpos for v in views] == [256]


def test_skip_marker_survives_until_the_nic_passes_it():
    ring = producer(256)
    first = ring.s_alloc(200 - 8)
    ring.s_commit(first, W_WRITE)
    views, cursor = s_scan_mem(ring.mem, 0, 256, 0, 4)
    struct.pack_into("<I", ring.mem, first.off, W_DONE)
    second = ring.s_alloc(56)  # wraps behind a skip marker at 200
    ring.s_commit(second, W_WRITE)
    ring.reclaim()
    assert ring.reclaim_cursor == 200
    # the freed front of the ring must not spill over the unscanned marker
    with pytest.raises(RingFull):
        ring.s_alloc(200 - 8)
    assert SB_HDR.unpack_from(ring.mem, 200) == (W_SKIP, 56)
    views, cursor = s_scan_mem(ring.mem, 0, 256, cursor, 4)
    assert [v.vpos for v in views] == [256]
    struct.pack_into("<I", ring.mem, second.off, W_DONE)
    ring.reclaim()
    assert ring.reclaim_cursor == ring.alloc_cursor == 320


@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(0, 120), min_size=1, max_size=60), st.integers(0, 255))
def test_old_lap_payload_never_scans_as_a_header(sizes, fill):
    ring = producer(512)
    cursor = 0
    for size in sizes:
        blk = ring.s_alloc(size)
        blk.write(0, bytes([fill]) * size)
        ring.s_commit(blk, W_WRITE)
        views, cursor = s_scan_mem(ring.mem, 0, 512, cursor, 64)
        assert [v.vpos for v in views] == [blk.vpos]
        for v in views:
            struct.pack_into("<I", ring.mem, v.off, W_DONE)
        ring.reclaim()


def test_sync_completion_posts_retval_before_flag():
    rig = RingRig()
    blk = rig.host.s.s_alloc(8, sync=True)
    rig.host.s.s_commit(blk, W_SOCKET)
    seen = []
    rig.engine.add_landing_hook(lambda d, t: seen.append((d.len, blk.done, blk.retval)))
    [view] = rig.sync_scan()
    rig.nic.s_complete(view, 1003)
    rig.nic.flush()
    rig.settle()
    assert blk.done and blk.retval == 1003
    # the retval lands first with the flag still pending, then the flag
    assert seen[-2] == (8, False, 1003)
    assert seen[-1] == (4, True, 1003)


def test_complete_rejects_async_kind():
    rig = RingRig()
    blk = rig.host.s.s_alloc(8)
    rig.host.s.s_commit(blk, W_WRITE)
    [view] = rig.sync_scan()
    with pytest.raises(NotSynchronousKind):
        rig.nic.s_complete(view, 0)


def test_four_threads_each_get_their_own_retval():
    rig = RingRig(s_ring_bytes=1024, scan_window=1024)
    per_thread, results, errors = 250, {}, []

    def client(tid):
        try:
            for i in range(per_thread):
                rid = tid * per_thread + i
                while True:
                    try:
                        blk = rig.host.s.s_alloc(8, sync=True)
                        break
                    except RingFull:
                        time.sleep(0)
                blk.write(0, struct.pack("<Q", rid))
                rig.host.s.s_commit(blk, W_FENCE)
                while not blk.done:
                    time.sleep(0)
                results[rid] = blk.retval
                blk.retire()
        except Exception as exc:  # pragma: no cover - surfaced below
            errors.append(exc)

    threads = [threading.Thread(target=client, args=(t,)) for t in range(4)]
    for t in threads:
        t.start()
    deadline = time.time() + 60
    while any(t.is_alive() for t in threads) and time.time() < deadline:
        rig.reap()
        for v in rig.nic.s_scan(64):
            rid = struct.unpack_from("<Q", v.mem, v.body_off)[0]
            rig.nic.s_complete(v, rid * 3 + 1)
        rig.nic.flush()
        rig.nic.begin_sync()
        rig.step(1.0)
        time.sleep(0)
    for t in threads:
        t.join(1)
    assert not errors
    assert len(results) == 4 * per_thread
    assert all(rv == rid * 3 + 1 for rid, rv in results.items())
    assert rig.audit.violations == []


def test_g_produce_ref_spans_payload():
    rig = RingRig(data_ring_bytes=4096)
    ref = rig.nic.g_produce(1002, bytes(512))
    assert len(ref) == 512
    assert ref.end - ref.begin == align8(512 + 8)
    with pytest.raises(EmptyPayload):
        rig.nic.g_produce(1002, b"")


def test_publish_before_flush_is_rejected():
    rig = RingRig()
    rig.nic.slot_open(1000, host_known=True)
    ref = rig.nic.g_produce(1000, b"abc")
    with pytest.raises(OrderingViolation):
        rig.nic.g_publish(1000, ref)
    rig.nic.flush()
    with pytest.raises(OrderingViolation):
        rig.nic.g_publish(1000, ref)  # submitted but not landed
    rig.settle()
    rig.nic.g_publish(1000, ref)


def test_announced_fd_waits_for_announcement():
    rig = RingRig()
    ann = rig.nic.announce(1005, 1)
    ref = rig.nic.g_produce(1005, b"x")
    assert not rig.nic.publishable(1005, ref)
    rig.nic.flush()
    rig.settle()
    assert rig.nic.flushed(ann) and rig.nic.publishable(1005, ref)


def test_guard_disabled_allows_early_publish():
    rig = RingRig(guard=False)
    ref = rig.nic.g_produce(1000, b"abc")
    rig.nic.g_publish(1000, ref)


def _deliver(rig, pending):
    rig.nic.flush()
    rig.settle()
    pending = rig.publish_ready(pending)
    rig.nic.info_flush()
    rig.settle()
    return pending


def test_data_ring_full_until_host_consumes():
    rig = RingRig(data_ring_bytes=256)
    rig.host.track(1000)
    rig.nic.slot_open(1000, host_known=True)
    pending = [(1000, rig.nic.g_produce(1000, bytes([i]) * 56)) for i in range(4)]
    with pytest.raises(DataRingFull):
        rig.nic.g_produce(1000, b"more")
    _deliver(rig, pending)
    assert rig.host.g_consume(1000, 1000) == b"".join(bytes([i]) * 56 for i in range(4))
    with pytest.raises(WouldBlock):
        rig.host.g_consume(1000, 10)
    rig.host.publish_heads()
    rig.nic.begin_sync()
    rig.settle()
    assert rig.nic.data.head == 256
    rig.nic.g_produce(1000, b"more")


def test_shadow_copy_random_sizes():
    rng = random.Random(5)
    rig = RingRig(data_ring_bytes=1 << 14, event_ring_bytes=1 << 10, info_slots=64)
    fds = list(range(1000, 1008))
    for fd in fds:
        rig.host.track(fd)
        rig.nic.slot_open(fd, host_known=True)
    shadow = {fd: bytearray() for fd in fds}
    got = {fd: bytearray() for fd in fds}
    pending = []
    for i in range(10_000):
        fd = rng.choice(fds)
        data = rng.randbytes(rng.randint(1, 700))
        while True:
            try:
                pending.append((fd, rig.nic.g_produce(fd, data)))
                break
            except DataRingFull:
                pending = _deliver(rig, pending)
                for f in fds:
                    try:
                        got[f] += rig.host.g_consume(f, 1 << 20)
                    except WouldBlock:
                        pass
                rig.host.publish_heads()
                rig.nic.begin_sync()
                rig.settle()
        shadow[fd] += data
    _deliver(rig, pending)
    for f in fds:
        try:
            got[f] += rig.host.g_consume(f, 1 << 30)
        except WouldBlock:
            pass
        assert got[f] == shadow[f]
    assert rig.audit.violations == []


def test_partial_reads_resume_mid_chunk():
    rig = RingRig()
    rig.host.track(7)
    rig.nic.slot_open(7, host_known=True)
    _deliver(rig, [(7, rig.nic.g_produce(7, b"abcdefgh")), (7, rig.nic.g_produce(7, b"ij"))])
    assert rig.host.g_consume(7, 3) == b"abc"
    assert rig.host.g_consume(7, 6) == b"defghi"
    assert rig.host.g_consume(7, 6) == b"j"


def test_events_read_in_order():
    rig = RingRig()
    for i in range(5):
        rig.nic.g_event(1000 + i, 1 << i)
    rig.nic.slot_open(1000)
    _deliver(rig, [])
    assert rig.host.read_events() == [(1000 + i, 1 << i) for i in range(5)]
    assert rig.host.read_events() == []


def test_slot_probing_and_tombstones():
    rig = RingRig(info_slots=16)
    colliding = [fd for fd in range(1000, 3000) if fd_hash(fd, 16) == fd_hash(1000, 16)][:3]
    for fd in colliding:
        rig.nic.slot_open(fd)
    _deliver(rig, [])
    idx = [rig.host.slot_lookup(fd).index for fd in colliding]
    assert idx == [(idx[0] + k) % 16 for k in range(3)]
    rig.nic.slot_close(colliding[1])
    _deliver(rig, [])
    assert rig.host.slot_lookup(colliding[1]) is None
    assert rig.host.slot_lookup(colliding[2]).index == idx[2]  # found past the tombstone
    rig.nic.slot_open(colliding[1])
    _deliver(rig, [])
    assert rig.host.slot_lookup(colliding[1]).index == idx[1]  # tombstone reused


def test_generation_increments_per_publish():
    rig = RingRig()
    rig.nic.slot_open(1000, host_known=True)
    g0 = rig.nic.slot(1000)[5]
    for i in range(3):
        ref = rig.nic.g_produce(1000, b"z")
        rig.nic.flush()
        rig.settle()
        rig.nic.g_publish(1000, ref)
    assert rig.nic.slot(1000)[5] == g0 + 3


def test_write_audit_flags_nic_body_write():
    rig = RingRig()
    blk = rig.host.s.s_alloc(32)
    rig.host.s.s_commit(blk, W_WRITE)
    rig.sync_scan()
    rig.engine.dma_submit(DmaDescriptor(NIC, blk.body_off, blk.body_off, 16))
    rig.clock.advance(5)
    assert rig.audit.violations


def test_layout_is_mirrored_and_disjoint():
    layout = RingLayout(RingConfig(), base=4096)
    regs = layout.regions()
    assert regs[0][1] == 4096
    for (_, a, la), (_, b, _) in zip(regs, regs[1:]):
        assert a + la == b
    assert regs[3][2] == INFO_HDR_LEN + 4096 * SLOT_SIZE
    assert SLOT.size <= SLOT_SIZE
    assert "W_DONE" in dump_layout(layout)


def test_config_validation():
    with pytest.raises(ValueError):
        RingConfig(s_ring_bytes=1000)
    with pytest.raises(ValueError):
        RingConfig(info_slots=0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_randomized_schedules_hold_invariants(seed):
    assert run_schedule(seed) == []
