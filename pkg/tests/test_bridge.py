import struct

import pytest
from hypothesis import given, settings, strategies as st

from harness import connected_pair, make_testbed, manual_cycle
from hazard import bridge_soak
from pnosim.bridge import (
    FD_BASE, FENCE_BODY, REPORT_KEYS, SOCKET_BODY, WRITE_HDR, BridgeConfig, FdAllocator,
)
from pnosim.rings import SB_HDR, W_DONE, W_FENCE, W_SOCKET, W_WRITE
from pnosim.wire import parse_frame


def _flag(tb, blk):
    return SB_HDR.unpack_from(tb.host_mem, blk.off)[0]


def _run_until_done(tb, blocks, limit=200):
    for _ in range(limit):
        if all(_flag(tb, b) == W_DONE for b in blocks):
            return
        manual_cycle(tb)
    raise AssertionError("blocks never completed")


def test_idle_cycle_reports_all_zeros():
    tb = make_testbed()
    for _ in range(5):
        report, frames = manual_cycle(tb)
        assert report == dict.fromkeys(REPORT_KEYS, 0)
        assert frames == []


def test_first_socket_gets_fd_1000():
    tb = make_testbed()
    s = tb.threads[0].rings.s
    blk = s.s_alloc(SOCKET_BODY.size, sync=True)
    blk.write(0, SOCKET_BODY.pack(2, 1))
    s.s_commit(blk, W_SOCKET)
    _run_until_done(tb, [blk])
    assert blk.retval == FD_BASE == 1000


def test_fd_allocator_is_shared_and_monotone():
    fds = FdAllocator()
    assert [fds.allocate() for _ in range(3)] == [1000, 1001, 1002]
    tb = make_testbed(cores=2)
    a = tb.threads[0].proxy.p_socket()
    b = tb.threads[1].proxy.p_socket()
    assert {a, b} == {1000, 1001}


def test_write_reaches_the_wire_in_the_dispatching_cycle():
    tb = make_testbed()
    proxy, fd, peer = connected_pair(tb)
    payload = bytes(range(100))
    s = tb.threads[0].rings.s
    blk = s.s_alloc(WRITE_HDR.size + len(payload))
    blk.write(0, WRITE_HDR.pack(fd, len(payload)))
    blk.write(WRITE_HDR.size, payload)
    s.s_commit(blk, W_WRITE)
    for _ in range(50):
        report, frames = manual_cycle(tb)
        if report["dispatched"]:
            break
    assert report["dispatched"] == 1 and report["tx_bytes"] == 100
    assert [parse_frame(f).payload for f in frames if parse_frame(f).payload] == [payload]


def test_write_to_unknown_fd_is_counted_and_released():
    tb = make_testbed()
    s = tb.threads[0].rings.s
    blk = s.s_alloc(WRITE_HDR.size + 10)
    blk.write(0, WRITE_HDR.pack(4242, 10))
    s.s_commit(blk, W_WRITE)
    _run_until_done(tb, [blk])
    assert tb.cores[0].bridge.stats["bad_fd"] == 1
    s.reclaim()
    assert s.alloc_cursor == s.reclaim_cursor


def test_unknown_flag_is_skipped_not_stalled():
    tb = make_testbed()
    s = tb.threads[0].rings.s
    bad = s.s_alloc(8)
    struct.pack_into("<I", tb.host_mem, bad.off, 77)  # a flag no bridge understands
    bad.committed = True
    good = s.s_alloc(FENCE_BODY.size, sync=True)
    good.write(0, bytes(FENCE_BODY.size))
    s.s_commit(good, W_FENCE)
    _run_until_done(tb, [bad, good])
    assert tb.cores[0].bridge.stats["unknown_flag"] == 1
    assert good.retval == 0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 64)), min_size=1, max_size=40), st.randoms())
def test_every_committed_block_is_dispatched_exactly_once(shapes, rnd):
    tb = make_testbed(bridge=BridgeConfig(poll_budget=7))
    bridge = tb.cores[0].bridge
    bridge.dispatched = []
    s = tb.threads[0].rings.s
    blocks = []
    for sync, extra in shapes:
        blk = s.s_alloc(WRITE_HDR.size + extra, sync=sync)
        blk.write(0, WRITE_HDR.pack(5000, extra))
        blocks.append((blk, W_FENCE if sync else W_WRITE))
    order = blocks[:]
    rnd.shuffle(order)
    for i, (blk, flag) in enumerate(order):
        s.s_commit(blk, flag)
        if i % 3 == 0:
            manual_cycle(tb)
    _run_until_done(tb, [b for b, _ in blocks], limit=400)
    assert sorted(bridge.dispatched) == bridge.dispatched
    assert bridge.dispatched == [b.vpos for b, _ in blocks]


def test_stats_snapshot_is_flat_key_value():
    tb = make_testbed()
    manual_cycle(tb)
    text = tb.cores[0].bridge.stats_text()
    for line in text.splitlines():
        key, _, value = line.partition("=")
        assert key.startswith(("bridge.", "rings.")) and value.lstrip("-").isdigit()


def test_bad_config_rejected():
    with pytest.raises(ValueError):
        BridgeConfig(poll_budget=0)
    with pytest.raises(ValueError):
        BridgeConfig(batch_window_us=-1)


def test_guarded_soak_has_no_stale_reads_and_keeps_fifo():
    res = bridge_soak(20_000, guard=True, seed=3)
    assert res == {**res, "stale": 0, "fifo_mismatches": 0, "ordering_stalls": 0}
    assert res["checks"] > 100


def test_unguarded_soak_is_caught_by_the_detector():
    assert bridge_soak(20_000, guard=False, seed=3, stop_on_first=True)["stale"] >= 1
