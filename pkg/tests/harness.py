"""Helpers for tests that drive a testbed by hand."""

from __future__ import annotations

from pnosim.testbed import CLIENT_IP, SimConfig, Testbed


def make_testbed(**kw) -> Testbed:
    return Testbed(SimConfig(**kw))


def manual_cycle(tb: Testbed, core_idx: int = 0):
    """Advance to the next DMA landing and run one NIC cycle by hand."""
    t = tb.engine.next_event_time()
    if t is not None:
        tb.clock.advance_to(t)
    tb.poller.poll_once()
    core = tb.cores[core_idx]
    now = tb.clock.now
    report = core.bridge.bridge_poll_once(now)
    return report, core.stack.poll(now)


def connected_pair(tb: Testbed, port: int = 80, thread: int = 0):
    """Open an offloaded connection from the host to a listener on the client stack."""
    proxy = tb.threads[thread].proxy
    lst = tb.client.listen(port)
    fd = proxy.p_socket()
    proxy.p_connect(fd, (CLIENT_IP, port))
    tb.run_until(lambda: bool(lst.accept_queue), tb.clock.now + 1e5)
    return proxy, fd, tb.client.accept(lst)


def drain_client(tb: Testbed, conn) -> bytes:
    from pnosim.errors import WouldBlock
    out = bytearray()
    while True:
        try:
            blocks = tb.client.rx_read(conn)
        except WouldBlock:
            return bytes(out)
        for b in blocks:
            out += b.payload
