"""Fixed-size zero-copy packet buffers."""

from __future__ import annotations

from ..wire import FIN, SYN

HEADROOM = 128
# MTU + headroom + 64 slack = 1692, rounded up for alignment
BLOCK_CAPACITY = 1792


class PacketBlock:
    """A buffer slightly larger than the MTU holding one TCP segment.

    Outbound payload is written once at ``HEADROOM``; protocol headers are
    prepended in front of it by moving ``data_offset`` down. Inbound frames
    are stored whole and ``payload_off``/``len`` select the retained bytes.
    ``seq`` is the absolute (unwrapped) sequence number of the first payload
    byte, or of the SYN/FIN for control-only blocks.
    """

    __slots__ = ("buf", "data_offset", "payload_off", "len", "seq", "ctl",
                 "sent_at", "transmissions", "tcp_off")

    def __init__(self, buf: bytearray | None = None, payload_off: int = HEADROOM,
                 length: int = 0, seq: int = 0, ctl: int = 0):
        self.buf = bytearray(BLOCK_CAPACITY) if buf is None else buf
        self.payload_off = payload_off
        self.data_offset = payload_off
        self.len = length
        self.seq = seq
        self.ctl = ctl
        self.sent_at = 0.0
        self.transmissions = 0
        self.tcp_off = -1

    @property
    def seg_len(self) -> int:
        return self.len + (1 if self.ctl & SYN else 0) + (1 if self.ctl & FIN else 0)

    @property
    def end(self) -> int:
        return self.seq + self.seg_len

    @property
    def payload(self) -> memoryview:
        return memoryview(self.buf)[self.payload_off:self.payload_off + self.len]

    @property
    def frame(self) -> bytes:
        return bytes(self.buf[self.data_offset:self.payload_off + self.len])

    def view(self, skip: int, length: int) -> "PacketBlock":
        """Another block sharing this buffer, covering a sub-range of the payload."""
        b = PacketBlock(self.buf, self.payload_off + skip, length, self.seq + skip)
        b.data_offset = b.payload_off
        b.tcp_off = self.tcp_off
        return b

    def __repr__(self) -> str:
        return f"PacketBlock(seq={self.seq}, len={self.len}, ctl={self.ctl:#x})"
