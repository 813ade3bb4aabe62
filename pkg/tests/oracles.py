"""Reference implementations kept deliberately naive and separate from the package."""

from __future__ import annotations


def ref_checksum(data: bytes) -> int:
    """RFC 1071 checksum, one big-endian 16-bit word at a time."""
    total = 0
    for i in range(0, len(data) - 1, 2):
        total += (data[i] << 8) | data[i + 1]
    if len(data) % 2:
        total += data[-1] << 8
    while total > 0xFFFF:
        total = (total & 0xFFFF) + (total >> 16)
    return (~total) & 0xFFFF


def ref_frame_ok(frame: bytes) -> bool:
    """Check IPv4 header and TCP checksums of an Ethernet frame from scratch."""
    if len(frame) < 54 or frame[12:14] != b"\x08\x00":
        return False
    ip = frame[14:]
    ihl = (ip[0] & 0x0F) * 4
    total = (ip[2] << 8) | ip[3]
    if ref_checksum(ip[:ihl]) != 0:
        return False
    seg = ip[ihl:total]
    pseudo = ip[12:16] + ip[16:20] + bytes([0, 6]) + len(seg).to_bytes(2, "big")
    return ref_checksum(pseudo + seg) == 0


class ByteMap:
    """Reassembly by brute force: one dict entry per sequence number, first writer wins."""

    def __init__(self, start: int):
        self.start = start
        self.bytes: dict[int, int] = {}

    def add(self, seq: int, data: bytes, limit: int | None = None) -> None:
        for i, b in enumerate(data):
            s = seq + i
            if s < self.start or (limit is not None and s >= limit):
                continue
            self.bytes.setdefault(s, b)

    def contiguous(self) -> bytes:
        out = bytearray()
        s = self.start
        while s in self.bytes:
            out.append(self.bytes[s])
            s += 1
        return bytes(out)

    def coverage(self) -> set[int]:
        return set(self.bytes)
