"""Ethernet II + IPv4 + TCP framing and the internet checksum."""

from __future__ import annotations

import socket
import struct
import sys
from dataclasses import dataclass

ETH_LEN = 14
IP_LEN = 20
TCP_LEN = 20
HDR_LEN = ETH_LEN + IP_LEN + TCP_LEN  # 54
MSS_OPT_LEN = 4

ETHERTYPE_IPV4 = 0x0800
PROTO_TCP = 6

FIN = 0x01
SYN = 0x02
RST = 0x04
PSH = 0x08
ACK = 0x10

_ETH = struct.Struct("!6s6sH")
_IP = struct.Struct("!BBHHHBBH4s4s")
_TCP = struct.Struct("!HHIIBBHHH")
_PSEUDO = struct.Struct("!4s4sBBH")
_MSS_OPT = struct.Struct("!BBH")

_SWAP = sys.byteorder == "little"


class MalformedFrame(ValueError):
    pass


def ip_to_bytes(ip: str | bytes) -> bytes:
    return ip if isinstance(ip, bytes) else socket.inet_aton(ip)


def ip_to_str(ip: bytes) -> str:
    return socket.inet_ntoa(ip)


def _ones_sum(data) -> int:
    """16-bit one's-complement sum of ``data`` in network byte order."""
    if len(data) & 1:
        data = bytes(data) + b"\x00"
    s = sum(memoryview(data).cast("H"))
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    if _SWAP:
        s = ((s & 0xFF) << 8) | (s >> 8)
    return s


def internet_checksum(*parts) -> int:
    """RFC 1071 checksum over the concatenation of ``parts``.

    Only the last part may have odd length.
    """
    s = 0
    for p in parts:
        s += _ones_sum(p)
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    return ~s & 0xFFFF


def _tcp_checksum(src_ip: bytes, dst_ip: bytes, segment) -> int:
    pseudo = _PSEUDO.pack(src_ip, dst_ip, 0, PROTO_TCP, len(segment))
    return internet_checksum(pseudo, segment)


def write_headers(buf: bytearray, payload_off: int, payload_len: int, *,
                  src_mac: bytes, dst_mac: bytes, src_ip: bytes, dst_ip: bytes,
                  sport: int, dport: int, seq: int, ack: int, flags: int, window: int,
                  ip_id: int = 0, mss: int | None = None) -> int:
    """Prepend Ethernet/IPv4/TCP headers in place in front of ``payload_off``.

    The payload must already sit at ``buf[payload_off:payload_off + payload_len]``.
    Returns the offset where the frame starts.
    """
    tcp_len = TCP_LEN + (MSS_OPT_LEN if mss is not None else 0)
    tcp_off = payload_off - tcp_len
    ip_off = tcp_off - IP_LEN
    eth_off = ip_off - ETH_LEN
    if eth_off < 0:
        raise ValueError("not enough headroom for headers")

    _ETH.pack_into(buf, eth_off, dst_mac, src_mac, ETHERTYPE_IPV4)
    total = IP_LEN + tcp_len + payload_len
    _IP.pack_into(buf, ip_off, 0x45, 0, total, ip_id & 0xFFFF, 0x4000, 64, PROTO_TCP, 0, src_ip, dst_ip)
    struct.pack_into("!H", buf, ip_off + 10, internet_checksum(memoryview(buf)[ip_off:tcp_off]))

    _TCP.pack_into(buf, tcp_off, sport, dport, seq & 0xFFFFFFFF, ack & 0xFFFFFFFF,
                   (tcp_len // 4) << 4, flags, min(window, 0xFFFF), 0, 0)
    if mss is not None:
        _MSS_OPT.pack_into(buf, tcp_off + TCP_LEN, 2, 4, mss)
    seg = memoryview(buf)[tcp_off:payload_off + payload_len]
    struct.pack_into("!H", buf, tcp_off + 16, _tcp_checksum(src_ip, dst_ip, seg))
    return eth_off


def build_frame(payload: bytes = b"", **fields) -> bytes:
    """Convenience wrapper around :func:`write_headers` for tests and probes."""
    room = HDR_LEN + MSS_OPT_LEN
    buf = bytearray(room + len(payload))
    buf[room:] = payload
    start = write_headers(buf, room, len(payload), **fields)
    return bytes(buf[start:])


@dataclass(slots=True)
class Segment:
    frame: bytes
    src_mac: bytes
    dst_mac: bytes
    src_ip: bytes
    dst_ip: bytes
    sport: int
    dport: int
    seq: int
    ack: int
    flags: int
    window: int
    mss: int | None
    tcp_off: int
    payload_off: int
    payload_len: int

    @property
    def payload(self) -> bytes:
        return self.frame[self.payload_off:self.payload_off + self.payload_len]

    @property
    def seg_len(self) -> int:
        """Sequence space consumed (payload plus SYN/FIN)."""
        return self.payload_len + (1 if self.flags & SYN else 0) + (1 if self.flags & FIN else 0)


def parse_frame(frame: bytes, verify: bool = True) -> Segment:
    if len(frame) < HDR_LEN:
        raise MalformedFrame("short frame")
    dst_mac, src_mac, etype = _ETH.unpack_from(frame, 0)
    if etype != ETHERTYPE_IPV4:
        raise MalformedFrame("not ipv4")
    vihl, _tos, total, _id, _frag, _ttl, proto, _csum, src_ip, dst_ip = _IP.unpack_from(frame, ETH_LEN)
    ihl = (vihl & 0x0F) * 4
    if vihl >> 4 != 4 or ihl < IP_LEN:
        raise MalformedFrame("bad ip header")
    if proto != PROTO_TCP:
        raise MalformedFrame("not tcp")
    if total < ihl + TCP_LEN or ETH_LEN + total > len(frame):
        raise MalformedFrame("bad ip length")
    tcp_off = ETH_LEN + ihl
    view = memoryview(frame)
    if verify and internet_checksum(view[ETH_LEN:tcp_off]) != 0:
        raise MalformedFrame("ip checksum")
    sport, dport, seq, ack, doff, flags, window, _c, _u = _TCP.unpack_from(frame, tcp_off)
    tcp_len = (doff >> 4) * 4
    if tcp_len < TCP_LEN or ihl + tcp_len > total:
        raise MalformedFrame("bad tcp offset")
    end = ETH_LEN + total
    if verify and _tcp_checksum(src_ip, dst_ip, view[tcp_off:end]) != 0:
        raise MalformedFrame("tcp checksum")
    mss = None
    i = tcp_off + TCP_LEN
    opt_end = tcp_off + tcp_len
    while i < opt_end:
        kind = frame[i]
        if kind == 0:
            break
        if kind == 1:
            i += 1
            continue
        if i + 1 >= opt_end:
            raise MalformedFrame("truncated option")
        olen = frame[i + 1]
        if olen < 2 or i + olen > opt_end:
            raise MalformedFrame("bad option length")
        if kind == 2 and olen == 4:
            mss = struct.unpack_from("!H", frame, i + 2)[0]
        i += olen
    return Segment(frame, src_mac, dst_mac, src_ip, dst_ip, sport, dport, seq, ack,
                   flags, window, mss, tcp_off, opt_end, end - opt_end)


def checksums_valid(frame: bytes) -> bool:
    try:
        parse_frame(frame, verify=True)
    except MalformedFrame:
        return False
    return True


def refresh_tcp_fields(buf: bytearray, eth_off: int, *, ack: int, window: int, flags: int | None = None) -> None:
    """Rewrite ack/window (and optionally flags) of a built frame and fix its TCP checksum."""
    ip_off = eth_off + ETH_LEN
    ihl = (buf[ip_off] & 0x0F) * 4
    total = struct.unpack_from("!H", buf, ip_off + 2)[0]
    tcp_off = ip_off + ihl
    struct.pack_into("!I", buf, tcp_off + 8, ack & 0xFFFFFFFF)
    if flags is not None:
        buf[tcp_off + 13] = flags
    struct.pack_into("!HH", buf, tcp_off + 14, min(window, 0xFFFF), 0)
    src_ip = bytes(buf[ip_off + 12:ip_off + 16])
    dst_ip = bytes(buf[ip_off + 16:ip_off + 20])
    seg = memoryview(buf)[tcp_off:ip_off + total]
    struct.pack_into("!H", buf, tcp_off + 16, _tcp_checksum(src_ip, dst_ip, seg))
