"""Seeded point-to-point link with loss, duplication, reordering and corruption."""

from __future__ import annotations

import heapq
import random
import struct
from dataclasses import dataclass

from .wire import ETH_LEN, checksums_valid

PCAP_MAGIC = 0xA1B2C3D4
LINKTYPE_ETHERNET = 1
_PCAP_HDR = struct.Struct("<IHHiIII")
_PCAP_REC = struct.Struct("<IIII")


@dataclass
class LinkConfig:
    loss_prob: float = 0.0
    reorder_prob: float = 0.0
    reorder_window: int = 1
    dup_prob: float = 0.0
    corrupt_prob: float = 0.0
    one_way_delay_us: float = 5.0
    bandwidth_bps: float = 0.0
    seed: int = 0
    # a held frame is released after this long even if no later frame passes it
    reorder_hold_us: float = 50.0
    mtu: int = 1500

    def __post_init__(self) -> None:
        for name in ("loss_prob", "reorder_prob", "dup_prob", "corrupt_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"link.{name} must be in [0, 1], got {v}")
        if self.reorder_window < 1:
            raise ValueError("link.reorder_window must be >= 1")
        if self.one_way_delay_us < 0 or self.bandwidth_bps < 0 or self.reorder_hold_us < 0:
            raise ValueError("link delay/bandwidth/hold must be >= 0")


class _Held:
    __slots__ = ("frame", "due", "remaining", "expires")

    def __init__(self, frame, due, remaining, expires):
        self.frame = frame
        self.due = due
        self.remaining = remaining
        self.expires = expires


class Link:
    """One direction of a link. Frames are bytes; times are simulated microseconds."""

    def __init__(self, config: LinkConfig | None = None, record: bool = False):
        self.config = config or LinkConfig()
        self._rng = random.Random(self.config.seed)
        self._queue: list[tuple[float, int, bytes]] = []
        self._held: list[_Held] = []
        self._seq = 0
        self._busy_until = 0.0
        self.record = record
        self.trace: list[tuple[float, bytes]] = []
        self.stats = dict.fromkeys(
            ("sent", "delivered", "dropped", "duplicated", "corrupted", "reordered"), 0)

    @property
    def in_flight(self) -> int:
        return len(self._queue) + len(self._held)

    def conserved(self) -> bool:
        s = self.stats
        return s["delivered"] + s["dropped"] + self.in_flight == s["sent"] + s["duplicated"]

    def link_send(self, frame: bytes, now: float) -> None:
        cfg = self.config
        if len(frame) > cfg.mtu + ETH_LEN:
            raise ValueError(f"frame of {len(frame)} bytes exceeds mtu {cfg.mtu} + 14")
        rng = self._rng
        self.stats["sent"] += 1
        if self.record:
            self.trace.append((now, bytes(frame)))
        copies = [frame]
        if cfg.dup_prob and rng.random() < cfg.dup_prob:
            self.stats["duplicated"] += 1
            copies.append(frame)
        for f in copies:
            if cfg.loss_prob and rng.random() < cfg.loss_prob:
                self.stats["dropped"] += 1
                continue
            if cfg.corrupt_prob and rng.random() < cfg.corrupt_prob:
                f = self._corrupt(f)
                self.stats["corrupted"] += 1
            due = now + cfg.one_way_delay_us
            if cfg.bandwidth_bps:
                start = max(now, self._busy_until)
                self._busy_until = start + len(f) * 8 / cfg.bandwidth_bps * 1e6
                due = self._busy_until + cfg.one_way_delay_us
            if cfg.reorder_prob and rng.random() < cfg.reorder_prob:
                self.stats["reordered"] += 1
                k = rng.randint(1, cfg.reorder_window)
                self._held.append(_Held(f, due, k, due + cfg.reorder_hold_us))
                continue
            self._push(due, f)
            self._pass_held(due)

    def _push(self, due: float, frame: bytes) -> None:
        self._seq += 1
        heapq.heappush(self._queue, (due, self._seq, frame))

    def _pass_held(self, due: float) -> None:
        if not self._held:
            return
        keep = []
        for h in self._held:
            h.remaining -= 1
            if h.remaining <= 0:
                self._push(max(due, h.due), h.frame)
            else:
                keep.append(h)
        self._held = keep

    def _corrupt(self, frame: bytes) -> bytes:
        buf = bytearray(frame)
        span = len(buf) - ETH_LEN
        if span <= 0:
            return frame
        rng = self._rng
        while True:
            for _ in range(rng.randint(1, 8)):
                bit = rng.randrange(span * 8)
                buf[ETH_LEN + bit // 8] ^= 1 << (bit % 8)
            if not checksums_valid(bytes(buf)):
                return bytes(buf)

    def link_poll(self, now: float) -> list[bytes]:
        if self._held:
            keep = []
            for h in self._held:
                if h.expires <= now:
                    self._push(max(h.due, h.expires), h.frame)
                else:
                    keep.append(h)
            self._held = keep
        out = []
        q = self._queue
        while q and q[0][0] <= now:
            out.append(heapq.heappop(q)[2])
        self.stats["delivered"] += len(out)
        return out

    def next_event_time(self) -> float | None:
        times = [h.expires for h in self._held]
        if self._queue:
            times.append(self._queue[0][0])
        return min(times) if times else None

    def pcap_dump(self, path) -> None:
        pcap_dump(path, self.trace)


def pcap_bytes(records) -> bytes:
    """Serialize ``(time_us, frame)`` records as a classic little-endian pcap file."""
    parts = [_PCAP_HDR.pack(PCAP_MAGIC, 2, 4, 0, 0, 65535, LINKTYPE_ETHERNET)]
    for t, frame in records:
        us = int(round(t))
        parts.append(_PCAP_REC.pack(us // 1_000_000, us % 1_000_000, len(frame), len(frame)))
        parts.append(bytes(frame))
    return b"".join(parts)


def pcap_dump(path, records) -> None:
    with open(path, "wb") as fh:
        fh.write(pcap_bytes(records))
