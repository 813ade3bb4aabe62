"""Send window kept as a ring of packet blocks plus a sequence index."""

from __future__ import annotations

from typing import Iterator

from ..errors import WindowFull
from .block import PacketBlock
from .seq import MASK


class SendWindow:
    """Ring of blocks from ``snd_una`` onwards.

    The first ``sent`` blocks have been transmitted at least once and are
    reachable through ``seq_index`` (wire sequence number -> ring slot); the
    rest are queued. ``cursor`` counts the blocks up to ``snd_nxt``; a
    timeout rewinds it to zero so blocks are resent from ``snd_una``.
    """

    def __init__(self, slots: int):
        if slots < 1:
            raise ValueError("send window needs at least one slot")
        self.slots = slots
        self._ring: list[PacketBlock | None] = [None] * slots
        self._head = 0
        self._count = 0
        self.cursor = 0
        self.sent = 0
        self.seq_index: dict[int, int] = {}

    def __len__(self) -> int:
        return self._count

    @property
    def free_slots(self) -> int:
        return self.slots - self._count

    def push(self, block: PacketBlock) -> None:
        if self._count == self.slots:
            raise WindowFull("send window ring exhausted")
        self._ring[(self._head + self._count) % self.slots] = block
        self._count += 1

    def first(self) -> PacketBlock | None:
        return self._ring[self._head] if self._count else None

    def last(self) -> PacketBlock | None:
        return self._ring[(self._head + self._count - 1) % self.slots] if self._count else None

    def next_to_send(self) -> PacketBlock | None:
        if self.cursor < self._count:
            return self._ring[(self._head + self.cursor) % self.slots]
        return None

    def mark_sent(self) -> PacketBlock:
        """Advance the cursor past the block returned by ``next_to_send``."""
        idx = (self._head + self.cursor) % self.slots
        block = self._ring[idx]
        self.cursor += 1
        if self.cursor > self.sent:
            self.sent = self.cursor
            self.seq_index[block.seq & MASK] = idx
        return block

    def rewind(self) -> None:
        self.cursor = 0

    def release_acked(self, ack_abs: int) -> list[PacketBlock]:
        """Drop every block whose end is covered by ``ack_abs``."""
        out = []
        while self._count:
            block = self._ring[self._head]
            if block.end > ack_abs:
                break
            if self.sent:
                self.seq_index.pop(block.seq & MASK, None)
                self.sent -= 1
            self._ring[self._head] = None
            self._head = (self._head + 1) % self.slots
            self._count -= 1
            self.cursor = max(self.cursor - 1, 0)
            out.append(block)
        return out

    def lookup(self, wire_seq: int) -> PacketBlock | None:
        idx = self.seq_index.get(wire_seq & MASK)
        return None if idx is None else self._ring[idx]

    def unacked(self) -> Iterator[PacketBlock]:
        for i in range(self.sent):
            yield self._ring[(self._head + i) % self.slots]

    def queued(self) -> Iterator[PacketBlock]:
        for i in range(self.sent, self._count):
            yield self._ring[(self._head + i) % self.slots]

    def check(self) -> None:
        """Assert index coherence: index keys are exactly the sent, unacked blocks."""
        expect = {b.seq & MASK for b in self.unacked()}
        assert set(self.seq_index) == expect, (sorted(self.seq_index), sorted(expect))
        for key, idx in self.seq_index.items():
            assert self._ring[idx].seq & MASK == key
        assert 0 <= self.cursor <= self._count and self.sent <= self._count
