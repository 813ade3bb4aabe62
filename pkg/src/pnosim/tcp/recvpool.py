"""Out-of-order receive pool with in-place overlap trimming."""

from __future__ import annotations

import bisect
from collections import deque

from .block import PacketBlock


class RecvPool:
    """Segments ordered by sequence number, kept pairwise disjoint.

    Bytes already held win over newly arrived ones: an overlapping newcomer
    is cut down to the gaps it fills, sharing its buffer between the pieces.
    Contiguous data at ``rcv_nxt`` moves to ``assembled`` until read.
    """

    def __init__(self, rcv_nxt: int):
        self.rcv_nxt = rcv_nxt
        self._starts: list[int] = []
        self._blocks: list[PacketBlock] = []
        self.assembled: deque[PacketBlock] = deque()
        self.pooled_bytes = 0
        self.assembled_bytes = 0
        self.duplicates = 0
        self.trimmed_bytes = 0

    def __len__(self) -> int:
        return len(self._blocks)

    @property
    def held_bytes(self) -> int:
        return self.pooled_bytes + self.assembled_bytes

    def segments(self) -> list[tuple[int, int]]:
        return [(b.seq, b.seq + b.len) for b in self._blocks]

    def insert(self, block: PacketBlock, limit: int | None = None) -> int:
        """Add ``block``; returns the number of new bytes retained.

        ``limit`` is the absolute right edge of the receive window; bytes at
        or beyond it are cut off.
        """
        s = block.seq
        e = s + block.len
        if limit is not None and e > limit:
            e = limit
        if e <= self.rcv_nxt or e <= s:
            self.duplicates += 1
            return 0
        if s < self.rcv_nxt:
            s = self.rcv_nxt

        starts, blocks = self._starts, self._blocks
        pieces = []
        cur = s
        i = bisect.bisect_right(starts, s) - 1
        if i < 0:
            i = 0
        while i < len(blocks) and cur < e:
            ps = starts[i]
            pe = ps + blocks[i].len
            if pe <= cur:
                i += 1
                continue
            if ps >= e:
                break
            if ps > cur:
                pieces.append((cur, ps))
            cur = max(cur, pe)
            i += 1
        if cur < e:
            pieces.append((cur, e))
        if not pieces:
            self.duplicates += 1
            return 0

        kept = 0
        out = []
        for ps, pe in pieces:
            # every piece shares the newcomer's buffer; no payload byte moves
            piece = PacketBlock(block.buf, block.payload_off + (ps - block.seq), pe - ps, ps)
            piece.data_offset = piece.payload_off
            piece.tcp_off = block.tcp_off
            kept += pe - ps
            out.append(piece)
        self.trimmed_bytes += block.len - kept
        for piece in out:
            j = bisect.bisect_left(starts, piece.seq)
            starts.insert(j, piece.seq)
            blocks.insert(j, piece)
        self.pooled_bytes += kept
        self._drain()
        return kept

    def _drain(self) -> None:
        starts, blocks = self._starts, self._blocks
        n = 0
        while n < len(blocks) and starts[n] == self.rcv_nxt:
            b = blocks[n]
            self.assembled.append(b)
            self.rcv_nxt += b.len
            self.pooled_bytes -= b.len
            self.assembled_bytes += b.len
            n += 1
        if n:
            del starts[:n]
            del blocks[:n]

    def read(self, max_blocks: int) -> list[PacketBlock]:
        out = []
        while self.assembled and len(out) < max_blocks:
            b = self.assembled.popleft()
            self.assembled_bytes -= b.len
            out.append(b)
        return out

    def check(self) -> None:
        prev_end = self.rcv_nxt
        for s, b in zip(self._starts, self._blocks):
            assert s == b.seq and b.len > 0
            assert s >= prev_end, "overlap or data below rcv_nxt"
            prev_end = s + b.len
