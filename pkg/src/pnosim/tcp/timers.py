"""Hashed timer wheel keyed by (owner, kind)."""

from __future__ import annotations

import heapq
import math


class TimerWheel:
    """Coarse buckets of ``granularity_us``; a timer only fires once ``now >= deadline``.

    Each (owner, kind) pair has at most one live timer. Rescheduling or
    cancelling bumps a generation number so stale bucket entries are skipped.
    """

    def __init__(self, granularity_us: float = 10.0):
        self.granularity_us = granularity_us
        self._buckets: dict[int, list[tuple]] = {}
        self._heap: list[int] = []
        self._live: dict[tuple, tuple[int, float]] = {}
        self._gen = 0

    def __len__(self) -> int:
        return len(self._live)

    def schedule(self, owner, kind: str, deadline: float) -> None:
        self._gen += 1
        key = (owner, kind)
        self._live[key] = (self._gen, deadline)
        b = math.floor(deadline / self.granularity_us)
        bucket = self._buckets.get(b)
        if bucket is None:
            self._buckets[b] = bucket = []
            heapq.heappush(self._heap, b)
        bucket.append((deadline, self._gen, owner, kind))

    def cancel(self, owner, kind: str) -> None:
        self._live.pop((owner, kind), None)

    def cancel_all(self, owner) -> None:
        for key in [k for k in self._live if k[0] is owner]:
            del self._live[key]

    def pending(self, owner, kind: str) -> float | None:
        live = self._live.get((owner, kind))
        return live[1] if live else None

    def next_deadline(self) -> float | None:
        while self._heap:
            b = self._heap[0]
            live = [e[0] for e in self._buckets[b]
                    if self._live.get((e[2], e[3]), (None,))[0] == e[1]]
            if live:
                return min(live)
            heapq.heappop(self._heap)
            del self._buckets[b]
        return None

    def expire(self, now: float) -> list[tuple]:
        """Pop every live timer with ``deadline <= now`` as (owner, kind, deadline)."""
        fired = []
        limit = math.floor(now / self.granularity_us)
        while self._heap and self._heap[0] <= limit:
            b = self._heap[0]
            bucket = self._buckets[b]
            keep = []
            for entry in bucket:
                deadline, gen, owner, kind = entry
                live = self._live.get((owner, kind))
                if live is None or live[0] != gen:
                    continue
                if deadline <= now:
                    del self._live[(owner, kind)]
                    fired.append((owner, kind, deadline))
                else:
                    keep.append(entry)
            if keep:
                self._buckets[b] = keep
                break
            heapq.heappop(self._heap)
            del self._buckets[b]
        fired.sort(key=lambda f: f[2])
        return fired
