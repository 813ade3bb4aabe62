"""NewReno congestion control (RFC 5681/6582) and RTO estimation (RFC 6298)."""

from __future__ import annotations


class RtoEstimator:
    def __init__(self, initial_rto_us: float, min_rto_us: float, max_rto_us: float,
                 granularity_us: float = 10.0):
        self.min_rto = min_rto_us
        self.max_rto = max_rto_us
        self.granularity = granularity_us
        self.srtt: float | None = None
        self.rttvar = 0.0
        self.rto = min(max(initial_rto_us, min_rto_us), max_rto_us)

    def sample(self, rtt_us: float) -> None:
        if self.srtt is None:
            self.srtt = rtt_us
            self.rttvar = rtt_us / 2
        else:
            self.rttvar = 0.75 * self.rttvar + 0.25 * abs(self.srtt - rtt_us)
            self.srtt = 0.875 * self.srtt + 0.125 * rtt_us
        self.rto = self._clamp(self.srtt + max(self.granularity, 4 * self.rttvar))

    def recompute(self) -> None:
        """Drop any backoff once new data is acknowledged."""
        if self.srtt is not None:
            self.rto = self._clamp(self.srtt + max(self.granularity, 4 * self.rttvar))

    def backoff(self) -> None:
        self.rto = self._clamp(self.rto * 2)

    def _clamp(self, v: float) -> float:
        return min(max(v, self.min_rto), self.max_rto)


class NewReno:
    """Byte-counted congestion window."""

    def __init__(self, mss: int, initial_cwnd_segments: int = 10):
        self.mss = mss
        self.cwnd = initial_cwnd_segments * mss
        self.ssthresh = 1 << 30
        self.dup_acks = 0
        self.in_recovery = False
        self.recover = 0

    def on_new_ack(self, acked: int, snd_una: int, flight: int) -> bool:
        """Update for an ACK that advanced snd_una; True means partial ACK (retransmit next hole)."""
        self.dup_acks = 0
        if self.in_recovery:
            if snd_una >= self.recover:
                self.in_recovery = False
                self.cwnd = max(min(self.ssthresh, flight + self.mss), self.mss)
                return False
            # partial ack: deflate by the amount acked, then add back one segment
            self.cwnd = max(self.cwnd - acked + self.mss, self.mss)
            return True
        if self.cwnd < self.ssthresh:
            self.cwnd += min(acked, self.mss)
        else:
            self.cwnd += max(1, self.mss * self.mss // self.cwnd)
        return False

    def on_dup_ack(self, flight: int, snd_max: int) -> bool:
        """Count a duplicate ACK; True exactly when fast retransmit should fire."""
        self.dup_acks += 1
        if self.in_recovery:
            self.cwnd += self.mss
            return False
        if self.dup_acks == 3:
            self.ssthresh = max(flight // 2, 2 * self.mss)
            self.cwnd = self.ssthresh + 3 * self.mss
            self.in_recovery = True
            self.recover = snd_max
            return True
        return False

    def on_timeout(self, flight: int, snd_max: int) -> None:
        self.ssthresh = max(flight // 2, 2 * self.mss)
        self.cwnd = self.mss
        self.dup_acks = 0
        self.in_recovery = False
        self.recover = snd_max
