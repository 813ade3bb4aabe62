"""Serial-number arithmetic on 32-bit TCP sequence numbers."""

MOD = 1 << 32
MASK = MOD - 1
HALF = 1 << 31


def seq_add(a: int, n: int) -> int:
    return (a + n) & MASK


def seq_diff(a: int, b: int) -> int:
    """Signed distance ``a - b`` modulo 2**32."""
    d = (a - b) & MASK
    return d - MOD if d >= HALF else d


def seq_lt(a: int, b: int) -> bool:
    return seq_diff(a, b) < 0


def seq_leq(a: int, b: int) -> bool:
    return seq_diff(a, b) <= 0


def unwrap(wire: int, near: int) -> int:
    """Absolute (unbounded) sequence number for ``wire`` closest to ``near``."""
    return near + seq_diff(wire, near & MASK)
