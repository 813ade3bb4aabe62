"""Exception types shared across the host and NIC domains."""

from __future__ import annotations

import errno as _errno


class PnoError(Exception):
    """Base class for every error raised by this package."""


# -- DMA engine -------------------------------------------------------------

class QueueFull(PnoError):
    pass


class RangeError(PnoError, ValueError):
    pass


class EmptyBatch(PnoError, ValueError):
    pass


# -- message rings ----------------------------------------------------------

class RingFull(PnoError):
    pass


class InvalidFlag(PnoError, ValueError):
    pass


class AlreadyCommitted(PnoError):
    pass


class NotSynchronousKind(PnoError):
    pass


class DataRingFull(PnoError):
    pass


class EmptyPayload(PnoError, ValueError):
    pass


class OrderingViolation(PnoError):
    """Stream metadata was about to be published ahead of the data it names."""


# -- TCP engine -------------------------------------------------------------

class WindowFull(PnoError):
    pass


class ConnClosed(PnoError):
    pass


class UnknownSeq(PnoError, KeyError):
    pass


# -- POSIX-shaped errors ----------------------------------------------------
# These carry an errno so callers can treat them like the OSErrors raised by
# the stdlib socket module.

class SocketError(PnoError, OSError):
    default_errno = _errno.EIO

    def __init__(self, msg: str = "", err: int | None = None):
        code = self.default_errno if err is None else err
        OSError.__init__(self, code, msg or _errno.errorcode.get(code, "error"))


class WouldBlock(SocketError, BlockingIOError):
    default_errno = _errno.EAGAIN


class BadFd(SocketError):
    default_errno = _errno.EBADF


class BadEpfd(BadFd):
    pass


class AddrInUse(SocketError):
    default_errno = _errno.EADDRINUSE


class NoRoute(SocketError):
    default_errno = _errno.EHOSTUNREACH


class ConnRefused(SocketError):
    default_errno = _errno.ECONNREFUSED


class ConnReset(SocketError):
    default_errno = _errno.ECONNRESET


def from_errno(err: int, msg: str = "") -> SocketError:
    """Map a negative-errno ring return value onto the matching exception."""
    err = abs(err)
    for cls in (WouldBlock, BadFd, AddrInUse, NoRoute, ConnRefused, ConnReset):
        if cls.default_errno == err:
            return cls(msg, err)
    return SocketError(msg, err)
