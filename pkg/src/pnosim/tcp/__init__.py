from .block import BLOCK_CAPACITY, HEADROOM, PacketBlock
from .conn import Listener, TcpConfig, TcpConn, TcpState
from .recvpool import RecvPool
from .stack import TcpStack, rss_core
from .timers import TimerWheel
from .window import SendWindow

__all__ = [
    "BLOCK_CAPACITY", "HEADROOM", "Listener", "PacketBlock", "RecvPool", "SendWindow",
    "TcpConfig", "TcpConn", "TcpStack", "TcpState", "TimerWheel", "rss_core",
]
