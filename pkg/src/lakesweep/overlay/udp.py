"""Real UDP sockets with the same small interface as the simulated ones."""

from __future__ import annotations

import select
import socket

from .nat import Addr


class UdpSocket:
    def __init__(self, host: str = "0.0.0.0", port: int = 0):
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 4 * 1024 * 1024)
        self._sock.bind((host, port))
        self.closed = False

    @property
    def local_addr(self) -> Addr:
        host, port = self._sock.getsockname()[:2]
        return host, port

    def sendto(self, data: bytes, addr: Addr) -> None:
        if self.closed:
            raise OSError("socket closed")
        self._sock.sendto(data, (addr[0], int(addr[1])))

    def recvfrom(self, timeout: float | None = None):
        if self.closed:
            raise OSError("socket closed")
        try:
            ready, _, _ = select.select([self._sock], [], [], timeout)
            if not ready:
                return None
            data, addr = self._sock.recvfrom(65535)
        except ValueError:  # closed by another thread
            raise OSError("socket closed") from None
        return data, (addr[0], addr[1])

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self._sock.close()
