"""In-process datagram network with pluggable NAT boxes.

Hosts are either public (reachable at their own address) or sit behind a
:class:`NatBox` that rewrites outbound source addresses and filters
inbound traffic according to a :class:`~lakesweep.overlay.nat.NatPolicy`.
Delivery is immediate, lossless and FIFO per socket unless a tap drops or
rewrites a datagram.
"""

from __future__ import annotations

import itertools
import queue
import random
import threading
from dataclasses import dataclass, field
from typing import Callable

from ..overlay.nat import Addr, Filtering, Mapping, NatClass, NatPolicy

# tap(src, dst, data) -> data to forward, or None to drop
Tap = Callable[[Addr, Addr, bytes], "bytes | None"]


class SimSocket:
    def __init__(self, host: "SimHost", port: int):
        self.host = host
        self.port = port
        self._inbox: queue.Queue = queue.Queue()
        self.closed = False

    @property
    def local_addr(self) -> Addr:
        return (self.host.ip, self.port)

    def sendto(self, data: bytes, addr: Addr) -> None:
        if self.closed:
            raise OSError("socket closed")
        self.host.network._send(self, bytes(data), (addr[0], int(addr[1])))

    def recvfrom(self, timeout: float | None = None):
        if self.closed:
            raise OSError("socket closed")
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            return None
        if item is None:
            raise OSError("socket closed")
        return item

    def _deliver(self, data: bytes, src: Addr) -> None:
        if not self.closed:
            self._inbox.put((data, src))

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self._inbox.put(None)
            self.host._sockets.pop(self.port, None)


class SimHost:
    def __init__(self, network: "SimNetwork", ip: str, nat: "NatBox | None" = None):
        self.network = network
        self.ip = ip
        self.nat = nat
        self._sockets: dict[int, SimSocket] = {}
        self._ports = itertools.count(40000)
        self._lock = threading.Lock()

    def socket(self, port: int | None = None) -> SimSocket:
        with self._lock:
            if port is None:
                port = next(p for p in self._ports if p not in self._sockets)
            if port in self._sockets:
                raise OSError(f"{self.ip}:{port} already bound")
            sock = SimSocket(self, port)
            self._sockets[port] = sock
            return sock

    def kill(self) -> None:
        """Abruptly close every socket on the host."""
        for sock in list(self._sockets.values()):
            sock.close()


@dataclass
class _Binding:
    private: Addr
    dest: Addr | None  # only for endpoint-dependent mappings
    allowed_ips: set = field(default_factory=set)
    allowed_addrs: set = field(default_factory=set)


class NatBox:
    def __init__(self, network: "SimNetwork", public_ip: str, policy: NatPolicy, seed: int = 0, index: int = 0):
        if policy.nat_class is NatClass.OPEN:
            raise ValueError("an OPEN host has no NAT box; use SimNetwork.public_host")
        self.network = network
        self.public_ip = public_ip
        self.policy = policy
        self._hosts: dict[str, SimHost] = {}
        self._by_key: dict[tuple, int] = {}
        self._by_port: dict[int, _Binding] = {}
        self._lock = threading.Lock()
        self._next_port = 50000
        self._rng = random.Random(seed)
        self._private_net = itertools.count(2)
        self._index = index
        self.dropped = 0

    def host(self, private_ip: str | None = None) -> SimHost:
        ip = private_ip or f"10.{self._index % 250}.0.{next(self._private_net)}"
        h = SimHost(self.network, ip, self)
        self._hosts[ip] = h
        return h

    def _alloc_port(self) -> int:
        if self.policy.port_allocation == "random":
            while True:
                p = self._rng.randrange(20000, 60000)
                if p not in self._by_port:
                    return p
        while self._next_port in self._by_port:
            self._next_port += 1
        p = self._next_port
        self._next_port += 1
        return p

    def outbound(self, private: Addr, dst: Addr) -> Addr:
        dependent = self.policy.mapping is Mapping.ENDPOINT_DEPENDENT
        key = (private, dst) if dependent else (private,)
        with self._lock:
            port = self._by_key.get(key)
            if port is None:
                port = self._alloc_port()
                self._by_key[key] = port
                self._by_port[port] = _Binding(private, dst if dependent else None)
            b = self._by_port[port]
            b.allowed_ips.add(dst[0])
            b.allowed_addrs.add(dst)
        return (self.public_ip, port)

    def inbound(self, src: Addr, port: int) -> Addr | None:
        with self._lock:
            b = self._by_port.get(port)
            if b is None:
                self.dropped += 1
                return None
            f = self.policy.filtering
            if b.dest is not None and src != b.dest:
                ok = False
            elif f is Filtering.NONE:
                ok = True
            elif f is Filtering.ADDRESS:
                ok = src[0] in b.allowed_ips
            else:
                ok = src in b.allowed_addrs
            if not ok:
                self.dropped += 1
                return None
            return b.private


class SimNetwork:
    def __init__(self, seed: int = 0):
        self.seed = seed
        self._public: dict[str, SimHost] = {}
        self._nats: dict[str, NatBox] = {}
        self._taps: list[Tap] = []
        self._ips = itertools.count(10)
        self._lock = threading.Lock()
        self.delivered = 0
        self.dropped = 0

    def _fresh_ip(self) -> str:
        n = next(self._ips)
        return f"198.51.{n // 250}.{n % 250 + 1}"

    def public_host(self, ip: str | None = None) -> SimHost:
        ip = ip or self._fresh_ip()
        with self._lock:
            if ip in self._public or ip in self._nats:
                raise ValueError(f"address {ip} in use")
            h = SimHost(self, ip)
            self._public[ip] = h
            return h

    def nat(self, policy: NatPolicy | NatClass | str, public_ip: str | None = None) -> NatBox:
        if not isinstance(policy, NatPolicy):
            policy = NatPolicy.of(policy)
        ip = public_ip or self._fresh_ip()
        with self._lock:
            box = NatBox(self, ip, policy, seed=self.seed + len(self._nats), index=len(self._nats))
            self._nats[ip] = box
            return box

    def host_behind(self, nat_class: NatClass | str) -> SimHost:
        """A host with the given NAT class (OPEN means a public host)."""
        nat_class = NatClass(nat_class)
        if nat_class is NatClass.OPEN:
            return self.public_host()
        return self.nat(nat_class).host()

    def add_tap(self, tap: Tap) -> Tap:
        self._taps.append(tap)
        return tap

    def remove_tap(self, tap: Tap) -> None:
        if tap in self._taps:
            self._taps.remove(tap)

    def _send(self, sock: SimSocket, data: bytes, dst: Addr) -> None:
        host = sock.host
        src = sock.local_addr
        if host.nat is not None:
            src = host.nat.outbound(src, dst)
        for tap in list(self._taps):
            data = tap(src, dst, data)
            if data is None:
                self.dropped += 1
                return
        target = self._resolve(src, dst)
        if target is None:
            self.dropped += 1
            return
        self.delivered += 1
        target._deliver(data, src)

    def _resolve(self, src: Addr, dst: Addr) -> SimSocket | None:
        ip, port = dst
        host = self._public.get(ip)
        if host is None:
            box = self._nats.get(ip)
            if box is None:
                return None
            private = box.inbound(src, port)
            if private is None:
                return None
            host = box._hosts.get(private[0])
            if host is None:
                return None
            port = private[1]
        return host._sockets.get(port)
