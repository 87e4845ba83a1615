"""Public-side services: address reflectors, the rendezvous, and the relay."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from typing import Any

from ..events import EventLog, NullLog
from . import wire
from .nat import Addr, format_addr

log = logging.getLogger(__name__)


class _Loop:
    """Runs ``handle(data, src, sock)`` for every datagram on the given sockets."""

    def __init__(self, *socks, name: str = "service"):
        self.socks = socks
        self.name = name
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()

    def start(self):
        for sock in self.socks:
            t = threading.Thread(target=self._run, args=(sock,), name=self.name, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def _run(self, sock) -> None:
        while not self._stop.is_set():
            try:
                item = sock.recvfrom(0.1)
            except OSError:
                return
            if item is None:
                continue
            data, src = item
            try:
                self.handle(data, src, sock)
            except Exception:  # noqa: BLE001 - a bad datagram must not kill the service
                log.exception("%s: error handling datagram from %s", self.name, src)

    def handle(self, data: bytes, src: Addr, sock) -> None:  # pragma: no cover - abstract
        raise NotImplementedError

    def stop(self) -> None:
        self._stop.set()
        for sock in self.socks:
            sock.close()
        for t in self._threads:
            if t is not threading.current_thread():
                t.join(timeout=1)

    close = stop


class Reflector(_Loop):
    """Reports the source address it sees; can answer from an alternate port
    or hand the answer to a partner reflector on another address."""

    def __init__(self, primary, alternate, name: str = "reflector"):
        super().__init__(primary, alternate, name=name)
        self.primary = primary
        self.alternate = alternate
        self.partner: Reflector | None = None

    @property
    def address(self) -> Addr:
        return self.primary.local_addr

    def pair(self, other: "Reflector") -> None:
        self.partner, other.partner = other, self

    def handle(self, data, src, sock) -> None:
        op, txn, payload = wire.decode_stun(data)
        if op != wire.STUN_REQUEST:
            return
        flags = payload[0] if payload else 0
        reply = wire.encode_binding_response(txn, format_addr(src))
        if flags & wire.CHANGE_IP:
            if self.partner is None:
                return
            out = self.partner.alternate if flags & wire.CHANGE_PORT else self.partner.primary
        elif flags & wire.CHANGE_PORT:
            out = self.alternate
        else:
            out = sock
        try:
            out.sendto(reply, src)
        except OSError:
            pass


@dataclass
class Member:
    descriptor: dict[str, Any]
    addr: Addr


class Rendezvous(_Loop):
    """Group membership and signaling relay.

    Holds one authoritative roster per group. Handshake material is
    forwarded opaquely; session keys never pass through here.
    """

    def __init__(self, sock, events: EventLog | None = None):
        super().__init__(sock, name="rendezvous")
        self.sock = sock
        self.events = events or NullLog()
        self._lock = threading.Lock()
        self.groups: dict[str, dict[str, Member]] = {}
        self._group_of: dict[str, str] = {}

    @property
    def address(self) -> Addr:
        return self.sock.local_addr

    def members(self, group: str) -> set[str]:
        with self._lock:
            return set(self.groups.get(group, {}))

    def _send(self, addr: Addr, kind: wire.Sig, body: dict) -> None:
        try:
            self.sock.sendto(wire.encode_signal(kind, body), addr)
        except OSError:
            pass

    def handle(self, data, src, sock) -> None:
        kind, body = wire.decode_signal(data)
        if kind is wire.Sig.JOIN:
            self._join(body, src)
        elif kind is wire.Sig.LEAVE:
            self._leave(body.get("peer_id", ""), src)
        elif kind is wire.Sig.FORWARD:
            self._forward(body, src)

    def _join(self, desc: dict, src: Addr) -> None:
        group = desc.get("group", "")
        pid = desc.get("peer_id", "")
        if not group or not pid:
            self._send(src, wire.Sig.REJECT, {"reason": "group and peer_id are required"})
            return
        desc = dict(desc)
        desc.setdefault("reflexive", format_addr(src))
        with self._lock:
            members = self.groups.setdefault(group, {})
            existing = members.get(pid)
            if existing is not None and existing.descriptor["fingerprint"] != desc["fingerprint"]:
                reject = True
            else:
                reject = False
                # same identity re-joining (e.g. a restarted agent) replaces its entry
                members[pid] = Member(desc, src)
                self._group_of[pid] = group
                others = [m for p, m in members.items() if p != pid]
                roster = [m.descriptor for m in members.values()]
        if reject:
            self.events.emit("rendezvous.reject", peer=pid, reason="duplicate peer_id")
            self._send(src, wire.Sig.REJECT, {"reason": f"duplicate peer_id {pid!r}"})
            return
        self.events.emit("rendezvous.join", peer=pid, group=group, rejoin=existing is not None)
        self._send(src, wire.Sig.ROSTER, {"group": group, "members": roster})
        for m in others:
            self._send(m.addr, wire.Sig.PRESENCE, {"event": "join", "member": desc})

    def _leave(self, pid: str, src: Addr) -> None:
        with self._lock:
            group = self._group_of.get(pid)
            members = self.groups.get(group or "", {})
            m = members.get(pid)
            if m is None or m.addr != src:
                return
            del members[pid]
            del self._group_of[pid]
            others = list(members.values())
        self.events.emit("rendezvous.leave", peer=pid)
        for o in others:
            self._send(o.addr, wire.Sig.PRESENCE, {"event": "leave", "peer_id": pid})

    def _forward(self, body: dict, src: Addr) -> None:
        with self._lock:
            sender = next(
                (p for p, g in self._group_of.items() if self.groups[g][p].addr == src), None
            )
            target = None
            if sender is not None:
                target = self.groups[self._group_of[sender]].get(body.get("to", ""))
        if sender is None or target is None:
            return
        self._send(target.addr, wire.Sig.FORWARDED, {"from": sender, "kind": body.get("kind"), "body": body.get("body", {})})


class Relay(_Loop):
    """Forwards opaque frames between peers that cannot reach each other."""

    def __init__(self, sock, events: EventLog | None = None):
        super().__init__(sock, name="relay")
        self.sock = sock
        self.events = events or NullLog()
        self._alloc: dict[str, Addr] = {}
        self._lock = threading.Lock()
        self.forwarded = 0

    @property
    def address(self) -> Addr:
        return self.sock.local_addr

    def handle(self, data, src, sock) -> None:
        op, pid, payload = wire.decode_relay(data)
        if op == wire.RELAY_ALLOCATE:
            with self._lock:
                self._alloc[pid] = src
            sock.sendto(wire.encode_relay(wire.RELAY_ALLOCATED, pid), src)
        elif op == wire.RELAY_SEND:
            with self._lock:
                sender = next((p for p, a in self._alloc.items() if a == src), None)
                dst = self._alloc.get(pid)
            if sender is None or dst is None:
                return
            self.forwarded += 1
            try:
                sock.sendto(wire.encode_relay(wire.RELAY_DELIVER, sender, payload), dst)
            except OSError:
                pass
