"""Overlay peers and the encrypted, reliable links between them.

A peer owns one datagram socket. Everything it talks to (reflectors, the
rendezvous, the relay, other peers) shares that socket, so the NAT mapping
the rendezvous and reflectors observe is the one other peers punch toward.

Link setup:

1. the initiator sends a signed offer (ephemeral X25519 key, candidate
   addresses) through the rendezvous; the responder verifies it against the
   fingerprint pinned in its roster and answers the same way;
2. both sides derive directional ChaCha20-Poly1305 keys and punch toward
   every known candidate, learning extra candidates from punches they
   receive;
3. each side reports its punch outcome through the rendezvous. The link is
   DIRECT if both sides got a punch acknowledged, otherwise RELAYED.

Messages are split into frames, numbered, acknowledged cumulatively and
retransmitted until acknowledged, so delivery is exactly once and in order.
"""

from __future__ import annotations

import enum
import logging
import os
import queue
import secrets
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable

from ..errors import (
    ClassificationUnavailable,
    ConnectivityError,
    LinkDown,
    RegistrationRejected,
    SecurityError,
    TransportError,
)
from ..events import EventLog, NullLog
from . import wire
from .crypto import Ephemeral, Identity, SessionKeys, transcript, verify
from .nat import Addr, NatClass, ProbeResult, classify_nat, format_addr, parse_addr

log = logging.getLogger(__name__)

_U64 = struct.Struct(">Q")


@dataclass(frozen=True)
class PeerDescriptor:
    peer_id: str
    group: str
    fingerprint: bytes
    public_key: bytes
    reflexive_endpoint: str = ""
    nat_class: NatClass | None = None
    candidates: tuple[str, ...] = ()
    instance: str = ""  # changes every time the peer process restarts

    def __post_init__(self) -> None:
        if not self.peer_id:
            raise ValueError("peer_id must be non-empty")
        if not self.fingerprint:
            raise ValueError("fingerprint must be non-empty")

    def to_body(self) -> dict[str, Any]:
        return {
            "peer_id": self.peer_id,
            "group": self.group,
            "fingerprint": self.fingerprint.hex(),
            "public_key": self.public_key.hex(),
            "reflexive": self.reflexive_endpoint,
            "nat_class": self.nat_class.value if self.nat_class else None,
            "candidates": list(self.candidates),
            "instance": self.instance,
        }

    @classmethod
    def from_body(cls, body: dict[str, Any]) -> "PeerDescriptor":
        nc = body.get("nat_class")
        return cls(
            peer_id=body["peer_id"],
            group=body.get("group", ""),
            fingerprint=bytes.fromhex(body["fingerprint"]),
            public_key=bytes.fromhex(body.get("public_key", "")),
            reflexive_endpoint=body.get("reflexive", ""),
            nat_class=NatClass(nc) if nc else None,
            candidates=tuple(body.get("candidates", ())),
            instance=body.get("instance", ""),
        )


class LinkKind(str, enum.Enum):
    DIRECT = "DIRECT"
    RELAYED = "RELAYED"


class LinkState(str, enum.Enum):
    SETUP = "SETUP"
    UP = "UP"
    DOWN = "DOWN"


@dataclass
class LinkConfig:
    rto: float = 0.05
    max_rto: float = 0.5
    max_tries: int = 10
    window: int = 128
    chunk: int = 16 * 1024
    punch_interval: float = 0.02
    punch_timeout: float = 1.0
    setup_timeout: float = 6.0
    probe_timeout: float = 0.25


class Receipt:
    """Returned by :meth:`OverlayLink.send`; ``wait()`` blocks until acknowledged."""

    def __init__(self, link: "OverlayLink", message_no: int, last_seq: int):
        self.link = link
        self.message_no = message_no
        self.last_seq = last_seq

    @property
    def acked(self) -> bool:
        return self.link._acked >= self.last_seq

    def wait(self, timeout: float | None = None) -> "Receipt":
        deadline = None if timeout is None else time.monotonic() + timeout
        with self.link._cv:
            while not self.acked:
                if self.link.state is LinkState.DOWN:
                    raise LinkDown(f"link to {self.link.remote} went down")
                left = None if deadline is None else deadline - time.monotonic()
                if left is not None and left <= 0:
                    raise TransportError("timed out waiting for acknowledgement")
                self.link._cv.wait(left if left is not None else 0.1)
        return self


@dataclass
class _Pending:
    data: bytes
    sent_at: float
    tries: int = 1


class OverlayLink:
    """One end of an encrypted tunnel between two peers."""

    def __init__(self, peer: "OverlayPeer", remote: str, link_id: bytes, initiator: bool):
        self.peer = peer
        self.local = peer.peer_id
        self.remote = remote
        self.link_id = link_id
        self.initiator = initiator
        self.kind: LinkKind | None = None
        self.relay: Addr | None = None
        self.remote_addr: Addr | None = None
        self.state = LinkState.SETUP
        self.error: Exception | None = None
        self.keys: SessionKeys | None = None
        self.remote_instance = ""
        # setup
        self.ephemeral = Ephemeral()
        self.candidates: list[Addr] = []
        self.punch_ok = False
        self.remote_punch: bool | None = None
        self._punch_event = threading.Event()
        # reliability
        self._cv = threading.Condition()
        self._send_lock = threading.Lock()
        self._next_seq = 1
        self._acked = 0
        self._unacked: dict[int, _Pending] = {}
        self._expected = 1
        self._reorder: dict[int, bytes] = {}
        self._partial: list[bytes] = []
        # counters
        self.messages_sent = 0
        self.messages_received = 0
        self.frames_sent = 0
        self.frames_received = 0
        self.retransmits = 0
        self.integrity_failures = 0

    def __repr__(self) -> str:
        kind = self.kind.value if self.kind else "?"
        return f"<OverlayLink {self.local}->{self.remote} {kind} {self.state.value}>"

    @property
    def up(self) -> bool:
        return self.state is LinkState.UP

    # -- sending ---------------------------------------------------------

    def _frame(self, seq: int, plaintext: bytes) -> bytes:
        assert self.keys is not None
        head = wire.DataFrame(self.link_id, seq, b"\0" * 12, b"")
        nonce, sealed = self.keys.seal(plaintext, head.associated_data())
        return wire.DataFrame(self.link_id, seq, nonce, sealed).encode()

    def _transmit(self, datagram: bytes, addr: Addr | None = None) -> None:
        sock = self.peer.sock
        try:
            if addr is not None:
                sock.sendto(datagram, addr)
            elif self.kind is LinkKind.RELAYED:
                sock.sendto(wire.encode_relay(wire.RELAY_SEND, self.remote, datagram), self.relay)
            elif self.remote_addr is not None:
                sock.sendto(datagram, self.remote_addr)
        except OSError:
            pass

    def send(self, payload: bytes, wait: bool = False, timeout: float | None = None) -> Receipt:
        """Queue ``payload`` for reliable, ordered delivery."""
        if self.state is not LinkState.UP:
            raise LinkDown(f"link to {self.remote} is {self.state.value}")
        payload = bytes(payload)
        cfg = self.peer.config
        chunks = [payload[i:i + cfg.chunk] for i in range(0, len(payload), cfg.chunk)] or [b""]
        with self._send_lock:
            for n, chunk in enumerate(chunks):
                flag = wire.Inner.END if n == len(chunks) - 1 else wire.Inner.MORE
                with self._cv:
                    while len(self._unacked) >= cfg.window and self.state is LinkState.UP:
                        self._cv.wait(0.1)
                    if self.state is not LinkState.UP:
                        raise LinkDown(f"link to {self.remote} went down")
                    seq = self._next_seq
                    self._next_seq += 1
                    data = self._frame(seq, bytes([flag]) + chunk)
                    self._unacked[seq] = _Pending(data, time.monotonic())
                    self.frames_sent += 1
                self._transmit(data)
            self.messages_sent += 1
            receipt = Receipt(self, self.messages_sent, seq)
        if wait:
            receipt.wait(timeout)
        return receipt

    def _control(self, kind: wire.Inner, body: bytes = b"", addr: Addr | None = None) -> None:
        if self.keys is not None:
            self._transmit(self._frame(0, bytes([kind]) + body), addr)

    def _retransmit_due(self, now: float) -> None:
        cfg = self.peer.config
        resend = []
        with self._cv:
            if self.state is not LinkState.UP:
                return
            for seq, p in self._unacked.items():
                rto = min(cfg.rto * (2 ** (p.tries - 1)), cfg.max_rto)
                if now - p.sent_at < rto:
                    continue
                if p.tries >= cfg.max_tries:
                    break
                p.tries += 1
                p.sent_at = now
                resend.append(p.data)
            else:
                for data in resend:
                    self.retransmits += 1
                    self._transmit(data)
                return
        self.peer._link_down(self, LinkDown(f"no acknowledgement from {self.remote}"))

    # -- receiving -------------------------------------------------------

    def _on_ack(self, upto: int) -> None:
        with self._cv:
            if upto <= self._acked:
                return
            for seq in [s for s in self._unacked if s <= upto]:
                del self._unacked[seq]
            self._acked = upto
            self._cv.notify_all()

    def _on_data(self, seq: int, plaintext: bytes) -> list[bytes]:
        """Returns the messages completed by this frame, in order."""
        done: list[bytes] = []
        with self._cv:
            if seq >= self._expected and seq not in self._reorder:
                self._reorder[seq] = plaintext
            while self._expected in self._reorder:
                frame = self._reorder.pop(self._expected)
                self._expected += 1
                self._partial.append(frame[1:])
                if frame[0] == wire.Inner.END:
                    done.append(b"".join(self._partial))
                    self._partial = []
            ack = self._expected - 1
        self._control(wire.Inner.ACK, _U64.pack(ack))
        self.messages_received += len(done)
        return done

    def close(self) -> None:
        self.peer.close_link(self)


Handler = Callable[..., None]


class OverlayPeer:
    """A member of an overlay group."""

    def __init__(
        self,
        sock,
        peer_id: str,
        group: str,
        rendezvous: Addr,
        reflectors: tuple[Addr, Addr] | None = None,
        relay: Addr | None = None,
        identity: Identity | None = None,
        config: LinkConfig | None = None,
        events: EventLog | None = None,
    ):
        self.sock = sock
        self.peer_id = peer_id
        self.group = group
        self.rendezvous = tuple(rendezvous)
        self.reflectors = reflectors
        self.relay = tuple(relay) if relay else None
        self.identity = identity or Identity()
        self.config = config or LinkConfig()
        self.events = events or NullLog()
        self.instance = secrets.token_hex(8)
        self.nat_class: NatClass | None = None
        self.reflexive: Addr | None = None
        self.roster: dict[str, PeerDescriptor] = {}
        self.integrity_failures = 0
        self.handshake_failures = 0

        self._lock = threading.RLock()
        self._cv = threading.Condition(self._lock)
        self._links: dict[str, OverlayLink] = {}
        self._by_id: dict[bytes, OverlayLink] = {}
        self._stun: dict[bytes, queue.Queue] = {}
        self._join_reply: queue.Queue = queue.Queue()
        self._relay_ready = threading.Event()
        self._inbox: queue.Queue = queue.Queue()
        self._message_handlers: list[Handler] = []
        self._link_handlers: list[Handler] = []
        self._presence_handlers: list[Handler] = []
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self.registered = False

    # -- lifecycle -------------------------------------------------------

    def start(self) -> "OverlayPeer":
        for target, name in ((self._recv_loop, "rx"), (self._timer_loop, "timer"), (self._deliver_loop, "deliver")):
            t = threading.Thread(target=target, name=f"{self.peer_id}-{name}", daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def join(self, timeout: float = 2.0, retries: int = 3) -> dict[str, PeerDescriptor]:
        """Classify the NAT (when reflectors are configured), then register."""
        if self.reflectors:
            try:
                self.classify()
            except ClassificationUnavailable:
                log.warning("%s: NAT classification unavailable", self.peer_id)
        roster = self.register(timeout, retries)
        if self.relay:
            self._ensure_relay(wait=False)
        return roster

    def leave(self) -> None:
        """Announce departure, close every link and stop."""
        if self.registered:
            self._signal(wire.Sig.LEAVE, {"peer_id": self.peer_id})
        for link in list(self._links.values()):
            if link.up:
                link._control(wire.Inner.CLOSE)
        self._shutdown()

    def kill(self) -> None:
        """Stop abruptly, as if the process had crashed."""
        self._shutdown()

    close = leave

    def _shutdown(self) -> None:
        self._stop.set()
        with self._lock:
            links = list(self._links.values())
        for link in links:
            self._link_down(link, LinkDown("peer stopped"), notify=False)
        try:
            self.sock.close()
        except OSError:
            pass
        self._inbox.put(None)
        for t in self._threads:
            if t is not threading.current_thread():
                t.join(timeout=2)

    # -- handlers --------------------------------------------------------

    def on_message(self, handler: Handler) -> None:
        """``handler(peer_id, payload)``, called from the delivery thread in link order."""
        self._message_handlers.append(handler)

    def on_link(self, handler: Handler) -> None:
        """``handler(event, link)`` with event ``"up"`` or ``"down"``."""
        self._link_handlers.append(handler)

    def on_presence(self, handler: Handler) -> None:
        """``handler(event, peer_id)`` with event ``"join"`` or ``"leave"``."""
        self._presence_handlers.append(handler)

    # -- descriptor / registration --------------------------------------

    def descriptor(self) -> PeerDescriptor:
        cands = []
        if self.reflexive:
            cands.append(format_addr(self.reflexive))
        local = format_addr(self.sock.local_addr)
        if local not in cands:
            cands.append(local)
        return PeerDescriptor(
            self.peer_id,
            self.group,
            self.identity.fingerprint,
            self.identity.public_key,
            format_addr(self.reflexive) if self.reflexive else "",
            self.nat_class,
            tuple(cands),
            self.instance,
        )

    def _signal(self, kind: wire.Sig, body: dict) -> None:
        try:
            self.sock.sendto(wire.encode_signal(kind, body), self.rendezvous)
        except OSError:
            pass

    def register(self, timeout: float = 2.0, retries: int = 3) -> dict[str, PeerDescriptor]:
        body = self.descriptor().to_body()
        while not self._join_reply.empty():
            self._join_reply.get_nowait()
        for _ in range(max(1, retries)):
            self._signal(wire.Sig.JOIN, body)
            try:
                kind, reply = self._join_reply.get(timeout=timeout)
            except queue.Empty:
                continue
            if kind is wire.Sig.REJECT:
                self.events.emit("overlay.rejected", peer=self.peer_id, reason=reply.get("reason"))
                raise RegistrationRejected(reply.get("reason", "registration rejected"))
            self.registered = True
            self.events.emit("overlay.registered", peer=self.peer_id, nat=self.nat_class and self.nat_class.value)
            return dict(self.roster)
        raise TransportError(f"rendezvous {format_addr(self.rendezvous)} unreachable")

    def members(self) -> set[str]:
        with self._lock:
            return set(self.roster)

    # -- NAT classification ---------------------------------------------

    def _probe(self, target: Addr, flags: int = 0, attempts: int = 2) -> Addr | None:
        for _ in range(attempts):
            txn = os.urandom(8)
            q: queue.Queue = queue.Queue()
            self._stun[txn] = q
            try:
                self.sock.sendto(wire.encode_binding_request(txn, flags), target)
                return parse_addr(q.get(timeout=self.config.probe_timeout).decode())
            except (queue.Empty, OSError, ValueError):
                continue
            finally:
                self._stun.pop(txn, None)
        return None

    def classify(self) -> NatClass:
        if not self.reflectors:
            raise ClassificationUnavailable("no reflectors configured")
        r1, r2 = self.reflectors
        mapped1 = self._probe(r1)
        changed_ip = self._probe(r1, wire.CHANGE_IP | wire.CHANGE_PORT, 1) is not None if mapped1 else False
        mapped2 = self._probe(r2)
        changed_port = self._probe(r1, wire.CHANGE_PORT, 1) is not None if mapped1 else False
        result = ProbeResult(self.sock.local_addr, mapped1, mapped2, changed_ip, changed_port)
        self.nat_class = classify_nat(result)
        self.reflexive = mapped1 or mapped2
        self.events.emit("overlay.classified", peer=self.peer_id, nat=self.nat_class.value)
        return self.nat_class

    # -- relay -----------------------------------------------------------

    def _ensure_relay(self, wait: bool = True, attempts: int = 3) -> bool:
        if self.relay is None:
            return False
        if self._relay_ready.is_set():
            return True
        for _ in range(attempts if wait else 1):
            try:
                self.sock.sendto(wire.encode_relay(wire.RELAY_ALLOCATE, self.peer_id), self.relay)
            except OSError:
                return False
            if not wait or self._relay_ready.wait(self.config.probe_timeout):
                break
        return self._relay_ready.is_set()

    # -- links -----------------------------------------------------------

    def link(self, peer_id: str) -> OverlayLink | None:
        with self._lock:
            return self._links.get(peer_id)

    def links(self) -> list[OverlayLink]:
        with self._lock:
            return list(self._links.values())

    def connect(self, peer_id: str, timeout: float | None = None) -> OverlayLink:
        """Return an established link to ``peer_id``, creating one if needed."""
        timeout = self.config.setup_timeout if timeout is None else timeout
        deadline = time.monotonic() + timeout
        with self._cv:
            current = self._links.get(peer_id)
            if current is None or current.state is LinkState.DOWN:
                # the presence notice for a fresh member may still be in flight
                while peer_id not in self.roster and time.monotonic() < deadline:
                    self._cv.wait(0.02)
                desc = self.roster.get(peer_id)
                if desc is None:
                    raise ConnectivityError(f"{peer_id} is not in the roster of {self.group}")
                current = self._new_link(peer_id, os.urandom(8), initiator=True)
                current.remote_instance = desc.instance
                self._send_offer(current)
            watched = current
            while True:
                link = self._links.get(peer_id)
                if link is not None and link.state is LinkState.UP:
                    return link
                if link is watched and link.state is LinkState.DOWN or link is None:
                    raise watched.error or ConnectivityError(f"no link to {peer_id}")
                if link is not watched and link.state is not LinkState.DOWN:
                    watched = link  # superseded by a crossing offer
                left = deadline - time.monotonic()
                if left <= 0:
                    err = ConnectivityError(f"link setup to {peer_id} timed out")
                    self._link_down(watched, err, notify=False)
                    raise err
                self._cv.wait(min(left, 0.1))

    def send_to(self, peer_id: str, payload: bytes, wait: bool = False, timeout: float | None = None) -> Receipt:
        link = self.link(peer_id)
        if link is None or link.state is not LinkState.UP:
            link = self.connect(peer_id)
        return link.send(payload, wait=wait, timeout=timeout)

    def close_link(self, link: OverlayLink) -> None:
        if link.up:
            link._control(wire.Inner.CLOSE)
        self._link_down(link, LinkDown("closed locally"))

    def _new_link(self, peer_id: str, link_id: bytes, initiator: bool) -> OverlayLink:
        link = OverlayLink(self, peer_id, link_id, initiator)
        old = self._links.get(peer_id)
        self._links[peer_id] = link
        self._by_id[link_id] = link
        if old is not None and old.state is not LinkState.DOWN:
            self._link_down(old, LinkDown("replaced by a new link"))
        return link

    def _link_down(self, link: OverlayLink, error: Exception, notify: bool = True) -> None:
        with self._cv:
            if link.state is LinkState.DOWN:
                return
            was_up = link.state is LinkState.UP
            link.state = LinkState.DOWN
            link.error = error
            self._by_id.pop(link.link_id, None)
            self._cv.notify_all()
        with link._cv:
            link._cv.notify_all()
        link._punch_event.set()
        self.events.emit("overlay.link_down", local=self.peer_id, remote=link.remote, reason=str(error))
        if was_up and notify:
            self._inbox.put(("link", "down", link))

    def _candidates(self, body: dict) -> list[Addr]:
        out = []
        for text in body.get("candidates", ()):
            try:
                out.append(parse_addr(text))
            except ValueError:
                pass
        return out

    def _handshake_body(self, link: OverlayLink, role: bytes) -> dict:
        eph = link.ephemeral.public
        sig = self.identity.sign(transcript(role, link.link_id, eph, self.peer_id, link.remote))
        return {
            "link_id": link.link_id.hex(),
            "eph": eph.hex(),
            "public_key": self.identity.public_key.hex(),
            "sig": sig.hex(),
            "candidates": list(self.descriptor().candidates),
            "instance": self.instance,
        }

    def _send_offer(self, link: OverlayLink) -> None:
        self.events.emit("overlay.offer", local=self.peer_id, remote=link.remote)
        self._forward(link.remote, "offer", self._handshake_body(link, b"offer"))

    def _forward(self, to: str, kind: str, body: dict) -> None:
        self._signal(wire.Sig.FORWARD, {"to": to, "kind": kind, "body": body})

    def _authenticate(self, sender: str, role: bytes, body: dict, receiver: str) -> bytes:
        """Check a handshake message against the roster's pinned fingerprint."""
        desc = self.roster.get(sender)
        if desc is None:
            raise SecurityError(f"{sender} is not in the roster")
        try:
            link_id = bytes.fromhex(body["link_id"])
            eph = bytes.fromhex(body["eph"])
            pub = bytes.fromhex(body["public_key"])
            sig = bytes.fromhex(body["sig"])
        except (KeyError, ValueError, TypeError):
            raise SecurityError("malformed handshake") from None
        verify(pub, desc.fingerprint, sig, transcript(role, link_id, eph, sender, receiver))
        return eph

    def _handshake_failed(self, remote: str, link_id_hex: str, error: SecurityError, tell_remote: bool) -> None:
        self.handshake_failures += 1
        self.events.emit("overlay.handshake_failed", local=self.peer_id, remote=remote, reason=str(error))
        if tell_remote:
            self._forward(remote, "reject", {"link_id": link_id_hex, "reason": str(error)})

    def _on_offer(self, sender: str, body: dict) -> None:
        try:
            eph = self._authenticate(sender, b"offer", body, self.peer_id)
        except SecurityError as exc:
            self._handshake_failed(sender, str(body.get("link_id", "")), exc, True)
            return
        with self._cv:
            mine = self._links.get(sender)
            if mine is not None and mine.state is LinkState.SETUP and mine.initiator and self.peer_id < sender:
                return  # crossing offers: the lower id keeps its own
            link = self._new_link(sender, bytes.fromhex(body["link_id"]), initiator=False)
            link.remote_instance = body.get("instance", "")
            link.keys = SessionKeys.derive(
                link.ephemeral.shared(eph), link.link_id, sender, self.peer_id, we_initiated=False
            )
            link.candidates = self._candidates(body)
        self._forward(sender, "answer", self._handshake_body(link, b"answer"))
        self._start_punch(link)

    def _on_answer(self, sender: str, body: dict) -> None:
        with self._lock:
            link = self._by_id.get(bytes.fromhex(body.get("link_id", "")))
        if link is None or link.remote != sender or not link.initiator or link.keys is not None:
            return
        try:
            eph = self._authenticate(sender, b"answer", body, self.peer_id)
        except SecurityError as exc:
            self._handshake_failed(sender, body["link_id"], exc, True)
            self._link_down(link, exc)
            return
        link.remote_instance = body.get("instance", link.remote_instance)
        link.keys = SessionKeys.derive(
            link.ephemeral.shared(eph), link.link_id, self.peer_id, sender, we_initiated=True
        )
        link.candidates = self._candidates(body)
        self._start_punch(link)

    def _on_reject(self, sender: str, body: dict) -> None:
        with self._lock:
            link = self._by_id.get(bytes.fromhex(body.get("link_id", "") or ""))
        if link is not None and link.remote == sender:
            self.handshake_failures += 1
            self._link_down(link, SecurityError(f"{sender} rejected the handshake: {body.get('reason')}"))

    def _on_punch_result(self, sender: str, body: dict) -> None:
        with self._lock:
            link = self._by_id.get(bytes.fromhex(body.get("link_id", "") or ""))
        if link is not None and link.remote == sender:
            link.remote_punch = bool(body.get("ok"))
            link._punch_event.set()

    def _start_punch(self, link: OverlayLink) -> None:
        t = threading.Thread(target=self._punch, args=(link,), name=f"{self.peer_id}-punch", daemon=True)
        t.start()

    def _punch(self, link: OverlayLink) -> None:
        cfg = self.config
        deadline = time.monotonic() + cfg.punch_timeout
        while not link.punch_ok and time.monotonic() < deadline and link.state is LinkState.SETUP:
            for addr in list(link.candidates):
                link._control(wire.Inner.PUNCH, addr=addr)
            time.sleep(cfg.punch_interval)
        if link.state is not LinkState.SETUP:
            return
        self._forward(link.remote, "punch", {"link_id": link.link_id.hex(), "ok": link.punch_ok})
        end = time.monotonic() + cfg.setup_timeout
        while link.remote_punch is None and link.state is LinkState.SETUP and time.monotonic() < end:
            link._punch_event.wait(0.05)
            link._punch_event.clear()
        if link.state is not LinkState.SETUP:
            return
        if link.remote_punch is None:
            self._link_down(link, ConnectivityError(f"{link.remote} never reported its punch result"))
            return
        if link.punch_ok and link.remote_punch:
            link.kind = LinkKind.DIRECT
        elif self._ensure_relay():
            link.kind = LinkKind.RELAYED
            link.relay = self.relay
        else:
            self._link_down(link, ConnectivityError(f"no direct path to {link.remote} and no relay"))
            return
        with self._cv:
            if link.state is not LinkState.SETUP:
                return
            link.state = LinkState.UP
            self._cv.notify_all()
        self.events.emit("overlay.link_up", local=self.peer_id, remote=link.remote, link_kind=link.kind.value)
        self._inbox.put(("link", "up", link))

    # -- threads -----------------------------------------------------------

    def _recv_loop(self) -> None:
        while not self._stop.is_set():
            try:
                item = self.sock.recvfrom(0.1)
            except OSError:
                return
            if item is None:
                continue
            data, src = item
            try:
                self._dispatch(data, tuple(src))
            except wire.WireError:
                pass
            except Exception:  # noqa: BLE001
                log.exception("%s: error handling datagram from %s", self.peer_id, src)

    def _dispatch(self, data: bytes, src: Addr) -> None:
        if not data:
            return
        ch = data[0]
        if ch == wire.CH_DATA:
            self._on_frame(data, src, relayed=False)
        elif ch == wire.CH_RELAY:
            op, pid, payload = wire.decode_relay(data)
            if op == wire.RELAY_DELIVER:
                self._on_frame(payload, src, relayed=True)
            elif op == wire.RELAY_ALLOCATED:
                self._relay_ready.set()
        elif ch == wire.CH_SIGNAL:
            if src != self.rendezvous:
                return
            self._on_signal(*wire.decode_signal(data))
        elif ch == wire.CH_STUN:
            op, txn, payload = wire.decode_stun(data)
            q = self._stun.get(txn)
            if op == wire.STUN_RESPONSE and q is not None:
                q.put(payload)

    def _on_signal(self, kind: wire.Sig, body: dict) -> None:
        if kind is wire.Sig.ROSTER:
            roster = {}
            for m in body.get("members", ()):
                d = PeerDescriptor.from_body(m)
                roster[d.peer_id] = d
            with self._lock:
                self.roster = roster
            self._join_reply.put((kind, body))
        elif kind is wire.Sig.REJECT:
            self._join_reply.put((kind, body))
        elif kind is wire.Sig.PRESENCE:
            if body.get("event") == "join":
                d = PeerDescriptor.from_body(body["member"])
                with self._cv:
                    self.roster[d.peer_id] = d
                    link = self._links.get(d.peer_id)
                    self._cv.notify_all()
                if link is not None and link.remote_instance and link.remote_instance != d.instance:
                    self._link_down(link, LinkDown(f"{d.peer_id} restarted"))
                self._inbox.put(("presence", "join", d.peer_id))
            elif body.get("event") == "leave":
                pid = body.get("peer_id", "")
                with self._lock:
                    self.roster.pop(pid, None)
                    link = self._links.get(pid)
                if link is not None:
                    self._link_down(link, LinkDown(f"{pid} left the group"))
                self._inbox.put(("presence", "leave", pid))
        elif kind is wire.Sig.FORWARDED:
            sender, sub, inner = body.get("from", ""), body.get("kind"), body.get("body") or {}
            handler = {
                "offer": self._on_offer,
                "answer": self._on_answer,
                "reject": self._on_reject,
                "punch": self._on_punch_result,
            }.get(sub)
            if handler is not None:
                try:
                    handler(sender, inner)
                except (ValueError, KeyError):
                    log.debug("%s: malformed %s from %s", self.peer_id, sub, sender)

    def _on_frame(self, data: bytes, src: Addr, relayed: bool) -> None:
        frame = wire.decode_data(data)
        with self._lock:
            link = self._by_id.get(frame.link_id)
        if link is None or link.keys is None:
            return
        plain = link.keys.open(frame.nonce, frame.sealed, frame.associated_data())
        if plain is None or not plain:
            link.integrity_failures += 1
            self.integrity_failures += 1
            self.events.emit("overlay.integrity_failure", local=self.peer_id, remote=link.remote)
            return
        kind = plain[0]
        if kind == wire.Inner.PUNCH:
            if not relayed:
                if src not in link.candidates:
                    link.candidates.append(src)
                link._control(wire.Inner.PUNCH_ACK, addr=src)
            return
        if kind == wire.Inner.PUNCH_ACK:
            if not relayed and link.state is LinkState.SETUP and not link.punch_ok:
                link.remote_addr = src
                link.punch_ok = True
            return
        if link.state is not LinkState.UP:
            return  # not ready yet; the sender retransmits
        link.frames_received += 1
        if kind == wire.Inner.ACK:
            link._on_ack(_U64.unpack(plain[1:9])[0])
        elif kind in (wire.Inner.END, wire.Inner.MORE):
            for msg in link._on_data(frame.seq, plain):
                self._inbox.put(("message", link, msg))
        elif kind == wire.Inner.CLOSE:
            self._link_down(link, LinkDown(f"{link.remote} closed the link"))

    def _timer_loop(self) -> None:
        while not self._stop.wait(0.01):
            now = time.monotonic()
            for link in self.links():
                if link.state is LinkState.UP:
                    link._retransmit_due(now)

    def _deliver_loop(self) -> None:
        while True:
            item = self._inbox.get()
            if item is None:
                return
            try:
                if item[0] == "message":
                    _, link, msg = item
                    for h in list(self._message_handlers):
                        h(link.remote, msg)
                elif item[0] == "link":
                    for h in list(self._link_handlers):
                        h(item[1], item[2])
                else:
                    for h in list(self._presence_handlers):
                        h(item[1], item[2])
            except Exception:  # noqa: BLE001 - a faulty handler must not stop delivery
                log.exception("%s: handler failed", self.peer_id)
