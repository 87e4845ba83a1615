"""Overlay infrastructure on a simulated network: reflector pair, rendezvous, relay."""

from __future__ import annotations

from ..events import EventLog
from ..overlay import Identity, LinkConfig, NatClass, OverlayPeer, Reflector, Relay, Rendezvous
from .simnet import SimNetwork


class OverlayWorld:
    def __init__(self, net: SimNetwork | None = None, events: EventLog | None = None,
                 relay: bool = True, config: LinkConfig | None = None):
        self.net = net or SimNetwork()
        self.events = events or EventLog()
        self.config = config
        h1, h2 = self.net.public_host(), self.net.public_host()
        self.reflectors = (Reflector(h1.socket(3478), h1.socket(3479), "reflector-1"),
                           Reflector(h2.socket(3478), h2.socket(3479), "reflector-2"))
        self.reflectors[0].pair(self.reflectors[1])
        for r in self.reflectors:
            r.start()
        self.rendezvous_host = self.net.public_host()
        self.rendezvous = Rendezvous(self.rendezvous_host.socket(5222), self.events).start()
        self.relay = None
        if relay:
            self.relay_host = self.net.public_host()
            self.relay = Relay(self.relay_host.socket(3480), self.events).start()
        self.peers: dict[str, OverlayPeer] = {}

    def peer(self, peer_id: str, nat_class: NatClass | str = NatClass.OPEN, group: str = "lakesweep",
             identity: Identity | None = None, join: bool = True, host=None) -> OverlayPeer:
        host = host or self.net.host_behind(nat_class)
        p = OverlayPeer(
            host.socket(),
            peer_id,
            group,
            self.rendezvous.address,
            reflectors=(self.reflectors[0].address, self.reflectors[1].address),
            relay=self.relay.address if self.relay else None,
            identity=identity,
            config=self.config,
            events=self.events,
        ).start()
        p.host = host
        if join:
            p.join()
        self.peers[peer_id] = p
        return p

    def restart_rendezvous(self) -> None:
        self.rendezvous.stop()
        self.rendezvous = Rendezvous(self.rendezvous_host.socket(5222), self.events).start()

    def close(self) -> None:
        for p in list(self.peers.values()):
            p.kill()
        for svc in (*self.reflectors, self.rendezvous, self.relay):
            if svc is not None:
                svc.stop()

    def __enter__(self) -> "OverlayWorld":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
