"""Group overlay: rendezvous, NAT classification, encrypted direct or relayed links."""

from .crypto import Identity
from .nat import NatClass, NatPolicy, ProbeResult, classify_nat, format_addr, parse_addr
from .peer import LinkConfig, LinkKind, LinkState, OverlayLink, OverlayPeer, PeerDescriptor, Receipt
from .services import Reflector, Relay, Rendezvous
from .udp import UdpSocket

__all__ = [
    "Identity",
    "LinkConfig",
    "LinkKind",
    "LinkState",
    "NatClass",
    "NatPolicy",
    "OverlayLink",
    "OverlayPeer",
    "PeerDescriptor",
    "ProbeResult",
    "Receipt",
    "Reflector",
    "Relay",
    "Rendezvous",
    "UdpSocket",
    "classify_nat",
    "format_addr",
    "parse_addr",
]
