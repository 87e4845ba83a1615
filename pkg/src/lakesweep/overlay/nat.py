"""NAT behaviour classes, policies, and classification from reflector probes."""

from __future__ import annotations

import enum
from dataclasses import dataclass

from ..errors import ClassificationUnavailable

Addr = tuple[str, int]


class NatClass(str, enum.Enum):
    OPEN = "OPEN"
    FULL_CONE = "FULL_CONE"
    RESTRICTED = "RESTRICTED"
    PORT_RESTRICTED = "PORT_RESTRICTED"
    SYMMETRIC = "SYMMETRIC"


class Mapping(str, enum.Enum):
    NONE = "NONE"  # no translation at all
    ENDPOINT_INDEPENDENT = "ENDPOINT_INDEPENDENT"
    ENDPOINT_DEPENDENT = "ENDPOINT_DEPENDENT"  # fresh public port per destination


class Filtering(str, enum.Enum):
    NONE = "NONE"
    ADDRESS = "ADDRESS"
    ADDRESS_PORT = "ADDRESS_PORT"


_BEHAVIOUR = {
    NatClass.OPEN: (Mapping.NONE, Filtering.NONE),
    NatClass.FULL_CONE: (Mapping.ENDPOINT_INDEPENDENT, Filtering.NONE),
    NatClass.RESTRICTED: (Mapping.ENDPOINT_INDEPENDENT, Filtering.ADDRESS),
    NatClass.PORT_RESTRICTED: (Mapping.ENDPOINT_INDEPENDENT, Filtering.ADDRESS_PORT),
    NatClass.SYMMETRIC: (Mapping.ENDPOINT_DEPENDENT, Filtering.ADDRESS_PORT),
}


@dataclass(frozen=True)
class NatPolicy:
    nat_class: NatClass
    mapping: Mapping
    filtering: Filtering
    port_allocation: str = "sequential"  # or "random"

    def __post_init__(self) -> None:
        if (self.mapping, self.filtering) != _BEHAVIOUR[self.nat_class]:
            raise ValueError(
                f"{self.nat_class.value} needs mapping={_BEHAVIOUR[self.nat_class][0].value} "
                f"and filtering={_BEHAVIOUR[self.nat_class][1].value}"
            )
        if self.port_allocation not in ("sequential", "random"):
            raise ValueError(f"unknown port allocation {self.port_allocation!r}")

    @classmethod
    def of(cls, nat_class: NatClass | str, port_allocation: str = "sequential") -> "NatPolicy":
        nat_class = NatClass(nat_class)
        mapping, filtering = _BEHAVIOUR[nat_class]
        return cls(nat_class, mapping, filtering, port_allocation)


@dataclass(frozen=True)
class ProbeResult:
    """What a peer observed while probing two reflectors.

    ``mapped_primary`` / ``mapped_secondary`` are the reflexive addresses
    reported by each reflector (None when it did not answer);
    ``changed_ip_reply`` / ``changed_port_reply`` record whether replies
    sent from a different address / port made it through.
    """

    local: Addr
    mapped_primary: Addr | None
    mapped_secondary: Addr | None = None
    changed_ip_reply: bool = False
    changed_port_reply: bool = False


def classify_nat(probe: ProbeResult) -> NatClass:
    if probe.mapped_primary is None and probe.mapped_secondary is None:
        raise ClassificationUnavailable("no reflector answered")
    mapped = probe.mapped_primary or probe.mapped_secondary
    if tuple(mapped) == tuple(probe.local):
        return NatClass.OPEN
    if (
        probe.mapped_primary is not None
        and probe.mapped_secondary is not None
        and tuple(probe.mapped_primary) != tuple(probe.mapped_secondary)
    ):
        return NatClass.SYMMETRIC
    if probe.changed_ip_reply:
        return NatClass.FULL_CONE
    if probe.changed_port_reply:
        return NatClass.RESTRICTED
    # also the answer when only one reflector replied: symmetric mapping
    # cannot be told apart from port-restricted filtering then
    return NatClass.PORT_RESTRICTED


def format_addr(addr: Addr) -> str:
    return f"{addr[0]}:{addr[1]}"


def parse_addr(text: str) -> Addr:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bad address {text!r}")
    return host, int(port)
