"""Datagram formats.

Every datagram starts with one channel byte so a single socket can carry
signaling, reflector probes, relay envelopes and link data.

* signaling: ``u32 length | u8 version | u8 type | JSON body``
* reflector: ``u8 op | 8-byte txn | payload``
* relay:     ``u8 op | u8 id length | peer id | payload``
* data:      ``u8 version | 8-byte link id | u64 seq | 12-byte nonce | ciphertext+tag``
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass
from typing import Any

VERSION = 1

CH_SIGNAL = 0x01
CH_STUN = 0x02
CH_DATA = 0x03
CH_RELAY = 0x04


class WireError(ValueError):
    pass


# -- signaling ----------------------------------------------------------------


class Sig(enum.IntEnum):
    JOIN = 1
    ROSTER = 2
    PRESENCE = 3
    LEAVE = 4
    FORWARD = 5
    FORWARDED = 6
    REJECT = 7


_SIG_HEAD = struct.Struct(">IBB")


def encode_signal(kind: Sig, body: dict[str, Any]) -> bytes:
    payload = json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
    return bytes([CH_SIGNAL]) + _SIG_HEAD.pack(len(payload), VERSION, int(kind)) + payload


def decode_signal(datagram: bytes) -> tuple[Sig, dict[str, Any]]:
    if len(datagram) < 1 + _SIG_HEAD.size or datagram[0] != CH_SIGNAL:
        raise WireError("not a signaling frame")
    length, version, kind = _SIG_HEAD.unpack_from(datagram, 1)
    if version != VERSION:
        raise WireError(f"unsupported signaling version {version}")
    body = datagram[1 + _SIG_HEAD.size:]
    if len(body) != length:
        raise WireError("signaling length mismatch")
    try:
        return Sig(kind), json.loads(body)
    except ValueError as exc:
        raise WireError(f"bad signaling frame: {exc}") from None


# -- reflector (address discovery) -------------------------------------------

STUN_REQUEST = 1
STUN_RESPONSE = 2
CHANGE_IP = 0x01
CHANGE_PORT = 0x02


def encode_binding_request(txn: bytes, flags: int = 0) -> bytes:
    return bytes([CH_STUN, STUN_REQUEST]) + txn + bytes([flags])


def encode_binding_response(txn: bytes, mapped: str) -> bytes:
    return bytes([CH_STUN, STUN_RESPONSE]) + txn + mapped.encode()


def decode_stun(datagram: bytes) -> tuple[int, bytes, bytes]:
    if len(datagram) < 10 or datagram[0] != CH_STUN:
        raise WireError("not a reflector frame")
    return datagram[1], datagram[2:10], datagram[10:]


# -- relay ---------------------------------------------------------------------

RELAY_ALLOCATE = 1
RELAY_ALLOCATED = 2
RELAY_SEND = 3
RELAY_DELIVER = 4


def encode_relay(op: int, peer_id: str, payload: bytes = b"") -> bytes:
    pid = peer_id.encode()
    if len(pid) > 255:
        raise WireError("peer id too long")
    return bytes([CH_RELAY, op, len(pid)]) + pid + payload


def decode_relay(datagram: bytes) -> tuple[int, str, bytes]:
    if len(datagram) < 3 or datagram[0] != CH_RELAY:
        raise WireError("not a relay frame")
    op, n = datagram[1], datagram[2]
    pid = datagram[3:3 + n]
    if len(pid) != n:
        raise WireError("truncated relay frame")
    return op, pid.decode(), datagram[3 + n:]


# -- link data -----------------------------------------------------------------

_DATA_HEAD = struct.Struct(">B8sQ12s")
DATA_HEADER_LEN = 1 + _DATA_HEAD.size


class Inner(enum.IntEnum):
    """First plaintext byte of a data frame."""

    END = 0  # last (or only) chunk of a message
    MORE = 1  # more chunks follow
    ACK = 2  # body: u64 cumulative sequence
    PUNCH = 3
    PUNCH_ACK = 4
    CLOSE = 5


@dataclass(frozen=True)
class DataFrame:
    link_id: bytes
    seq: int
    nonce: bytes
    sealed: bytes  # ciphertext || tag

    def header(self) -> bytes:
        return _DATA_HEAD.pack(VERSION, self.link_id, self.seq, self.nonce)

    def associated_data(self) -> bytes:
        # nonce is excluded: it is an input to the AEAD already
        return self.header()[:17]

    def encode(self) -> bytes:
        return bytes([CH_DATA]) + self.header() + self.sealed


def decode_data(datagram: bytes) -> DataFrame:
    if len(datagram) < DATA_HEADER_LEN + 16 or datagram[0] != CH_DATA:
        raise WireError("not a data frame")
    version, link_id, seq, nonce = _DATA_HEAD.unpack_from(datagram, 1)
    if version != VERSION:
        raise WireError(f"unsupported data frame version {version}")
    return DataFrame(link_id, seq, nonce, datagram[DATA_HEADER_LEN:])


def peek_link_id(datagram: bytes) -> bytes:
    return datagram[2:10]
