"""Messages exchanged between the scheduler and worker agents over overlay links.

Frame: ``u8 kind | u32 header length | JSON header | blob``. The blob
carries job or result archives; everything else lives in the header.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from typing import Any

from .errors import ContractViolation

_HEAD = struct.Struct(">BI")


class Kind(enum.IntEnum):
    ADVERTISE = 1
    HEARTBEAT = 2
    DISPATCH = 3
    RESULT = 4
    ABORT = 5
    REJECT = 6  # worker refuses a dispatch (no free slot)


@dataclass(frozen=True)
class Message:
    kind: Kind
    header: dict[str, Any] = field(default_factory=dict)
    blob: bytes = b""

    def encode(self) -> bytes:
        head = json.dumps(self.header, sort_keys=True, separators=(",", ":")).encode()
        return _HEAD.pack(int(self.kind), len(head)) + head + self.blob

    @classmethod
    def decode(cls, data: bytes) -> "Message":
        if len(data) < _HEAD.size:
            raise ValueError("truncated message")
        kind, n = _HEAD.unpack_from(data)
        head = data[_HEAD.size:_HEAD.size + n]
        if len(head) != n:
            raise ValueError("truncated message header")
        return cls(Kind(kind), json.loads(head), bytes(data[_HEAD.size + n:]))


@dataclass(frozen=True)
class WorkerAd:
    worker_id: str
    total_slots: int
    free_slots: int
    memory_mb: int = 0
    last_heartbeat: float = 0.0
    speed_hint: str | None = None
    running: tuple[str, ...] = ()  # job ids currently executing
    boot: str = ""  # changes when the agent restarts

    def __post_init__(self) -> None:
        if not self.worker_id:
            raise ContractViolation("worker_id must be non-empty")
        if self.total_slots < 1:
            raise ContractViolation("total_slots must be >= 1")
        if not 0 <= self.free_slots <= self.total_slots:
            raise ContractViolation("free_slots must lie in [0, total_slots]")

    def to_header(self) -> dict[str, Any]:
        return {
            "worker_id": self.worker_id,
            "total_slots": self.total_slots,
            "free_slots": self.free_slots,
            "memory_mb": self.memory_mb,
            "speed_hint": self.speed_hint,
            "running": list(self.running),
            "boot": self.boot,
        }

    @classmethod
    def from_header(cls, h: dict[str, Any], received_at: float = 0.0) -> "WorkerAd":
        return cls(
            h["worker_id"],
            int(h["total_slots"]),
            int(h["free_slots"]),
            int(h.get("memory_mb", 0)),
            received_at,
            h.get("speed_hint"),
            tuple(h.get("running", ())),
            h.get("boot", ""),
        )


def advertise(ad: WorkerAd) -> Message:
    return Message(Kind.ADVERTISE, ad.to_header())


def heartbeat(ad: WorkerAd) -> Message:
    return Message(Kind.HEARTBEAT, ad.to_header())


def dispatch(job_id: str, attempt: int, archive: bytes) -> Message:
    return Message(Kind.DISPATCH, {"job_id": job_id, "attempt": attempt}, archive)


def result(job_id: str, ok: bool, archive: bytes = b"", reason: str = "", aborted: bool = False) -> Message:
    return Message(Kind.RESULT, {"job_id": job_id, "ok": ok, "reason": reason, "aborted": aborted}, archive)


def abort(job_id: str) -> Message:
    return Message(Kind.ABORT, {"job_id": job_id})


def reject(job_id: str, reason: str) -> Message:
    return Message(Kind.REJECT, {"job_id": job_id, "reason": reason})
