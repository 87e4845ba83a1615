"""Vocabulary types shared by the gateway, toolchain, scheduler and workers."""

from __future__ import annotations

import dataclasses
import enum
import json
import re
import secrets
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Callable, Mapping, Sequence

from .errors import ContractViolation, LakesweepError

UID_LENGTH = 40
_UID_RE = re.compile(r"^[0-9a-f]{40}$")

PARAMETER_SUFFIX = ".nml"
DRIVER_SUFFIX = ".csv"


class Uid(str):
    """Experiment identifier: 40 lowercase hex characters."""

    def __new__(cls, value: str) -> "Uid":
        if not isinstance(value, str) or not _UID_RE.match(value):
            raise ValueError(f"not a valid uid: {value!r}")
        return super().__new__(cls, value)


def is_uid(value: object) -> bool:
    return isinstance(value, str) and bool(_UID_RE.match(value))


def generate_uid(entropy: Callable[[int], bytes] = secrets.token_bytes) -> Uid:
    try:
        raw = entropy(UID_LENGTH // 2)
    except Exception as exc:  # pragma: no cover - depends on the OS entropy pool
        raise LakesweepError(f"entropy source failed: {exc}") from exc
    if len(raw) != UID_LENGTH // 2:
        raise LakesweepError("entropy source returned a short read")
    return Uid(raw.hex())


def job_id(uid: str, ordinal: int) -> str:
    # zero-padded so job ids sort lexically in ordinal order
    return f"{uid}.{ordinal:06d}"


def split_job_id(jid: str) -> tuple[str, int]:
    uid, _, ordinal = jid.partition(".")
    if not is_uid(uid) or not ordinal.isdigit():
        raise ValueError(f"not a valid job id: {jid!r}")
    return uid, int(ordinal)


class ExperimentState(str, enum.Enum):
    SUBMITTED = "SUBMITTED"
    GENERATING = "GENERATING"
    RUNNING = "RUNNING"
    COMPLETED = "COMPLETED"
    FAILED = "FAILED"
    ABORTED = "ABORTED"

    @property
    def terminal(self) -> bool:
        return self in TERMINAL_STATES


TERMINAL_STATES = frozenset(
    {ExperimentState.COMPLETED, ExperimentState.FAILED, ExperimentState.ABORTED}
)

_S = ExperimentState
TRANSITIONS: dict[ExperimentState, frozenset[ExperimentState]] = {
    _S.SUBMITTED: frozenset({_S.GENERATING, _S.FAILED, _S.ABORTED}),
    _S.GENERATING: frozenset({_S.RUNNING, _S.FAILED, _S.ABORTED}),
    _S.RUNNING: frozenset({_S.COMPLETED, _S.FAILED, _S.ABORTED}),
    _S.COMPLETED: frozenset(),
    _S.FAILED: frozenset(),
    _S.ABORTED: frozenset(),
}

# ordering used for "state >= RUNNING" style checks
_RANK = {_S.SUBMITTED: 0, _S.GENERATING: 1, _S.RUNNING: 2, _S.COMPLETED: 3, _S.FAILED: 3, _S.ABORTED: 3}


def state_rank(state: ExperimentState) -> int:
    return _RANK[state]


class JobStatus(str, enum.Enum):
    QUEUED = "QUEUED"
    DISPATCHED = "DISPATCHED"
    DONE = "DONE"
    FAILED = "FAILED"


@dataclass(frozen=True)
class ExperimentMetrics:
    service_response: float | None = None  # ms, request receipt -> uid reply
    input_processing: float | None = None  # ms, generate + compress all inputs
    jobs_total: int = 0
    jobs_done: int = 0
    jobs_failed: int = 0
    # wall-clock instants backing the two durations above (RFC 3339)
    replied_at: str | None = None
    inputs_ready_at: str | None = None

    @property
    def fraction(self) -> float:
        if self.jobs_total <= 0:
            return 0.0
        return self.jobs_done / self.jobs_total


@dataclass(frozen=True)
class ExperimentRecord:
    uid: str
    state: ExperimentState
    spec: Mapping[str, Any]
    created_at: datetime
    job_ids: tuple[str, ...] = ()
    metrics: ExperimentMetrics = field(default_factory=ExperimentMetrics)
    workdir: str = ""
    reason: str | None = None

    def __post_init__(self) -> None:
        Uid(self.uid)
        # FAILED / ABORTED may be reached before any job exists
        if self.state in (_S.RUNNING, _S.COMPLETED) and not self.job_ids:
            raise ContractViolation(f"record in state {self.state.value} has no jobs")

    @property
    def terminal(self) -> bool:
        return self.state.terminal

    def replace(self, **changes: Any) -> "ExperimentRecord":
        return dataclasses.replace(self, **changes)

    def with_metrics(self, **changes: Any) -> "ExperimentRecord":
        return dataclasses.replace(self, metrics=dataclasses.replace(self.metrics, **changes))

    # -- on-disk form -------------------------------------------------
    def to_meta(self) -> str:
        doc = {
            "uid": self.uid,
            "state": self.state.value,
            "spec": dict(self.spec),
            "created_at": format_rfc3339(self.created_at),
            "job_ids": list(self.job_ids),
            "metrics": dataclasses.asdict(self.metrics),
            "workdir": self.workdir,
            "reason": self.reason,
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_meta(cls, text: str) -> "ExperimentRecord":
        doc = json.loads(text)
        return cls(
            uid=doc["uid"],
            state=ExperimentState(doc["state"]),
            spec=doc["spec"],
            created_at=parse_rfc3339(doc["created_at"]),
            job_ids=tuple(doc["job_ids"]),
            metrics=ExperimentMetrics(**doc["metrics"]),
            workdir=doc["workdir"],
            reason=doc.get("reason"),
        )


def transition(
    record: ExperimentRecord,
    next_state: ExperimentState,
    persist: Callable[[ExperimentRecord], None] | None = None,
    **changes: Any,
) -> ExperimentRecord:
    """Move ``record`` to ``next_state``; illegal edges raise ContractViolation."""
    current = record.state
    if current.terminal:
        raise ContractViolation(
            f"illegal transition {current.value} -> {next_state.value}: terminal state"
        )
    if next_state not in TRANSITIONS[current]:
        raise ContractViolation(f"illegal transition {current.value} -> {next_state.value}")
    updated = dataclasses.replace(record, state=next_state, **changes)
    if persist is not None:
        persist(updated)
    return updated


def utcnow() -> datetime:
    return datetime.now(timezone.utc)


def format_rfc3339(ts: datetime) -> str:
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.isoformat(timespec="microseconds")


def parse_rfc3339(text: str) -> datetime:
    return datetime.fromisoformat(text.replace("Z", "+00:00"))


@dataclass(frozen=True)
class SimulationSpec:
    """Inputs for one model run.

    ``input_files`` maps file names to payloads; exactly one ``*.nml``
    parameter file plus at least one ``*.csv`` driver.
    """

    sim_id: int
    input_files: Mapping[str, bytes]
    provenance: Mapping[str, Any] | str = "verbatim"

    def __post_init__(self) -> None:
        if self.sim_id < 0:
            raise ContractViolation(f"negative sim_id {self.sim_id}")
        check_input_files(self.input_files, where=f"sim {self.sim_id}")

    @property
    def parameter_file(self) -> str:
        return next(n for n in self.input_files if n.endswith(PARAMETER_SUFFIX))

    @property
    def driver_files(self) -> list[str]:
        return sorted(n for n in self.input_files if n.endswith(DRIVER_SUFFIX))


def check_input_files(files: Mapping[str, bytes], where: str = "simulation") -> None:
    params = [n for n in files if n.endswith(PARAMETER_SUFFIX)]
    drivers = [n for n in files if n.endswith(DRIVER_SUFFIX)]
    if len(params) != 1:
        raise ContractViolation(f"{where}: expected exactly one parameter file, found {len(params)}")
    if not drivers:
        raise ContractViolation(f"{where}: no driver file")
    for name in files:
        if "/" in name or "\\" in name or name in ("", ".", ".."):
            raise ContractViolation(f"{where}: bad input file name {name!r}")


@dataclass
class JobBundle:
    job_id: str
    sim_ids: tuple[int, ...]
    archive: bytes = b""
    status: JobStatus = JobStatus.QUEUED

    def __post_init__(self) -> None:
        if not self.sim_ids:
            raise ContractViolation(f"job {self.job_id} has no simulations")

    @property
    def uid(self) -> str:
        return self.job_id.partition(".")[0]


def check_partition(bundles: Sequence[JobBundle], n_sims: int) -> None:
    seen: set[int] = set()
    for b in bundles:
        overlap = seen.intersection(b.sim_ids)
        if overlap:
            raise ContractViolation(f"sim ids {sorted(overlap)[:5]} appear in more than one job")
        seen.update(b.sim_ids)
    if seen != set(range(n_sims)):
        raise ContractViolation("jobs do not cover the experiment's simulations")
