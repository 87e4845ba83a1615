"""Execute-node agent: advertises slots, runs dispatched jobs, returns results."""

from __future__ import annotations

import logging
import os
import queue
import secrets
import shutil
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from . import gemt, protocol
from .errors import ContractViolation, InputError, LakesweepError
from .events import EventLog, NullLog
from .model import run_directory
from .protocol import Kind, Message, WorkerAd
from .sweep import parse_key_values

log = logging.getLogger(__name__)


@dataclass
class AgentConfig:
    """Agent configuration file: flat ``key = value`` lines."""

    peer_id: str
    slots: int = 1
    memory_mb: int = 0
    scratch_root: str = "scratch"
    rendezvous: str = ""
    group: str = "lakesweep"
    relay: str = ""
    scheduler: str = "scheduler"
    heartbeat: float = 2.0
    emulate_ms: int | None = None
    speed_hint: str | None = None

    def __post_init__(self) -> None:
        if self.slots < 1:
            raise ContractViolation("an agent needs at least one slot")

    @classmethod
    def from_text(cls, text: str) -> "AgentConfig":
        kv = parse_key_values(text)
        if "peer_id" not in kv:
            raise ContractViolation("agent configuration needs peer_id")
        ints = {"slots", "memory_mb", "emulate_ms"}
        known = set(cls.__dataclass_fields__)
        args: dict = {}
        for key, value in kv.items():
            if key not in known:
                raise ContractViolation(f"unknown agent setting {key!r}")
            if key in ints:
                args[key] = int(value)
            elif key == "heartbeat":
                args[key] = float(value)
            else:
                args[key] = value
        return cls(**args)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "AgentConfig":
        return cls.from_text(Path(path).read_text())


@dataclass
class SlotState:
    slot_index: int
    scratch_dir: Path
    job_id: str | None = None
    started_at: float | None = None

    @property
    def idle(self) -> bool:
        return self.job_id is None


class WorkerAgent:
    """Runs on each execute node; ``peer`` must already be joined to the group.

    A supervisor thread owns all traffic to the scheduler. Each busy slot
    has its own thread; slot threads hand finished work back through the
    supervisor's inbox.
    """

    def __init__(
        self,
        peer,
        scheduler_id: str,
        slots: int,
        scratch_root: str | os.PathLike,
        memory_mb: int = 0,
        heartbeat_period: float = 2.0,
        emulate_ms: int | None = None,
        speed_hint: str | None = None,
        runner: Callable[[Path], object] | None = None,
        events: EventLog | None = None,
    ):
        if slots < 1:
            raise ContractViolation("an agent needs at least one slot")
        self.peer = peer
        self.worker_id = peer.peer_id
        self.scheduler_id = scheduler_id
        self.memory_mb = memory_mb
        self.heartbeat_period = heartbeat_period
        self.emulate_ms = emulate_ms
        self.speed_hint = speed_hint
        self.events = events or NullLog()
        self._runner = runner
        self.scratch_root = Path(scratch_root)
        self.results_dir = self.scratch_root / "results"
        self.slots = [SlotState(i, self.scratch_root / f"slot{i}") for i in range(slots)]
        self.boot = secrets.token_hex(6)
        self._inbox: queue.Queue = queue.Queue()
        self._outbox: dict[str, tuple[Path | None, Message, object]] = {}
        self._aborted: set[str] = set()
        self._stop = threading.Event()
        self._dead = False
        self._lock = threading.Lock()
        self._thread: threading.Thread | None = None
        self._advertised = False
        self.running_now = 0
        self.max_concurrent = 0
        self.completed = 0

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> "WorkerAgent":
        self._prepare_scratch()
        self.peer.on_message(self._on_message)
        self._thread = threading.Thread(target=self._supervise, name=f"{self.worker_id}-agent", daemon=True)
        self._thread.start()
        self.events.emit("worker.start", worker=self.worker_id, slots=len(self.slots))
        return self

    def _prepare_scratch(self) -> None:
        """Start clean: drop scratch left by a previous run, keep finished results."""
        for slot in self.slots:
            shutil.rmtree(slot.scratch_dir, ignore_errors=True)
            slot.scratch_dir.mkdir(parents=True)
        self.results_dir.mkdir(parents=True, exist_ok=True)
        for p in self.results_dir.iterdir():
            if p.suffix != ".zip":
                p.unlink()  # never a partial archive
                continue
            try:
                res = gemt.JobResult.from_archive(p.read_bytes())
            except LakesweepError:
                p.unlink()
                continue
            self._outbox[p.stem] = (p, protocol.result(p.stem, res.ok, p.read_bytes(), res.reason), None)

    def stop(self) -> None:
        """Graceful stop: leaves the overlay."""
        self._halt()
        self.peer.leave()

    def kill(self) -> None:
        """Crash: no goodbye, work in progress is abandoned."""
        self._halt()
        self.peer.kill()

    def _halt(self) -> None:
        self._dead = True
        self._stop.set()
        self._inbox.put(None)
        if self._thread is not None and self._thread is not threading.current_thread():
            self._thread.join(timeout=2)

    # -- state -----------------------------------------------------------------

    def ad(self) -> WorkerAd:
        with self._lock:
            running = tuple(s.job_id for s in self.slots if s.job_id)
        return WorkerAd(self.worker_id, len(self.slots), len(self.slots) - len(running), self.memory_mb,
                        time.time(), self.speed_hint, running, self.boot)

    # -- messages --------------------------------------------------------------

    def _on_message(self, peer_id: str, payload: bytes) -> None:
        if peer_id != self.scheduler_id:
            return
        try:
            self._inbox.put(("msg", Message.decode(payload)))
        except (ValueError, KeyError) as exc:
            log.warning("%s: undecodable message: %s", self.worker_id, exc)

    def _supervise(self) -> None:
        next_beat = 0.0
        while not self._stop.is_set():
            try:
                item = self._inbox.get(timeout=0.05)
            except queue.Empty:
                item = ()
            if item is None:
                return
            if item:
                try:
                    if item[0] == "msg":
                        self._handle(item[1])
                    else:
                        self._finished(*item[1:])
                except Exception:  # noqa: BLE001 - the supervisor must survive
                    log.exception("%s: supervisor error", self.worker_id)
            now = time.monotonic()
            if now >= next_beat:
                ad = self.ad()
                msg = protocol.heartbeat(ad) if self._advertised else protocol.advertise(ad)
                if self._send(msg) is not None:
                    self._advertised = True
                next_beat = now + self.heartbeat_period
            self._flush()

    def _send(self, msg: Message):
        try:
            return self.peer.send_to(self.scheduler_id, msg.encode())
        except LakesweepError as exc:
            log.info("%s: cannot reach scheduler: %s", self.worker_id, exc)
            return None

    def _handle(self, msg: Message) -> None:
        job_id = msg.header.get("job_id", "")
        if msg.kind is Kind.DISPATCH:
            with self._lock:
                slot = next((s for s in self.slots if s.idle), None)
                if slot is not None:
                    slot.job_id, slot.started_at = job_id, time.monotonic()
                    self.running_now += 1
                    self.max_concurrent = max(self.max_concurrent, self.running_now)
            if slot is None:
                self._send(protocol.reject(job_id, "no free slot"))
                return
            self.events.emit("worker.job_start", worker=self.worker_id, job=job_id, slot=slot.slot_index)
            t = threading.Thread(target=self._run_slot, args=(slot, job_id, msg.blob),
                                 name=f"{self.worker_id}-slot{slot.slot_index}", daemon=True)
            t.start()
        elif msg.kind is Kind.ABORT:
            with self._lock:
                if any(s.job_id == job_id for s in self.slots):
                    self._aborted.add(job_id)

    def _runner_for(self) -> Callable[[Path], object]:
        base = self._runner or (lambda d: run_directory(d, emulate_ms=self.emulate_ms))

        def run(sim_dir: Path):
            if self._dead:
                raise InputError("agent stopped")
            return base(sim_dir)

        return run

    def _run_slot(self, slot: SlotState, job_id: str, archive: bytes) -> None:
        result = gemt.run_job(archive, runner=self._runner_for(), scratch_root=slot.scratch_dir)
        if result.job_id != job_id:
            result.job_id = job_id
        if self._dead:
            return
        data = result.to_archive()
        path = self.results_dir / f"{job_id}.zip"
        tmp = self.results_dir / f"{job_id}.partial"
        tmp.write_bytes(data)
        os.replace(tmp, path)  # published whole or not at all
        self._inbox.put(("done", slot.slot_index, job_id, path, result.ok, result.reason))

    def _finished(self, index: int, job_id: str, path: Path, ok: bool, reason: str) -> None:
        slot = self.slots[index]
        with self._lock:
            slot.job_id = slot.started_at = None
            self.running_now -= 1
            self.completed += 1
            aborted = job_id in self._aborted
            self._aborted.discard(job_id)
        self.events.emit("worker.job_end", worker=self.worker_id, job=job_id, ok=ok, aborted=aborted)
        if aborted:
            path.unlink(missing_ok=True)
            self._outbox[job_id] = (None, protocol.result(job_id, False, reason="aborted", aborted=True), None)
        else:
            self._outbox[job_id] = (path, protocol.result(job_id, ok, path.read_bytes(), reason), None)
        self._flush()

    def _flush(self) -> None:
        """(Re)send results until the scheduler has acknowledged them."""
        for job_id, (path, msg, receipt) in list(self._outbox.items()):
            if receipt is not None:
                if receipt.acked:
                    del self._outbox[job_id]
                    if path is not None:
                        path.unlink(missing_ok=True)
                    continue
                if receipt.link.up:
                    continue
            receipt = self._send(msg)
            self._outbox[job_id] = (path, msg, receipt)
            if receipt is None:
                return  # scheduler unreachable; retry on the next pass
