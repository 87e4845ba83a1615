"""Job queue, matchmaking, dispatch monitoring and retries.

:class:`SchedulerCore` is the whole scheduling state machine. It never
reads a clock or touches the network: every call takes ``now`` and
returns the actions to perform, so tests can drive it in virtual time.
:class:`SchedulerService` wires a core to an overlay peer and real time.
"""

from __future__ import annotations

import collections
import enum
import json
import logging
import os
import queue
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from . import protocol
from .domain import JobBundle, JobStatus, split_job_id
from .errors import ContractViolation, LakesweepError
from .events import EventLog, NullLog
from .protocol import Kind, Message, WorkerAd

log = logging.getLogger(__name__)


class Outcome(str, enum.Enum):
    PENDING = "PENDING"
    SUCCESS = "SUCCESS"
    FAILURE = "FAILURE"
    LOST = "LOST"
    ABORTED = "ABORTED"


@dataclass
class DispatchRecord:
    job_id: str
    worker_id: str
    attempt: int
    dispatched_at: float
    outcome: Outcome = Outcome.PENDING
    reason: str = ""


@dataclass
class SchedulerConfig:
    heartbeat_period: float = 2.0
    missed_beats: int = 3
    max_retries: int = 3
    job_timeout: float | None = None  # per-job wall-clock limit, seconds

    def __post_init__(self) -> None:
        if self.heartbeat_period <= 0 or self.missed_beats < 1 or self.max_retries < 0:
            raise ContractViolation("invalid scheduler configuration")

    @property
    def liveness_window(self) -> float:
        return self.heartbeat_period * self.missed_beats


# -- actions returned by the core -------------------------------------------


@dataclass(frozen=True)
class Send:
    worker_id: str
    message: Message


@dataclass(frozen=True)
class Deliver:
    """A job's first successful result; hand it to the experiment owner."""

    job_id: str
    archive: bytes
    worker_id: str


@dataclass(frozen=True)
class JobFailed:
    job_id: str
    reason: str


Action = Send | Deliver | JobFailed


# -- matchmaking -------------------------------------------------------------


@dataclass
class MatchResult:
    pairs: list[tuple[str, str]]
    free_slots: dict[str, int]

    def __iter__(self):
        return iter(self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)


def matchmake(queue_: Sequence[str], ads: Iterable[WorkerAd]) -> MatchResult:
    """Greedy FIFO: head-of-queue jobs go to workers with free slots, one slot each.

    Workers are visited round-robin so a burst spreads across the pool.
    """
    free = {ad.worker_id: ad.free_slots for ad in ads}
    order = [w for w in free if free[w] > 0]
    pairs: list[tuple[str, str]] = []
    jobs = iter(queue_)
    while order:
        still = []
        for w in order:
            job = next(jobs, None)
            if job is None:
                return MatchResult(pairs, free)
            pairs.append((job, w))
            free[w] -= 1
            if free[w] > 0:
                still.append(w)
        order = still
    return MatchResult(pairs, free)


# -- journal -----------------------------------------------------------------


class Journal:
    """Append-only JSONL record of queue changes, replayed after a crash."""

    def __init__(self, directory: str | os.PathLike):
        self.dir = Path(directory)
        (self.dir / "archives").mkdir(parents=True, exist_ok=True)
        self.path = self.dir / "scheduler.jsonl"
        self._lock = threading.Lock()
        self._fh = open(self.path, "a", encoding="utf-8")

    def archive_path(self, job_id: str) -> Path:
        return self.dir / "archives" / f"{job_id}.zip"

    def append(self, op: str, **fields) -> None:
        line = json.dumps({"op": op, **fields}, sort_keys=True)
        with self._lock:
            self._fh.write(line + "\n")
            self._fh.flush()

    def enqueue(self, job: JobBundle, archive_path: str | None) -> None:
        if archive_path is None:
            p = self.archive_path(job.job_id)
            tmp = p.with_suffix(".tmp")
            tmp.write_bytes(job.archive)
            os.replace(tmp, p)
            archive_path = str(p)
        self.append("enqueue", job_id=job.job_id, sim_ids=list(job.sim_ids), archive=archive_path)

    def replay(self) -> tuple[list[dict], set[str], set[str], set[str]]:
        jobs: dict[str, dict] = {}
        done: set[str] = set()
        failed: set[str] = set()
        aborted: set[str] = set()
        if self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                try:
                    rec = json.loads(line)
                except ValueError:
                    continue  # torn final line
                op = rec.get("op")
                if op == "enqueue":
                    jobs.setdefault(rec["job_id"], rec)
                elif op == "done":
                    done.add(rec["job_id"])
                elif op == "failed":
                    failed.add(rec["job_id"])
                elif op == "abort":
                    aborted.add(rec["uid"])
        return list(jobs.values()), done, failed, aborted

    def close(self) -> None:
        with self._lock:
            self._fh.close()


# -- core --------------------------------------------------------------------


@dataclass
class _Job:
    job_id: str
    uid: str
    sim_ids: tuple[int, ...]
    archive: bytes
    status: JobStatus = JobStatus.QUEUED
    attempts: int = 0
    records: list[DispatchRecord] = field(default_factory=list)

    def pending(self) -> DispatchRecord | None:
        for r in reversed(self.records):
            if r.outcome is Outcome.PENDING:
                return r
        return None


@dataclass
class _Worker:
    ad: WorkerAd
    last_seen: float
    busy: set[str] = field(default_factory=set)
    hold_until: float = 0.0

    @property
    def free(self) -> int:
        return max(0, self.ad.total_slots - len(self.busy))


class SchedulerCore:
    def __init__(self, config: SchedulerConfig | None = None, journal: Journal | None = None,
                 events: EventLog | None = None):
        self.config = config or SchedulerConfig()
        self.journal = journal
        self.events = events or NullLog()
        self.jobs: dict[str, _Job] = {}
        self.queue: collections.deque[str] = collections.deque()
        self.workers: dict[str, _Worker] = {}
        self.aborted: set[str] = set()

    # -- queue -----------------------------------------------------------

    def enqueue(self, job: JobBundle, now: float, archive_path: str | None = None) -> int:
        if job.job_id in self.jobs:
            raise ContractViolation(f"duplicate job_id {job.job_id}")
        if job.status is not JobStatus.QUEUED:
            raise ContractViolation(f"job {job.job_id} is {job.status.value}, not QUEUED")
        entry = _Job(job.job_id, job.uid, tuple(job.sim_ids), job.archive)
        if job.uid in self.aborted:
            entry.status = JobStatus.FAILED
            self.jobs[job.job_id] = entry
            return -1
        if self.journal is not None:
            self.journal.enqueue(job, archive_path)
        self.jobs[job.job_id] = entry
        self.queue.append(job.job_id)
        self.events.emit("sched.enqueue", job=job.job_id)
        return len(self.queue) - 1

    @property
    def queue_depth(self) -> int:
        return len(self.queue)

    def records(self, job_id: str) -> list[DispatchRecord]:
        return list(self.jobs[job_id].records)

    def pending(self, worker_id: str | None = None) -> list[DispatchRecord]:
        out = []
        for job in self.jobs.values():
            r = job.pending()
            if r is not None and (worker_id is None or r.worker_id == worker_id):
                out.append(r)
        return out

    def live_workers(self, now: float) -> list[str]:
        window = self.config.liveness_window
        return [w for w, s in self.workers.items() if now - s.last_seen <= window]

    # -- worker reports ----------------------------------------------------

    def advertise(self, ad: WorkerAd, now: float) -> list[Action]:
        """Record an ADVERTISE or HEARTBEAT (both carry a full ad)."""
        actions: list[Action] = []
        w = self.workers.get(ad.worker_id)
        if w is not None and ad.boot != w.ad.boot:
            # the agent restarted: whatever it was running is gone
            actions += self._worker_lost(ad.worker_id, now, "worker restarted")
            w = None
        if w is None:
            w = _Worker(ad, now)
            self.workers[ad.worker_id] = w
            self.events.emit("sched.worker_up", worker=ad.worker_id, slots=ad.total_slots)
        w.ad = ad
        w.last_seen = now
        w.busy.update(ad.running)
        return actions

    heartbeat = advertise

    def on_reject(self, worker_id: str, job_id: str, now: float) -> list[Action]:
        """The worker had no room: undo the dispatch without charging an attempt."""
        job = self.jobs.get(job_id)
        w = self.workers.get(worker_id)
        if w is not None:
            w.busy.discard(job_id)
            w.hold_until = now + self.config.heartbeat_period / 4
        if job is None:
            return []
        rec = job.pending()
        if rec is not None and rec.worker_id == worker_id:
            job.records.remove(rec)
            job.attempts -= 1
            job.status = JobStatus.QUEUED
            self.queue.appendleft(job_id)
        return []

    def dispatch_failed(self, job_id: str, worker_id: str, now: float, reason: str) -> list[Action]:
        job = self.jobs.get(job_id)
        w = self.workers.get(worker_id)
        if w is not None:
            w.busy.discard(job_id)
        if job is None:
            return []
        rec = job.pending()
        if rec is None or rec.worker_id != worker_id:
            return []
        rec.outcome, rec.reason = Outcome.FAILURE, f"transfer failed: {reason}"
        self.events.emit("sched.dispatch_failed", job=job_id, worker=worker_id, reason=reason)
        return self._retry([job], now)

    def on_result(self, worker_id: str, job_id: str, ok: bool, archive: bytes, now: float,
                  reason: str = "", aborted: bool = False) -> list[Action]:
        w = self.workers.get(worker_id)
        if w is not None:
            w.busy.discard(job_id)
            w.last_seen = max(w.last_seen, now)
        job = self.jobs.get(job_id)
        if job is None:
            self.events.emit("sched.stale_result", job=job_id, worker=worker_id)
            return []
        rec = next((r for r in reversed(job.records) if r.worker_id == worker_id), None)
        if job.uid in self.aborted:
            if rec is not None and rec.outcome is Outcome.PENDING:
                rec.outcome = Outcome.ABORTED
            self.events.emit("sched.result_dropped", job=job_id, worker=worker_id, reason="experiment aborted")
            return []
        if aborted or job.status is JobStatus.FAILED:
            return []  # acknowledgement of an ABORT we sent; the record is already settled
        if job.status is JobStatus.DONE:
            self.events.emit("sched.duplicate", job=job_id, worker=worker_id)
            if rec is not None and rec.outcome is Outcome.PENDING:
                rec.outcome, rec.reason = Outcome.ABORTED, "superseded"
            return []
        if not ok:
            if rec is None or rec.outcome is not Outcome.PENDING:
                return []  # a late failure from an attempt we already wrote off
            rec.outcome, rec.reason = Outcome.FAILURE, reason or "job failed"
            self.events.emit("sched.job_failure", job=job_id, worker=worker_id, reason=rec.reason)
            return self._retry([job], now)
        # first success wins, whichever attempt produced it
        actions: list[Action] = []
        if rec is not None and rec.outcome is Outcome.PENDING:
            rec.outcome = Outcome.SUCCESS
        other = job.pending()
        if other is not None:
            other.outcome, other.reason = Outcome.ABORTED, "superseded"
            actions.append(Send(other.worker_id, protocol.abort(job_id)))
        if job.status is JobStatus.QUEUED:
            try:
                self.queue.remove(job_id)
            except ValueError:
                pass
        job.status = JobStatus.DONE
        job.archive = b""
        if self.journal is not None:
            self.journal.append("done", job_id=job_id)
        self.events.emit("sched.success", job=job_id, worker=worker_id, attempt=rec.attempt if rec else 0)
        actions.append(Deliver(job_id, archive, worker_id))
        return actions

    # -- abort -----------------------------------------------------------

    def abort(self, uid: str, now: float) -> list[Action]:
        self.aborted.add(uid)
        if self.journal is not None:
            self.journal.append("abort", uid=uid)
        actions: list[Action] = []
        self.queue = collections.deque(j for j in self.queue if self.jobs[j].uid != uid)
        for job in self.jobs.values():
            if job.uid != uid:
                continue
            rec = job.pending()
            if rec is not None:
                rec.outcome, rec.reason = Outcome.ABORTED, "experiment aborted"
                actions.append(Send(rec.worker_id, protocol.abort(job.job_id)))
            if job.status is not JobStatus.DONE:
                job.status = JobStatus.FAILED
            job.archive = b""
        self.events.emit("sched.abort", uid=uid, cancelled=len(actions))
        return actions

    # -- periodic work ---------------------------------------------------------

    def tick(self, now: float) -> list[Action]:
        """Expire dead workers and overdue jobs, then matchmake."""
        actions: list[Action] = []
        window = self.config.liveness_window
        for wid in [w for w, s in self.workers.items() if now - s.last_seen > window]:
            actions += self._worker_lost(wid, now, "heartbeat lapse")
        limit = self.config.job_timeout
        if limit is not None:
            overdue = [j for j in self.jobs.values()
                       if (r := j.pending()) is not None and now - r.dispatched_at > limit]
            for job in overdue:
                rec = job.pending()
                rec.outcome, rec.reason = Outcome.FAILURE, "timeout"
                self.events.emit("sched.timeout", job=job.job_id, worker=rec.worker_id)
                actions.append(Send(rec.worker_id, protocol.abort(job.job_id)))
            actions += self._retry(overdue, now)
        actions += self._assign(now)
        return actions

    def _assign(self, now: float) -> list[Action]:
        if not self.queue:
            return []
        ads = []
        for wid in self.live_workers(now):
            w = self.workers[wid]
            if w.hold_until <= now and w.free > 0:
                ads.append(WorkerAd(wid, w.ad.total_slots, w.free, w.ad.memory_mb, w.last_seen))
        match = matchmake(self.queue, ads)
        actions: list[Action] = []
        for job_id, wid in match.pairs:
            self.queue.popleft()
            job = self.jobs[job_id]
            job.attempts += 1
            job.status = JobStatus.DISPATCHED
            job.records.append(DispatchRecord(job_id, wid, job.attempts, now))
            self.workers[wid].busy.add(job_id)
            self.events.emit("sched.dispatch", job=job_id, worker=wid, attempt=job.attempts)
            actions.append(Send(wid, protocol.dispatch(job_id, job.attempts, job.archive)))
        return actions

    def _worker_lost(self, worker_id: str, now: float, reason: str) -> list[Action]:
        self.workers.pop(worker_id, None)
        lost = []
        for job in self.jobs.values():
            rec = job.pending()
            if rec is not None and rec.worker_id == worker_id:
                rec.outcome, rec.reason = Outcome.LOST, reason
                lost.append(job)
        self.events.emit("sched.worker_dead", worker=worker_id, reason=reason, lost=len(lost))
        return self._retry(lost, now)

    def _retry(self, jobs: list[_Job], now: float) -> list[Action]:
        actions: list[Action] = []
        again = []
        for job in jobs:
            if job.attempts > self.config.max_retries:
                job.status = JobStatus.FAILED
                job.archive = b""
                reason = job.records[-1].reason if job.records else "failed"
                if self.journal is not None:
                    self.journal.append("failed", job_id=job.job_id, reason=reason)
                self.events.emit("sched.gave_up", job=job.job_id, attempts=job.attempts, reason=reason)
                actions.append(JobFailed(job.job_id, f"{reason} after {job.attempts} attempts"))
            else:
                job.status = JobStatus.QUEUED
                again.append(job)
        # retried work goes to the head, keeping submission order among itself
        again.sort(key=lambda j: split_job_id(j.job_id))
        for job in reversed(again):
            self.queue.appendleft(job.job_id)
            self.events.emit("sched.requeue", job=job.job_id, attempt=job.attempts + 1)
        return actions

    # -- recovery ------------------------------------------------------------

    @classmethod
    def recover(cls, journal: Journal, config: SchedulerConfig | None = None,
                events: EventLog | None = None) -> "SchedulerCore":
        """Rebuild the queue from the journal. Work in flight at the crash is requeued."""
        entries, done, failed, aborted = journal.replay()
        core = cls(config, None, events)
        core.aborted = set(aborted)
        for rec in entries:
            jid = rec["job_id"]
            uid = jid.partition(".")[0]
            status = JobStatus.DONE if jid in done else JobStatus.FAILED if jid in failed else JobStatus.QUEUED
            if uid in aborted and status is JobStatus.QUEUED:
                status = JobStatus.FAILED
            archive = b""
            if status is JobStatus.QUEUED:
                try:
                    archive = Path(rec["archive"]).read_bytes()
                except OSError:
                    status = JobStatus.FAILED
                    log.warning("archive for %s missing after recovery", jid)
            core.jobs[jid] = _Job(jid, uid, tuple(rec["sim_ids"]), archive, status)
            if status is JobStatus.QUEUED:
                core.queue.append(jid)
        core.journal = journal
        return core


# -- service -------------------------------------------------------------------

# a callback may return False to refuse a delivery; it is then held for the next attach()
ResultCallback = Callable[[str, bytes], object]
FailureCallback = Callable[[str, str], object]


class SchedulerService:
    """Runs a :class:`SchedulerCore` against an overlay peer in real time.

    One loop thread owns the core. Overlay callbacks and API calls only
    post to its inbox; sends run on a small pool so a slow link never
    stalls scheduling, and result callbacks run on their own thread in
    arrival order.
    """

    def __init__(
        self,
        peer,
        core: SchedulerCore | None = None,
        on_result: ResultCallback | None = None,
        on_job_failed: FailureCallback | None = None,
        events: EventLog | None = None,
        clock: Callable[[], float] = time.monotonic,
        tick: float = 0.05,
    ):
        self.peer = peer
        self.events = events or (core.events if core else NullLog())
        self.core = core or SchedulerCore(events=self.events)
        self.on_result = on_result
        self.on_job_failed = on_job_failed
        self.clock = clock
        self.tick_interval = tick
        self._lock = threading.Lock()
        self._inbox: queue.Queue = queue.Queue()
        self._wake = threading.Event()
        self._stop = threading.Event()
        self._callbacks: queue.Queue = queue.Queue()
        self._cb_lock = threading.Lock()
        self._parked: list[Action] = []
        self._pool = ThreadPoolExecutor(max_workers=4, thread_name_prefix="sched-send")
        self._threads: list[threading.Thread] = []

    def start(self) -> "SchedulerService":
        self.peer.on_message(self._on_message)
        for target, name in ((self._loop, "sched-loop"), (self._callback_loop, "sched-results")):
            t = threading.Thread(target=target, name=name, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def stop(self) -> None:
        self._stop.set()
        self._wake.set()
        self._callbacks.put(None)
        for t in self._threads:
            t.join(timeout=2)
        self._pool.shutdown(wait=False, cancel_futures=True)

    # -- API used by the gateway --------------------------------------------

    def submit(self, job: JobBundle, archive_path: str | None = None) -> int:
        with self._lock:
            pos = self.core.enqueue(job, self.clock(), archive_path)
        self._wake.set()
        return pos

    def abort(self, uid: str) -> None:
        with self._lock:
            actions = self.core.abort(uid, self.clock())
        self._run(actions)

    def attach(self, on_result: ResultCallback | None, on_job_failed: FailureCallback | None) -> None:
        """(Re)connect the result consumer and hand it anything held while detached."""
        with self._cb_lock:
            self.on_result, self.on_job_failed = on_result, on_job_failed
            parked, self._parked = self._parked, []
        for a in parked:
            self._callbacks.put(a)

    def detach(self) -> None:
        """Hold deliveries until the next :meth:`attach` (the gateway is restarting)."""
        with self._cb_lock:
            self.on_result = self.on_job_failed = None

    def health(self) -> dict[str, int]:
        with self._lock:
            return {
                "queue_depth": self.core.queue_depth,
                "workers_live": len(self.core.live_workers(self.clock())),
                "pending": len(self.core.pending()),
            }

    # -- internals -------------------------------------------------------------

    def _on_message(self, peer_id: str, payload: bytes) -> None:
        try:
            msg = Message.decode(payload)
        except (ValueError, KeyError) as exc:
            log.warning("undecodable message from %s: %s", peer_id, exc)
            return
        self._inbox.put((peer_id, msg))
        self._wake.set()

    def _handle(self, peer_id: str, msg: Message, now: float) -> list[Action]:
        h = msg.header
        if msg.kind in (Kind.ADVERTISE, Kind.HEARTBEAT):
            if h.get("worker_id") != peer_id:
                return []  # a peer may only speak for itself
            return self.core.advertise(WorkerAd.from_header(h, now), now)
        if msg.kind is Kind.RESULT:
            return self.core.on_result(peer_id, h["job_id"], bool(h.get("ok")), msg.blob, now,
                                       reason=h.get("reason", ""), aborted=bool(h.get("aborted")))
        if msg.kind is Kind.REJECT:
            return self.core.on_reject(peer_id, h["job_id"], now)
        return []

    def _loop(self) -> None:
        while not self._stop.is_set():
            self._wake.wait(self.tick_interval)
            self._wake.clear()
            actions: list[Action] = []
            with self._lock:
                now = self.clock()
                while True:
                    try:
                        peer_id, msg = self._inbox.get_nowait()
                    except queue.Empty:
                        break
                    try:
                        actions += self._handle(peer_id, msg, now)
                    except (KeyError, LakesweepError) as exc:
                        log.warning("bad %s from %s: %s", msg.kind.name, peer_id, exc)
                actions += self.core.tick(now)
            self._run(actions)

    def _run(self, actions: list[Action]) -> None:
        for a in actions:
            if isinstance(a, Send):
                self._pool.submit(self._send, a)
            else:
                self._callbacks.put(a)

    def _send(self, action: Send) -> None:
        try:
            self.peer.send_to(action.worker_id, action.message.encode())
        except LakesweepError as exc:
            if action.message.kind is Kind.DISPATCH:
                job_id = action.message.header["job_id"]
                with self._lock:
                    more = self.core.dispatch_failed(job_id, action.worker_id, self.clock(), str(exc))
                self._run(more)
                self._wake.set()

    def _callback_loop(self) -> None:
        while True:
            a = self._callbacks.get()
            if a is None:
                return
            with self._cb_lock:
                cb = self.on_result if isinstance(a, Deliver) else self.on_job_failed
                if cb is None:
                    self._parked.append(a)
                    continue
            try:
                args = (a.job_id, a.archive) if isinstance(a, Deliver) else (a.job_id, a.reason)
                accepted = cb(*args)
            except Exception:  # noqa: BLE001
                log.exception("result callback failed for %s", a.job_id)
                continue
            if accepted is False:  # consumer is shutting down; keep it for the next one
                with self._cb_lock:
                    self._parked.append(a)
