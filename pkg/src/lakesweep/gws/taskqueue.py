"""Durable task queue: one file per pending task, drained by a small thread pool."""

from __future__ import annotations

import enum
import json
import logging
import threading
import time
from dataclasses import dataclass
from typing import Callable, Mapping

from ..domain import format_rfc3339, utcnow
from ..errors import LakesweepError
from .store import ExperimentStore, write_atomic

log = logging.getLogger(__name__)


class TaskKind(enum.IntEnum):
    GENERATE = 0
    SUBMIT = 1
    COLLATE = 2


@dataclass(frozen=True)
class TaskQueueEntry:
    uid: str
    kind: TaskKind
    enqueued_at: str
    seq: int

    @property
    def filename(self) -> str:
        return f"{self.seq:020d}-{self.kind.name}.task"

    def to_json(self) -> bytes:
        return json.dumps({"uid": self.uid, "kind": self.kind.name, "enqueued_at": self.enqueued_at,
                           "seq": self.seq}, sort_keys=True).encode()

    @classmethod
    def from_json(cls, data: bytes) -> "TaskQueueEntry":
        doc = json.loads(data)
        return cls(doc["uid"], TaskKind[doc["kind"]], doc["enqueued_at"], int(doc["seq"]))


class Stopped(Exception):
    """Raised inside a handler when the queue is shutting down; the task stays journaled."""


Handler = Callable[[TaskQueueEntry], None]


class TaskQueue:
    """Tasks of one experiment run one at a time, lowest kind first.

    An entry's file is removed only after its handler returns (or fails
    for good), so a crash replays it on the next start. Handlers must be
    idempotent.
    """

    def __init__(self, store: ExperimentStore, handlers: Mapping[TaskKind, Handler],
                 workers: int = 2, on_error: Callable[[TaskQueueEntry, Exception], None] | None = None):
        self.store = store
        self.handlers = dict(handlers)
        self.on_error = on_error
        self._cv = threading.Condition()
        self._pending: list[TaskQueueEntry] = []
        self._busy: set[str] = set()
        self._stopped = False
        self._seq = time.time_ns()
        self._threads = [threading.Thread(target=self._drain, name=f"gws-task{i}", daemon=True)
                         for i in range(workers)]

    def start(self) -> "TaskQueue":
        self.recover()
        for t in self._threads:
            t.start()
        return self

    def recover(self) -> int:
        """Load journaled entries left by a previous process."""
        found = []
        for uid in self.store.uids():
            for p in sorted(self.store.journal(uid).glob("*.task")):
                try:
                    found.append(TaskQueueEntry.from_json(p.read_bytes()))
                except (ValueError, KeyError):
                    log.warning("dropping unreadable task file %s", p)
                    p.unlink()
        with self._cv:
            known = {(e.uid, e.seq) for e in self._pending}
            self._pending += [e for e in found if (e.uid, e.seq) not in known]
            self._seq = max([self._seq] + [e.seq + 1 for e in found])
            self._cv.notify_all()
        return len(found)

    def enqueue(self, uid: str, kind: TaskKind, release: bool = True) -> TaskQueueEntry | None:
        """Journal and queue a task; a duplicate of a not-yet-started task is skipped.

        With ``release=False`` the task is durable but not runnable until
        :meth:`release` is called.
        """
        with self._cv:
            if any(e.uid == uid and e.kind == kind for e in self._pending):
                return None
            self._seq += 1
            entry = TaskQueueEntry(uid, kind, format_rfc3339(utcnow()), self._seq)
        write_atomic(self.store.journal(uid) / entry.filename, entry.to_json())
        if release:
            self.release(entry)
        return entry

    def release(self, entry: TaskQueueEntry) -> None:
        with self._cv:
            self._pending.append(entry)
            self._cv.notify()

    def depth(self) -> int:
        with self._cv:
            return len(self._pending) + len(self._busy)

    def idle(self) -> bool:
        return self.depth() == 0

    def stop(self) -> None:
        with self._cv:
            self._stopped = True
            self._cv.notify_all()
        for t in self._threads:
            if t.is_alive() and t is not threading.current_thread():
                t.join(timeout=5)

    @property
    def stopped(self) -> bool:
        return self._stopped

    def _next(self) -> TaskQueueEntry | None:
        best: dict[str, TaskQueueEntry] = {}
        for e in self._pending:
            if e.uid in self._busy:
                continue
            cur = best.get(e.uid)
            if cur is None or (e.kind, e.seq) < (cur.kind, cur.seq):
                best[e.uid] = e
        if not best:
            return None
        return min(best.values(), key=lambda e: e.seq)

    def _drain(self) -> None:
        while True:
            with self._cv:
                entry = None
                while not self._stopped:
                    entry = self._next()
                    if entry is not None:
                        break
                    self._cv.wait()
                if self._stopped:
                    return
                self._pending.remove(entry)
                self._busy.add(entry.uid)
            done = True
            try:
                self.handlers[entry.kind](entry)
            except Stopped:
                done = False
            except Exception as exc:  # noqa: BLE001 - one bad task must not kill the pool
                log.warning("task %s for %s failed: %s", entry.kind.name, entry.uid, exc,
                            exc_info=not isinstance(exc, LakesweepError))
                if self.on_error is not None:
                    try:
                        self.on_error(entry, exc)
                    except Exception:  # noqa: BLE001
                        log.exception("task error handler failed")
            if done:
                (self.store.journal(entry.uid) / entry.filename).unlink(missing_ok=True)
            with self._cv:
                self._busy.discard(entry.uid)
                self._cv.notify_all()
