"""In-process stand-in for the scheduler: runs jobs on a local thread pool.

Useful for exercising the gateway without an overlay, and for a
single-machine ``serve --local`` deployment.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .. import gemt
from ..domain import JobBundle
from ..errors import ContractViolation


class LocalScheduler:
    def __init__(self, slots: int, scratch_root, runner=None, hold: bool = False):
        self.scratch_root = Path(scratch_root)
        self.runner = runner
        self._pool = ThreadPoolExecutor(max_workers=slots, thread_name_prefix="local-slot")
        self._slots = slots
        self._lock = threading.Lock()
        self._seen: set[str] = set()
        self._aborted: set[str] = set()
        self._queued = 0
        self._parked: list[tuple] = []
        self._gate = threading.Event()
        if not hold:
            self._gate.set()
        self.on_result = self.on_job_failed = None
        self.submitted: list[str] = []

    def release(self) -> None:
        """Let held jobs run (see ``hold``)."""
        self._gate.set()

    def submit(self, job: JobBundle, archive_path: str | None = None) -> int:
        with self._lock:
            if job.job_id in self._seen:
                raise ContractViolation(f"duplicate job_id {job.job_id}")
            self._seen.add(job.job_id)
            if job.uid in self._aborted:
                return -1
            self.submitted.append(job.job_id)
            self._queued += 1
        self._pool.submit(self._run, job)
        return self._queued - 1

    def _run(self, job: JobBundle) -> None:
        self._gate.wait()
        with self._lock:
            self._queued -= 1
            if job.uid in self._aborted:
                return
        scratch = self.scratch_root / f"slot-{threading.get_ident()}"
        kw = {"runner": self.runner} if self.runner is not None else {}
        res = gemt.run_job(job.archive, scratch_root=scratch, **kw)
        self._deliver(("result", job.job_id, res.to_archive()))

    def _deliver(self, item: tuple) -> None:
        with self._lock:
            if job_uid(item[1]) in self._aborted:
                return
            cb = self.on_result if item[0] == "result" else self.on_job_failed
            if cb is None:
                self._parked.append(item)
                return
        if cb(item[1], item[2]) is False:
            with self._lock:
                self._parked.append(item)

    def abort(self, uid: str) -> None:
        with self._lock:
            self._aborted.add(uid)

    def health(self) -> dict[str, int]:
        with self._lock:
            return {"queue_depth": self._queued, "workers_live": 1, "slots": self._slots}

    def attach(self, on_result, on_job_failed) -> None:
        with self._lock:
            self.on_result, self.on_job_failed = on_result, on_job_failed
            parked, self._parked = self._parked, []
        for item in parked:
            self._deliver(item)

    def detach(self) -> None:
        with self._lock:
            self.on_result = self.on_job_failed = None

    def close(self) -> None:
        self._gate.set()
        self._pool.shutdown(wait=True, cancel_futures=True)


def job_uid(job_id: str) -> str:
    return job_id.partition(".")[0]
