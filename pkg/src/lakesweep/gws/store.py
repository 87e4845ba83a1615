"""On-disk experiment state. Everything the gateway knows lives here.

Layout per experiment::

    {root}/{uid}/record.meta
                 inputs/      the upload, exactly as received (never executed)
                 jobs/        {job_id}.zip job archives and {job_id}.meta sim lists
                 results/     {job_id}.zip results, {job_id}.failed reasons, collated.zip
                 journal/     pending task-queue entries
"""

from __future__ import annotations

import json
import os
import threading
from pathlib import Path
from typing import Callable, Iterator

from ..domain import ExperimentRecord, is_uid
from ..errors import NotFound

COLLATED = "collated.zip"

_registry_lock = threading.Lock()
_locks: dict[str, threading.RLock] = {}


def uid_lock(path: Path) -> threading.RLock:
    """Per-experiment lock, shared by every store object in the process."""
    key = str(path.resolve())
    with _registry_lock:
        return _locks.setdefault(key, threading.RLock())


def write_atomic(path: Path, data: bytes, sync: bool = True) -> None:
    tmp = path.with_name(f"{path.name}.{threading.get_ident()}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        if sync:
            fh.flush()
            os.fsync(fh.fileno())
    os.replace(tmp, path)


def write_once(path: Path, data: bytes) -> bool:
    """Publish ``path`` unless it already exists; True if this call won."""
    tmp = path.with_name(f"{path.name}.{threading.get_ident()}.tmp")
    tmp.write_bytes(data)
    try:
        os.link(tmp, path)
        return True
    except FileExistsError:
        return False
    finally:
        tmp.unlink(missing_ok=True)


class ExperimentStore:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    # -- paths -----------------------------------------------------------------

    def path(self, uid: str) -> Path:
        if not is_uid(uid):
            raise NotFound(f"unknown experiment {uid!r}")
        return self.root / uid

    def inputs(self, uid: str) -> Path:
        return self.path(uid) / "inputs"

    def jobs(self, uid: str) -> Path:
        return self.path(uid) / "jobs"

    def results(self, uid: str) -> Path:
        return self.path(uid) / "results"

    def journal(self, uid: str) -> Path:
        return self.path(uid) / "journal"

    def lock(self, uid: str) -> threading.RLock:
        return uid_lock(self.path(uid))

    def exists(self, uid: str) -> bool:
        return is_uid(uid) and (self.root / uid / "record.meta").exists()

    def uids(self) -> Iterator[str]:
        for p in sorted(self.root.iterdir()):
            if is_uid(p.name) and (p / "record.meta").exists():
                yield p.name

    # -- record ----------------------------------------------------------------

    def create(self, record: ExperimentRecord, inputs: dict[str, bytes]) -> None:
        base = self.path(record.uid)
        for sub in ("inputs", "jobs", "results", "journal"):
            (base / sub).mkdir(parents=True, exist_ok=True)
        for name, data in inputs.items():
            write_atomic(base / "inputs" / name, data)
        self.save(record)

    def load(self, uid: str) -> ExperimentRecord:
        try:
            text = (self.path(uid) / "record.meta").read_text()
        except FileNotFoundError:
            raise NotFound(f"unknown experiment {uid}") from None
        return ExperimentRecord.from_meta(text)

    def save(self, record: ExperimentRecord) -> None:
        write_atomic(self.path(record.uid) / "record.meta", record.to_meta().encode())

    def update(self, uid: str, change: Callable[[ExperimentRecord], ExperimentRecord | None]) -> ExperimentRecord:
        """Read-modify-write under the experiment's lock; ``change`` may return None for no-op."""
        with self.lock(uid):
            rec = self.load(uid)
            new = change(rec)
            if new is not None and new != rec:
                self.save(new)
                return new
            return rec

    # -- jobs and results ------------------------------------------------------

    def job_path(self, job_id: str) -> Path:
        return self.jobs(job_id.partition(".")[0]) / f"{job_id}.zip"

    def write_job(self, job_id: str, sim_ids: tuple[int, ...], archive: bytes) -> Path:
        jobs = self.jobs(job_id.partition(".")[0])
        # job files can be rebuilt from inputs/, so they skip the fsync
        write_atomic(jobs / f"{job_id}.meta", json.dumps(list(sim_ids)).encode(), sync=False)
        path = jobs / f"{job_id}.zip"
        write_atomic(path, archive, sync=False)  # the .zip marks the job as packaged
        return path

    def job_sims(self, uid: str) -> dict[str, list[int]]:
        out = {}
        for p in self.jobs(uid).glob("*.meta"):
            if (p.with_suffix(".zip")).exists():
                out[p.stem] = json.loads(p.read_text())
        return out

    def put_result(self, job_id: str, archive: bytes) -> bool:
        return write_once(self.results(job_id.partition(".")[0]) / f"{job_id}.zip", archive)

    def put_failure(self, job_id: str, reason: str) -> bool:
        return write_once(self.results(job_id.partition(".")[0]) / f"{job_id}.failed", reason.encode())

    def result_counts(self, uid: str) -> tuple[int, int]:
        done = failed = 0
        for name in os.listdir(self.results(uid)):
            if not name.startswith(uid):
                continue
            if name.endswith(".zip"):
                done += 1
            elif name.endswith(".failed"):
                failed += 1
        return done, failed

    def has_outcome(self, job_id: str) -> bool:
        res = self.results(job_id.partition(".")[0])
        return (res / f"{job_id}.zip").exists() or (res / f"{job_id}.failed").exists()

    def result_archives(self, uid: str) -> dict[str, bytes]:
        res = self.results(uid)
        return {p.stem: p.read_bytes() for p in res.glob(f"{uid}.*.zip")}

    def mark_aborted(self, uid: str) -> None:
        """Stop marker checked by generation between bundles (cheaper than a record read)."""
        (self.path(uid) / "stop").touch()

    def aborted(self, uid: str) -> bool:
        return (self.path(uid) / "stop").exists()

    def collated_path(self, uid: str) -> Path:
        return self.results(uid) / COLLATED
