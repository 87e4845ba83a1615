"""Gateway backend: request intake, asynchronous generation, result bookkeeping.

Nothing here holds experiment state in memory; every decision is made from
the experiment directory, so a fresh :class:`Gateway` on the same data root
answers exactly as the old one would have.
"""

from __future__ import annotations

import logging
import math
import secrets
import time
from typing import Any, Iterator, Mapping, Sequence

from .. import gemt
from ..domain import (
    ExperimentRecord,
    ExperimentState,
    JobBundle,
    SimulationSpec,
    format_rfc3339,
    generate_uid,
    job_id as make_job_id,
    split_job_id,
    transition,
    utcnow,
)
from ..errors import (
    Conflict,
    ContractViolation,
    InputError,
    InvalidSpec,
    LakesweepError,
    NotFound,
)
from ..events import EventLog, NullLog
from ..sweep import Mode, SweepSpec, iter_expand, parse_key_values
from . import policy
from .store import ExperimentStore, write_atomic
from .taskqueue import Stopped, TaskKind, TaskQueue, TaskQueueEntry

log = logging.getLogger(__name__)

S = ExperimentState
UPLOAD = "upload.zip"


def _ms(seconds: float) -> float:
    return round(seconds * 1000.0, 3)


class Gateway:
    """The gateway's backend, shared by the HTTP app and in-process callers.

    ``scheduler`` needs ``submit(job, archive_path)``, ``abort(uid)``,
    ``health()`` and, optionally, ``attach``/``detach`` for result delivery.
    """

    def __init__(
        self,
        data_root,
        scheduler,
        gemt_config: gemt.GemtConfig | None = None,
        workers: int = 2,
        max_upload: int = policy.DEFAULT_MAX_UPLOAD,
        events: EventLog | None = None,
    ):
        self.store = ExperimentStore(data_root)
        self.scheduler = scheduler
        self.cfg = gemt_config or gemt.GemtConfig()
        self.max_upload = max_upload
        self.events = events or NullLog()
        self._closed = False
        self._running_seen: set[str] = set()  # only a shortcut; the record is authoritative
        self.tasks = TaskQueue(
            self.store,
            {TaskKind.GENERATE: self._generate, TaskKind.SUBMIT: self._submit_all,
             TaskKind.COLLATE: self._collate},
            workers=workers,
            on_error=self._task_failed,
        )

    # -- lifecycle -------------------------------------------------------------

    def start(self) -> "Gateway":
        self._reconcile()
        if hasattr(self.scheduler, "attach"):
            self.scheduler.attach(self.on_result, self.on_job_failed)
        self.tasks.start()
        return self

    def close(self) -> None:
        """Stop taking work. Journaled tasks and parked results survive for the next instance."""
        self._closed = True
        if hasattr(self.scheduler, "detach"):
            self.scheduler.detach()
        self.tasks.stop()

    kill = close  # all state is on disk, so a crash and a clean stop look the same

    def _reconcile(self) -> None:
        """Pick up experiments whose last completion check was lost in a crash."""
        for uid in self.store.uids():
            rec = self.store.load(uid)
            if rec.state is S.RUNNING:
                self._maybe_finish(uid)

    # -- intake ----------------------------------------------------------------

    def submit_experiment(self, upload: bytes, received_at: float | None = None) -> str:
        t0 = time.perf_counter() if received_at is None else received_at
        files = policy.read_upload(upload, self.max_upload)
        sims = gemt.load_simulations(files)  # structure check only; generation re-reads
        for s in sims:
            if not s.input_files:
                raise InputError(f"sim {s.sim_id} is empty")
        spec = {"mode": "VERBATIM", "count": len(sims)}
        return self._accept(spec, upload, t0)

    def submit_sweep(self, upload: bytes, params: str | Mapping[str, str],
                     received_at: float | None = None) -> str:
        return self._submit_generated(upload, params, Mode.LINEAR, received_at)

    def submit_sampled(self, upload: bytes, description: str | Mapping[str, str],
                       received_at: float | None = None) -> str:
        return self._submit_generated(upload, description, Mode.SAMPLED, received_at)

    def _submit_generated(self, upload, params, mode: Mode, received_at) -> str:
        t0 = time.perf_counter() if received_at is None else received_at
        kv = parse_key_values(params) if isinstance(params, str) else dict(params)
        kv["mode"] = mode.value
        if mode is Mode.SAMPLED and "seed" not in kv:
            kv["seed"] = str(secrets.randbits(63))  # recorded so the run can be repeated
        spec = SweepSpec.from_mapping(kv)  # InvalidSpec names the offending field
        files = policy.baseline_files(policy.read_upload(upload, self.max_upload))
        if spec.driver_file not in files:
            raise InvalidSpec(f"driver file {spec.driver_file!r} is not in the baseline", field="driver_file")
        doc = {"mode": mode.value, "count": spec.count, "sweep": spec.to_text(), "seed": spec.seed}
        return self._accept(doc, upload, t0)

    def _accept(self, spec: Mapping[str, Any], upload: bytes, t0: float) -> str:
        if self._closed:
            raise LakesweepError("gateway is shutting down")
        uid = generate_uid()
        rec = ExperimentRecord(uid=uid, state=S.SUBMITTED, spec=dict(spec), created_at=utcnow(),
                               workdir=uid)
        self.store.create(rec, {UPLOAD: upload})
        task = self.tasks.enqueue(uid, TaskKind.GENERATE, release=False)
        # the reply goes out right after this returns; persist its timing before any work starts
        elapsed = time.perf_counter() - t0
        self.store.update(uid, lambda r: r.with_metrics(service_response=_ms(elapsed),
                                                       replied_at=format_rfc3339(utcnow())))
        self.tasks.release(task)
        self.events.emit("gws.submit", uid=uid, mode=spec["mode"], count=spec["count"])
        return uid

    # -- queries -----------------------------------------------------------------

    def record(self, uid: str) -> ExperimentRecord:
        """The stored record with job counters filled in from results/."""
        rec = self.store.load(uid)
        done, failed = self.store.result_counts(uid)
        return rec.with_metrics(jobs_done=done, jobs_failed=failed)

    def status(self, uid: str) -> dict[str, Any]:
        rec = self.record(uid)
        m = rec.metrics
        fraction = 1.0 if rec.state is S.COMPLETED else m.fraction
        out = {
            "uid": uid,
            "state": rec.state.value,
            "fraction": fraction,
            "metrics": {
                "service_response": m.service_response,
                "input_processing": m.input_processing,
                "jobs_total": m.jobs_total,
                "jobs_done": m.jobs_done,
                "jobs_failed": m.jobs_failed,
                "replied_at": m.replied_at,
                "inputs_ready_at": m.inputs_ready_at,
            },
            "sims": rec.spec.get("count"),
        }
        if "seed" in rec.spec:
            out["seed"] = rec.spec["seed"]
        if rec.reason:
            out["reason"] = rec.reason
        return out

    def results(self, uid: str, sims: Sequence[int] | None = None,
                columns: Sequence[str] | None = None) -> bytes:
        rec = self.record(uid)
        path = self.store.collated_path(uid)
        if rec.state not in (S.COMPLETED, S.FAILED) or not path.exists():
            raise Conflict(f"experiment {uid} is {rec.state.value}; results are not ready",
                           state=rec.state.value, fraction=rec.metrics.fraction)
        data = path.read_bytes()
        if not sims and not columns:
            return data
        return gemt.subset_archive(data, sims or None, columns or None)

    def health(self) -> dict[str, int]:
        h = dict(self.scheduler.health())
        return {"queue_depth": int(h.get("queue_depth", 0)), "workers_live": int(h.get("workers_live", 0)),
                "tasks_pending": self.tasks.depth()}

    # -- control -------------------------------------------------------------------

    def abort(self, uid: str) -> dict[str, Any]:
        def change(r: ExperimentRecord):
            if r.terminal:
                raise Conflict(f"experiment {uid} is already {r.state.value}", state=r.state.value,
                               fraction=r.metrics.fraction)
            return transition(r, S.ABORTED, reason="aborted by user")

        rec = self.store.update(uid, change)
        self.store.mark_aborted(uid)
        self.scheduler.abort(uid)
        self.events.emit("gws.abort", uid=uid)
        return {"uid": uid, "state": rec.state.value}

    # -- scheduler callbacks ---------------------------------------------------------

    def on_result(self, job_id: str, archive: bytes) -> bool:
        if self._closed:
            return False
        uid = self._owner(job_id)
        if uid is None:
            return True
        with self.store.lock(uid):
            rec = self.store.load(uid)
            if rec.terminal or self.store.has_outcome(job_id):
                self.events.emit("gws.result_dropped", uid=uid, job=job_id, state=rec.state.value)
                return True
            self.store.put_result(job_id, archive)
        self.events.emit("gws.result", uid=uid, job=job_id)
        self._maybe_finish(uid)
        return True

    def on_job_failed(self, job_id: str, reason: str) -> bool:
        if self._closed:
            return False
        uid = self._owner(job_id)
        if uid is None:
            return True
        with self.store.lock(uid):
            if self.store.load(uid).terminal or self.store.has_outcome(job_id):
                return True
            self.store.put_failure(job_id, reason)
        self.events.emit("gws.job_failed", uid=uid, job=job_id, reason=reason)
        self._maybe_finish(uid)
        return True

    def _owner(self, job_id: str) -> str | None:
        try:
            uid, _ = split_job_id(job_id)
        except ValueError:
            log.warning("result for malformed job id %r", job_id)
            return None
        if not self.store.exists(uid):
            log.warning("result for unknown experiment %s", uid)
            return None
        return uid

    def _maybe_finish(self, uid: str) -> None:
        rec = self.record(uid)
        m = rec.metrics
        if rec.state is not S.RUNNING or m.inputs_ready_at is None:
            return  # still generating; the generator checks again when it is done
        if m.jobs_done + m.jobs_failed >= m.jobs_total:
            self.tasks.enqueue(uid, TaskKind.COLLATE)

    # -- tasks -----------------------------------------------------------------------

    def _check_running(self, uid: str) -> None:
        if self._closed or self.tasks.stopped:
            raise Stopped()

    def _simulations(self, rec: ExperimentRecord) -> Iterator[SimulationSpec]:
        upload = (self.store.inputs(rec.uid) / UPLOAD).read_bytes()
        files = policy.read_upload(upload, max(self.max_upload, len(upload)))
        if rec.spec["mode"] == "VERBATIM":
            return iter(gemt.load_simulations(files))
        spec = SweepSpec.from_text(rec.spec["sweep"])
        return iter_expand(policy.baseline_files(files), spec)

    def _generate(self, entry: TaskQueueEntry) -> None:
        uid = entry.uid
        rec = self.store.load(uid)
        if rec.terminal:
            return
        started = time.perf_counter()
        n = int(rec.spec["count"])
        k = self.cfg.group_size
        job_ids = tuple(make_job_id(uid, i) for i in range(math.ceil(n / k)))

        def to_generating(r: ExperimentRecord):
            if r.terminal:
                raise Stopped()
            if r.state is S.SUBMITTED:
                r = transition(r, S.GENERATING)
            return r.replace(job_ids=job_ids).with_metrics(jobs_total=len(job_ids))

        try:
            self.store.update(uid, to_generating)
        except Stopped:
            return
        self.events.emit("gws.generate", uid=uid, sims=n, jobs=len(job_ids))
        sims = self._simulations(rec)
        packaged: list[tuple] = []
        for bundle in gemt.iter_group(sims, self.cfg, uid):
            self._check_running(uid)
            if self.store.aborted(uid):
                return
            path = self.store.job_path(bundle.job_id)
            if not path.exists():
                self.store.write_job(bundle.job_id, bundle.sim_ids, bundle.archive)
            self.events.emit("gws.packaged", uid=uid, job=bundle.job_id)
            if self.cfg.pipeline_packaging:
                self._submit(bundle, path)
            else:
                packaged.append(bundle.job_id)
        if len(self.store.job_sims(uid)) != len(job_ids):
            raise ContractViolation(f"generated {len(self.store.job_sims(uid))} jobs, expected {len(job_ids)}")
        elapsed = time.perf_counter() - started

        def ready(r: ExperimentRecord):
            if r.terminal:
                return None
            return r.with_metrics(input_processing=_ms(elapsed), inputs_ready_at=format_rfc3339(utcnow()))

        self.store.update(uid, ready)
        self.events.emit("gws.inputs_ready", uid=uid, input_processing=_ms(elapsed))
        if packaged:
            self.tasks.enqueue(uid, TaskKind.SUBMIT)
        else:
            self._maybe_finish(uid)

    def _submit_all(self, entry: TaskQueueEntry) -> None:
        uid = entry.uid
        for jid, sim_ids in sorted(self.store.job_sims(uid).items()):
            self._check_running(uid)
            if self.store.aborted(uid):
                return
            path = self.store.job_path(jid)
            self._submit(JobBundle(jid, tuple(sim_ids), path.read_bytes()), path)
        self._maybe_finish(uid)

    def _submit(self, bundle: JobBundle, path) -> None:
        uid = bundle.uid
        if not self.store.has_outcome(bundle.job_id):
            try:
                self.scheduler.submit(bundle, str(path))
            except ContractViolation:
                pass  # already queued before a restart
            self.events.emit("gws.dispatch", uid=uid, job=bundle.job_id)
        if uid not in self._running_seen:
            def to_running(r: ExperimentRecord):
                return transition(r, S.RUNNING) if r.state is S.GENERATING else None

            self.store.update(uid, to_running)
            self._running_seen.add(uid)

    def _collate(self, entry: TaskQueueEntry) -> None:
        uid = entry.uid
        rec = self.record(uid)
        if rec.state is not S.RUNNING:
            return
        jobs = self.store.job_sims(uid)
        archives = self.store.result_archives(uid)
        collated = gemt.collate(uid, jobs, archives, self.cfg)
        write_atomic(self.store.collated_path(uid), collated.to_archive())
        failed = rec.metrics.jobs_failed

        def finish(r: ExperimentRecord):
            if r.state is not S.RUNNING:
                return None
            if failed:
                return transition(r, S.FAILED, reason=f"{failed} of {len(jobs)} jobs failed; partial results kept")
            return transition(r, S.COMPLETED)

        rec = self.store.update(uid, finish)
        self.events.emit("gws.collated", uid=uid, state=rec.state.value, **collated.summary)

    def _task_failed(self, entry: TaskQueueEntry, exc: Exception) -> None:
        if isinstance(exc, InvalidSpec) and exc.field:
            reason = f"{exc.field}: {exc}"
        else:
            reason = str(exc) or type(exc).__name__

        def fail(r: ExperimentRecord):
            if r.terminal:
                return None
            return transition(r, S.FAILED, reason=reason)

        try:
            self.store.update(entry.uid, fail)
        except NotFound:
            return
        self.events.emit("gws.failed", uid=entry.uid, task=entry.kind.name, reason=reason)
        self.store.mark_aborted(entry.uid)
        self.scheduler.abort(entry.uid)
