"""Replay of the three-site evaluation: batches of sweeps through the full stack."""

from __future__ import annotations

import csv
import io
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from ..client import ClientSession
from ..domain import ExperimentState
from ..events import EventLog
from . import inputs
from .cluster import Cluster, TopologySpec

D_FAST_MS = 6
D_SLOW_MS = 57


@dataclass
class WorkerUsage:
    jobs: int = 0
    sims: int = 0
    busy_s: float = 0.0
    utilization: float = 0.0


@dataclass
class BatchResult:
    n_sims: int
    slots: int
    makespan_s: float
    speedup_fast: float
    speedup_slow: float
    state: str
    jobs: int
    workers: dict[str, WorkerUsage] = field(default_factory=dict)
    service_response_ms: float | None = None
    input_processing_ms: float | None = None

    @property
    def valid(self) -> bool:
        return self.state == ExperimentState.COMPLETED.value


@dataclass
class ReplayReport:
    topology: TopologySpec
    batches: list[BatchResult]
    d_fast_ms: float = D_FAST_MS
    d_slow_ms: float = D_SLOW_MS

    @property
    def valid(self) -> bool:
        return all(b.valid for b in self.batches)

    def to_text(self) -> str:
        lines = ["replay report", f"workers: " + ", ".join(
            f"{w.name}({w.slots} slots, {w.emulate_ms} ms/sim, {w.nat.value})" for w in self.topology.workers),
            f"sequential references: fast {self.d_fast_ms} ms/sim, slow {self.d_slow_ms} ms/sim",
            f"group size: {self.topology.group_size}", ""]
        for b in self.batches:
            lines.append(f"batch N={b.n_sims} slots={b.slots}: {'valid' if b.valid else 'INVALID (' + b.state + ')'}")
            lines.append(f"  makespan_s={b.makespan_s:.3f} speedup_fast={b.speedup_fast:.2f} "
                         f"speedup_slow={b.speedup_slow:.2f} jobs={b.jobs}")
            lines.append(f"  service_response_ms={b.service_response_ms} input_processing_ms={b.input_processing_ms}")
            for name, u in sorted(b.workers.items()):
                lines.append(f"  worker {name}: jobs={u.jobs} sims={u.sims} busy_s={u.busy_s:.3f} "
                             f"utilization={u.utilization:.3f}")
        lines.append("")
        lines.append("overall: " + ("valid" if self.valid else "INVALID"))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        names = [w.name for w in self.topology.workers]
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(["n_sims", "slots", "makespan_s", "speedup_fast", "speedup_slow", "state", "jobs",
                      "service_response_ms", "input_processing_ms"]
                     + [f"{n}_{k}" for n in names for k in ("jobs", "utilization")])
        for b in self.batches:
            row = [b.n_sims, b.slots, f"{b.makespan_s:.4f}", f"{b.speedup_fast:.3f}", f"{b.speedup_slow:.3f}",
                   b.state, b.jobs, b.service_response_ms, b.input_processing_ms]
            for n in names:
                u = b.workers.get(n, WorkerUsage())
                row += [u.jobs, f"{u.utilization:.4f}"]
            out.writerow(row)
        return buf.getvalue()


def _usage(events: EventLog, topology: TopologySpec, start: float, end: float, k: int) -> dict[str, WorkerUsage]:
    usage = {w.name: WorkerUsage() for w in topology.workers}
    open_at: dict[tuple[str, str], float] = {}
    for ev in events:
        if not (start <= ev.t <= end):
            continue
        if ev.kind == "worker.job_start":
            open_at[(ev["worker"], ev["job"])] = ev.t
        elif ev.kind == "worker.job_end" and (ev["worker"], ev["job"]) in open_at:
            u = usage[ev["worker"]]
            u.busy_s += ev.t - open_at.pop((ev["worker"], ev["job"]))
            if ev.get("ok") and not ev.get("aborted"):
                u.jobs += 1
    span = max(end - start, 1e-9)
    slots = {w.name: w.slots for w in topology.workers}
    for name, u in usage.items():
        u.sims = u.jobs * k  # upper bound: the last job of a batch may be short
        u.utilization = u.busy_s / (slots[name] * span)
    return usage


def run_batch(cluster: Cluster, n_sims: int, d_fast_ms: float = D_FAST_MS, d_slow_ms: float = D_SLOW_MS,
              timeout: float = 600.0, rows: int = 24) -> BatchResult:
    """One sweep of ``n_sims`` simulations, from upload to collated results."""
    client: ClientSession = cluster.client
    work = Path(tempfile.mkdtemp(prefix="replay-", dir=cluster.root))
    for name, data in inputs.baseline(rows=rows).items():
        (work / name).write_bytes(data)
    t0 = time.monotonic()
    uid = client.run_sweep(work, inputs.DRIVER_NAME, "AirTemp", -10, 30, n_sims)
    done = client.wait(uid, timeout=timeout, poll=0.05)
    t1 = time.monotonic()
    collated = cluster.events.first("gws.collated", uid=uid)
    end = collated.t if collated is not None else t1
    makespan = end - t0
    topo = cluster.topology
    slots = topo.total_slots
    return BatchResult(
        n_sims=n_sims,
        slots=slots,
        makespan_s=makespan,
        speedup_fast=n_sims * d_fast_ms / 1000.0 / makespan,
        speedup_slow=n_sims * d_slow_ms / 1000.0 / makespan,
        state=done.state.value,
        jobs=int(done.metrics.get("jobs_total") or 0),
        workers=_usage(cluster.events, topo, t0, end, topo.group_size),
        service_response_ms=done.metrics.get("service_response"),
        input_processing_ms=done.metrics.get("input_processing"),
    )


def replay_evaluation(topology: TopologySpec, batch_sizes: Sequence[int], root=None,
                      d_fast_ms: float = D_FAST_MS, d_slow_ms: float = D_SLOW_MS,
                      timeout: float = 600.0) -> ReplayReport:
    """Run each batch on a fresh deployment of ``topology`` and report speedups."""
    root = Path(root or tempfile.mkdtemp(prefix="lakesweep-replay-"))
    batches = []
    for i, n in enumerate(batch_sizes):
        with Cluster(topology, root / f"batch{i}-{n}") as cluster:
            cluster.wait_workers()
            batches.append(run_batch(cluster, n, d_fast_ms, d_slow_ms, timeout))
    return ReplayReport(topology, batches, d_fast_ms, d_slow_ms)
