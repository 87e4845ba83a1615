"""Discrete-event run of the real scheduler core against modeled workers.

No threads and no wall clock: the same topology, seed and fault schedule
always produce the same event log. The live :class:`~.cluster.Cluster`
exercises the real transport; this exercises scheduling decisions at
scale and makes them reproducible.
"""

from __future__ import annotations

import heapq
import itertools
import math
import random
from dataclasses import dataclass, field
from typing import Sequence

from ..domain import JobBundle, job_id as make_job_id
from ..errors import HarnessError
from ..events import EventLog
from ..protocol import Kind, WorkerAd
from ..scheduler import Deliver, JobFailed, SchedulerConfig, SchedulerCore, Send
from .cluster import FaultKind, TopologySpec

LINK_DELAY = 0.001  # one-way, seconds
TAMPER_DELAY = 0.05  # one lost frame costs a retransmission timeout
TICK = 0.05


@dataclass(frozen=True)
class ScheduledFault:
    at: float
    kind: FaultKind
    target: str


@dataclass
class VirtualOutcome:
    events: EventLog
    makespan: float
    delivered: dict[str, int] = field(default_factory=dict)
    failed: dict[str, str] = field(default_factory=dict)
    lost: set[str] = field(default_factory=set)
    jobs: dict[str, tuple[int, ...]] = field(default_factory=dict)

    @property
    def exactly_once(self) -> bool:
        return all(self.delivered.get(j, 0) + (j in self.failed) == 1 for j in self.jobs)

    def fingerprint(self) -> list[tuple]:
        return self.events.as_tuples(with_time=True)


class _Clock:
    def __init__(self):
        self.now = 0.0

    def __call__(self) -> float:
        return self.now


@dataclass
class _VWorker:
    name: str
    slots: int
    ms: float
    alive: bool = True
    boot: str = "b0"
    running: dict = field(default_factory=dict)  # job_id -> finish time
    aborted: set = field(default_factory=set)
    tamper: int = 0


def simulate(topology: TopologySpec, n_sims: int, seed: int = 0,
             faults: Sequence[ScheduledFault] = (), config: SchedulerConfig | None = None,
             horizon: float = 3600.0, uid: str = "f" * 40) -> VirtualOutcome:
    rng = random.Random(seed)
    clock = _Clock()
    events = EventLog(clock=clock)
    core = SchedulerCore(config or SchedulerConfig(heartbeat_period=topology.heartbeat), events=events)
    k = topology.group_size
    workers = {w.name: _VWorker(w.name, w.slots, float(w.emulate_ms)) for w in topology.workers}
    heap: list = []
    order = itertools.count()

    def at(t: float, what: str, *args) -> None:
        heapq.heappush(heap, (t, next(order), what, args))

    jobs = {}
    for i in range(math.ceil(n_sims / k)):
        sims = tuple(range(i * k, min(n_sims, (i + 1) * k)))
        jid = make_job_id(uid, i)
        jobs[jid] = sims
        core.enqueue(JobBundle(jid, sims, b"job"), 0.0)
    out = VirtualOutcome(events, 0.0, jobs=jobs)
    for w in workers.values():
        at(rng.uniform(0, 0.01), "beat", w.name)
    for f in faults:
        at(f.at, "fault", f)
    at(0.0, "tick")

    def ad(w: _VWorker) -> WorkerAd:
        return WorkerAd(w.name, w.slots, w.slots - len(w.running), 0, clock.now, None,
                        tuple(sorted(w.running)), w.boot)

    def delay(w: _VWorker) -> float:
        if w.tamper:
            w.tamper -= 1
            events.emit("virtual.tampered", worker=w.name)
            return LINK_DELAY + TAMPER_DELAY
        return LINK_DELAY

    def run(actions) -> None:
        for a in actions:
            if isinstance(a, Send):
                at(clock.now + delay(workers[a.worker_id]), "msg", a.worker_id, a.message)
            elif isinstance(a, Deliver):
                out.delivered[a.job_id] = out.delivered.get(a.job_id, 0) + 1
            elif isinstance(a, JobFailed):
                out.failed[a.job_id] = a.reason

    def resolved() -> bool:
        return len(out.delivered) + len(out.failed) >= len(jobs)

    while heap and not resolved():
        t, _, what, args = heapq.heappop(heap)
        if t > horizon:
            break
        clock.now = t
        if what == "tick":
            run(core.tick(t))
            at(t + TICK, "tick")
        elif what == "beat":
            w = workers[args[0]]
            if w.alive:
                run(core.advertise(ad(w), t))
                at(t + topology.heartbeat, "beat", w.name)
        elif what == "msg":
            w = workers[args[0]]
            msg = args[1]
            if not w.alive:
                continue
            jid = msg.header.get("job_id")
            if msg.kind is Kind.DISPATCH:
                if len(w.running) >= w.slots:
                    at(t + LINK_DELAY, "reject", w.name, jid)
                    continue
                n = len(jobs[jid])
                finish = t + n * w.ms / 1000.0 * rng.uniform(1.0, 1.1)
                w.running[jid] = finish
                events.emit("worker.job_start", worker=w.name, job=jid)
                at(finish, "finish", w.name, jid, w.boot)
            elif msg.kind is Kind.ABORT and jid in w.running:
                w.aborted.add(jid)
        elif what == "reject":
            run(core.on_reject(args[0], args[1], t))
            run(core.tick(t))
        elif what == "finish":
            w = workers[args[0]]
            jid, boot = args[1], args[2]
            if not w.alive or boot != w.boot or jid not in w.running:
                continue
            del w.running[jid]
            aborted = jid in w.aborted
            w.aborted.discard(jid)
            events.emit("worker.job_end", worker=w.name, job=jid, ok=True, aborted=aborted)
            at(t + delay(w), "result", w.name, jid, aborted)
        elif what == "result":
            name, jid, aborted = args
            if not workers[name].alive:
                continue
            if not aborted and jid not in out.lost and any(
                    f.kind is FaultKind.ARCHIVE_LOSS and f.target == jid and f.at <= t for f in faults):
                out.lost.add(jid)
                events.emit("fault.archive_lost", job=jid)
            run(core.on_result(name, jid, not aborted, b"" if aborted else b"result", t,
                               reason="aborted" if aborted else "", aborted=aborted))
            run(core.tick(t))  # the live service ticks after every inbox batch
        elif what == "fault":
            f: ScheduledFault = args[0]
            if f.target not in workers and f.kind is not FaultKind.ARCHIVE_LOSS:
                raise HarnessError(f"unknown fault target {f.target!r}")
            events.emit("fault.inject", fault=f.kind.value, target=f.target)
            if f.kind is FaultKind.WORKER_KILL:
                w = workers[f.target]
                w.alive = False
                w.running.clear()
            elif f.kind is FaultKind.FRAME_TAMPER:
                workers[f.target].tamper += 1
    out.makespan = clock.now
    return out
