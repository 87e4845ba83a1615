"""A whole deployment in one process: simulated network, overlay, scheduler,
gateway, client and workers, plus fault injection."""

from __future__ import annotations

import enum
import json
import logging
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from fastapi.testclient import TestClient

from .. import gemt
from ..client import ClientSession
from ..errors import HarnessError
from ..events import EventLog
from ..gws import Gateway, create_app
from ..overlay import NatClass, wire
from ..scheduler import SchedulerConfig, SchedulerCore, SchedulerService
from ..worker import WorkerAgent
from .simnet import SimNetwork
from .world import OverlayWorld

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WorkerSpec:
    name: str
    slots: int
    emulate_ms: int  # per-simulation duration
    nat: NatClass = NatClass.RESTRICTED

    def __post_init__(self) -> None:
        if self.slots < 1:
            raise HarnessError(f"worker {self.name}: slots must be >= 1")
        if self.emulate_ms <= 0:
            raise HarnessError(f"worker {self.name}: duration must be > 0 ms")
        object.__setattr__(self, "nat", NatClass(self.nat))


@dataclass(frozen=True)
class TopologySpec:
    workers: tuple[WorkerSpec, ...]
    gateway_nat: NatClass = NatClass.OPEN
    relay: bool = True
    group_size: int = 10
    heartbeat: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.workers:
            raise HarnessError("a topology needs at least one worker")
        names = [w.name for w in self.workers]
        if len(set(names)) != len(names):
            raise HarnessError("worker names must be unique")
        object.__setattr__(self, "gateway_nat", NatClass(self.gateway_nat))

    @property
    def total_slots(self) -> int:
        return sum(w.slots for w in self.workers)

    def with_slots(self, slots: int) -> "TopologySpec":
        ws = tuple(WorkerSpec(w.name, slots, w.emulate_ms, w.nat) for w in self.workers)
        return TopologySpec(ws, self.gateway_nat, self.relay, self.group_size, self.heartbeat, self.seed)

    @classmethod
    def from_dict(cls, doc: dict) -> "TopologySpec":
        workers = tuple(
            WorkerSpec(w["name"], int(w["slots"]), int(w["emulate_ms"]), w.get("nat", "RESTRICTED"))
            for w in doc["workers"]
        )
        return cls(workers, doc.get("gateway_nat", "OPEN"), bool(doc.get("relay", True)),
                   int(doc.get("group_size", 10)), float(doc.get("heartbeat", 0.2)), int(doc.get("seed", 0)))

    @classmethod
    def from_file(cls, path) -> "TopologySpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "workers": [{"name": w.name, "slots": w.slots, "emulate_ms": w.emulate_ms, "nat": w.nat.value}
                        for w in self.workers],
            "gateway_nat": self.gateway_nat.value,
            "relay": self.relay,
            "group_size": self.group_size,
            "heartbeat": self.heartbeat,
            "seed": self.seed,
        }


def evaluation_topology(fast_ms: int = 6, slow_ms: int = 57, slots: int = 16) -> TopologySpec:
    """Three 16-slot execute nodes: one fast machine and two slower virtual machines."""
    return TopologySpec((
        WorkerSpec("fast-1", slots, fast_ms, NatClass.FULL_CONE),
        WorkerSpec("slow-1", slots, slow_ms, NatClass.PORT_RESTRICTED),
        WorkerSpec("slow-2", slots, slow_ms, NatClass.SYMMETRIC),
    ))


class FaultKind(str, enum.Enum):
    WORKER_KILL = "WORKER_KILL"
    FRAME_TAMPER = "FRAME_TAMPER"
    ARCHIVE_LOSS = "ARCHIVE_LOSS"


@dataclass
class Fault:
    kind: FaultKind
    target: str
    applied: threading.Event = field(default_factory=threading.Event)
    detail: dict = field(default_factory=dict)


class _ResultTap:
    """Sits between the scheduler and the gateway so faults can touch deliveries."""

    def __init__(self, service: SchedulerService, cluster: "Cluster"):
        self.service = service
        self.cluster = cluster

    def __getattr__(self, name):
        return getattr(self.service, name)

    def attach(self, on_result, on_job_failed) -> None:
        def result(job_id: str, archive: bytes):
            fault = self.cluster._take_archive_loss(job_id)
            if fault is not None:
                return on_job_failed(job_id, "lost: result archive lost in transit")
            return on_result(job_id, archive)

        self.service.attach(result, on_job_failed)


class Cluster:
    """Everything from the REST gateway down to the execute nodes.

    The gateway is reached through ``client`` (a :class:`ClientSession`
    over an in-process HTTP transport); workers, scheduler and gateway
    talk over the encrypted overlay on a :class:`SimNetwork`.
    """

    def __init__(self, topology: TopologySpec, root, events: EventLog | None = None,
                 scheduler_config: SchedulerConfig | None = None, workers: bool = True):
        self.topology = topology
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.events = events or EventLog()
        self.world = OverlayWorld(SimNetwork(seed=topology.seed), events=self.events, relay=topology.relay)
        self.sched_peer = self.world.peer("scheduler", topology.gateway_nat)
        cfg = scheduler_config or SchedulerConfig(heartbeat_period=topology.heartbeat)
        self.core = SchedulerCore(cfg, events=self.events)
        self.scheduler = SchedulerService(self.sched_peer, self.core, events=self.events).start()
        self._tap = _ResultTap(self.scheduler, self)
        self.gemt_config = gemt.GemtConfig(group_size=topology.group_size)
        self.gateway: Gateway | None = None
        self.client: ClientSession | None = None
        self._faults: list[Fault] = []
        self._fault_lock = threading.Lock()
        self._timers: list[threading.Thread] = []
        self.agents: dict[str, WorkerAgent] = {}
        self.start_gateway()
        if workers:
            for spec in topology.workers:
                self.start_worker(spec.name)

    # -- components --------------------------------------------------------------

    def start_gateway(self) -> Gateway:
        self.gateway = Gateway(self.root / "gateway", self._tap, self.gemt_config, events=self.events).start()
        self.app = create_app(self.gateway)
        self.client = ClientSession("http://gateway.test", http=TestClient(self.app, base_url="http://gateway.test"))
        return self.gateway

    def restart_gateway(self) -> Gateway:
        """Crash the gateway process and start a new one on the same data root."""
        self.gateway.kill()
        self.events.emit("harness.gateway_restart")
        return self.start_gateway()

    def worker_spec(self, name: str) -> WorkerSpec:
        for w in self.topology.workers:
            if w.name == name:
                return w
        raise HarnessError(f"no worker named {name!r} in the topology")

    def start_worker(self, name: str) -> WorkerAgent:
        spec = self.worker_spec(name)
        old = self.world.peers.get(name)
        identity = old.identity if old is not None else None
        peer = self.world.peer(name, spec.nat, identity=identity)
        agent = WorkerAgent(peer, "scheduler", spec.slots, self.root / "workers" / name,
                            heartbeat_period=self.topology.heartbeat, emulate_ms=spec.emulate_ms,
                            events=self.events)
        self.agents[name] = agent.start()
        return agent

    def kill_worker(self, name: str) -> None:
        if name not in self.agents:
            raise HarnessError(f"no running worker named {name!r}")
        self.agents.pop(name).kill()
        self.events.emit("harness.worker_killed", worker=name)

    # -- faults --------------------------------------------------------------------

    def inject_fault(self, kind: FaultKind | str, target: str, at: float | None = None,
                     when: Callable[[], bool] | None = None, count: int = 1) -> Fault:
        """Schedule a fault.

        ``at`` delays it by that many seconds; ``when`` holds it until the
        predicate is true; with neither it applies immediately. Targets:
        a worker name for WORKER_KILL and FRAME_TAMPER, a job id or ``"next"``
        for ARCHIVE_LOSS.
        """
        kind = FaultKind(kind)
        if kind in (FaultKind.WORKER_KILL, FaultKind.FRAME_TAMPER):
            self.worker_spec(target)
            if kind is FaultKind.WORKER_KILL and target not in self.agents:
                raise HarnessError(f"worker {target!r} is not running")
        elif target != "next" and not target.count("."):
            raise HarnessError(f"ARCHIVE_LOSS target must be a job id or 'next', got {target!r}")
        fault = Fault(kind, target, detail={"count": count})

        def fire():
            if at:
                time.sleep(at)
            if when is not None:
                while not when():
                    time.sleep(0.005)
            self._apply(fault)

        if at is None and when is None:
            self._apply(fault)
        else:
            t = threading.Thread(target=fire, name=f"fault-{kind.value}", daemon=True)
            t.start()
            self._timers.append(t)
        return fault

    def _apply(self, fault: Fault) -> None:
        self.events.emit("fault.inject", fault=fault.kind.value, target=fault.target)
        if fault.kind is FaultKind.WORKER_KILL:
            self.kill_worker(fault.target)
        elif fault.kind is FaultKind.FRAME_TAMPER:
            self._tamper(fault)
        else:
            with self._fault_lock:
                self._faults.append(fault)
        fault.applied.set()

    def _tamper(self, fault: Fault) -> None:
        host = self.world.peers[fault.target].host
        ips = {host.ip} | ({host.nat.public_ip} if host.nat is not None else set())
        left = [fault.detail["count"]]
        lock = threading.Lock()

        def tap(src, dst, data):
            if dst[0] not in ips or len(data) < 40 or data[0] not in (wire.CH_DATA, wire.CH_RELAY):
                return data
            with lock:
                if left[0] <= 0:
                    return data
                left[0] -= 1
            self.events.emit("fault.tampered", target=fault.target, size=len(data))
            mutable = bytearray(data)
            mutable[-1] ^= 0x5A  # lands in the AEAD tag
            return bytes(mutable)

        self.world.net.add_tap(tap)

    def _take_archive_loss(self, job_id: str) -> Fault | None:
        with self._fault_lock:
            for f in self._faults:
                if f.kind is FaultKind.ARCHIVE_LOSS and f.target in ("next", job_id):
                    self._faults.remove(f)
                    f.detail["job_id"] = job_id
                    self.events.emit("fault.archive_lost", job=job_id)
                    return f
        return None

    # -- helpers --------------------------------------------------------------------

    def wait_workers(self, timeout: float = 20.0) -> None:
        """Block until the scheduler has heard from every running agent."""
        end = time.monotonic() + timeout
        while time.monotonic() < end:
            if set(self.agents) <= set(self.core.workers):
                return
            time.sleep(0.02)
        raise HarnessError(f"workers never advertised: {sorted(set(self.agents) - set(self.core.workers))}")

    def close(self) -> None:
        for a in list(self.agents.values()):
            a.kill()
        self.agents.clear()
        if self.gateway is not None:
            self.gateway.close()
        self.scheduler.stop()
        self.world.close()

    def __enter__(self) -> "Cluster":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def seeded_victim(topology: TopologySpec, seed: int) -> tuple[str, int]:
    """Deterministic (victim, jobs-started-before-kill) choice for a fault run."""
    rng = random.Random(seed)
    return rng.choice([w.name for w in topology.workers]), rng.randint(1, 8)

