"""Deterministic test and benchmark harness."""

from .cluster import Cluster, Fault, FaultKind, TopologySpec, WorkerSpec, evaluation_topology, seeded_victim
from .local import LocalScheduler
from .replay import BatchResult, ReplayReport, replay_evaluation, run_batch
from .simnet import SimNetwork
from .virtual import ScheduledFault, VirtualOutcome, simulate
from .world import OverlayWorld

__all__ = [
    "BatchResult",
    "Cluster",
    "Fault",
    "FaultKind",
    "LocalScheduler",
    "OverlayWorld",
    "ReplayReport",
    "ScheduledFault",
    "SimNetwork",
    "TopologySpec",
    "VirtualOutcome",
    "WorkerSpec",
    "evaluation_topology",
    "replay_evaluation",
    "run_batch",
    "seeded_victim",
    "simulate",
]
