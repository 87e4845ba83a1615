"""Kill a worker halfway through a batch and show the retry path in the event log.

    python demos/faults.py
"""

import tempfile
from pathlib import Path

from lakesweep.harness import Cluster, FaultKind, TopologySpec, WorkerSpec, inputs
from lakesweep.overlay import NatClass


def main() -> None:
    topo = TopologySpec((
        WorkerSpec("north", 4, 20, NatClass.FULL_CONE),
        WorkerSpec("south", 4, 20, NatClass.SYMMETRIC),
        WorkerSpec("east", 4, 20, NatClass.PORT_RESTRICTED),
    ), group_size=5, heartbeat=0.1)
    root = Path(tempfile.mkdtemp(prefix="lakesweep-faults-"))
    sim_dir = root / "baseline"
    sim_dir.mkdir()
    for name, data in inputs.baseline().items():
        (sim_dir / name).write_bytes(data)

    with Cluster(topo, root / "cluster") as cluster:
        cluster.wait_workers()
        cluster.inject_fault(FaultKind.WORKER_KILL, "south",
                             when=lambda: len(cluster.events.select("worker.job_start", worker="south")) >= 4)
        uid = cluster.client.run_sweep(sim_dir, inputs.DRIVER_NAME, "AirTemp", -10, 30, 300)
        done = cluster.client.wait(uid, timeout=120, poll=0.05)
        print(f"state={done.state.value} jobs_done={done.metrics['jobs_done']}/{done.metrics['jobs_total']}")
        for kind in ("fault.inject", "sched.worker_dead", "sched.requeue", "sched.duplicate"):
            print(f"  {kind}: {len(cluster.events.select(kind))}")


if __name__ == "__main__":
    main()
