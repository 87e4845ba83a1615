"""Sweep AirTemp across an in-process deployment and fetch a column subset.

    python demos/quickstart.py [N]
"""

import sys
import tempfile
from pathlib import Path

from lakesweep import gemt
from lakesweep.harness import Cluster, evaluation_topology, inputs


def main(n: int = 200) -> None:
    root = Path(tempfile.mkdtemp(prefix="lakesweep-demo-"))
    sim_dir = root / "baseline"
    sim_dir.mkdir()
    for name, data in inputs.baseline().items():
        (sim_dir / name).write_bytes(data)

    with Cluster(evaluation_topology(), root / "cluster") as cluster:
        cluster.wait_workers()
        client = cluster.client
        uid = client.run_sweep(sim_dir, inputs.DRIVER_NAME, "AirTemp", -10, 30, n)
        print(f"submitted uid={uid}")
        done = client.wait(uid, timeout=300, poll=0.1)
        print(f"state={done.state.value} fraction={done.fraction}")
        for key in ("service_response", "input_processing", "jobs_total"):
            print(f"  {key}={done.metrics.get(key)}")
        out = client.get_results(uid, root / "results", columns=["temp_surface"])
        print(f"surface temperatures unpacked under {out}")
        outputs, failed, _ = gemt.read_collated(client.download_results(uid, sims=[0, n - 1]))
        for sim_id, files in sorted(outputs.items()):
            last = files["lake_output.csv"].decode().splitlines()[-1]
            print(f"  sim {sim_id}: last row {last}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 200)
