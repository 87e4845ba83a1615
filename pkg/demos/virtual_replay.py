"""Compare allocation across slot counts in virtual time (no wall clock, fully repeatable).

Every job is queued at time zero, so input generation cost is not part of
these makespans; the live replay (``lakesweep bench``) includes it.

    python demos/virtual_replay.py
"""

from lakesweep.harness import evaluation_topology, simulate


def main() -> None:
    for slots in (1, 2, 4, 8, 16):
        topo = evaluation_topology().with_slots(slots)
        out = simulate(topo, 10000, seed=0)
        per_worker = {}
        for ev in out.events.select("worker.job_start"):
            per_worker[ev["worker"]] = per_worker.get(ev["worker"], 0) + 1
        share = " ".join(f"{w}={n}" for w, n in sorted(per_worker.items()))
        print(f"slots/worker={slots:2d} makespan={out.makespan:7.3f}s "
              f"speedup_fast={10000 * 0.006 / out.makespan:5.2f} jobs: {share}")


if __name__ == "__main__":
    main()
