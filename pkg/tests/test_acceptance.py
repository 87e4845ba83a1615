"""End-to-end acceptance criteria, one test each.

Every test prints a single ``PASS``/``FAIL`` line with its measured
values before asserting, so ``pytest -s`` or the captured log shows the
verdicts side by side.
"""

import io
import itertools
import json
import math
import random
import sys
import threading
import time
import zipfile
from fractions import Fraction

import numpy as np
import pytest

from lakesweep import gemt
from lakesweep.domain import SimulationSpec
from lakesweep.harness import (
    Cluster,
    FaultKind,
    TopologySpec,
    WorkerSpec,
    evaluation_topology,
    replay_evaluation,
    seeded_victim,
)
from lakesweep.harness import inputs
from lakesweep.harness.world import OverlayWorld
from lakesweep.model import OUTPUT_FILE, LakeParams, run_model, simulate_files
from lakesweep.overlay import LinkKind, NatClass
from lakesweep.sweep import DriverTable, SweepSpec, expand, linear_offsets

from test_overlay import oracle_direct

DRIVER = inputs.DRIVER_NAME


@pytest.fixture
def verdict(capsys, request):
    def say(number: int, name: str, ok: bool, **measured):
        detail = " ".join(f"{k}={v}" for k, v in measured.items())
        with capsys.disabled():
            print(f"\n[acceptance {number:2d}] {'PASS' if ok else 'FAIL'} {name}: {detail}")
        return ok

    return say


def baseline_dir(path):
    path.mkdir(parents=True, exist_ok=True)
    for name, data in inputs.baseline().items():
        (path / name).write_bytes(data)
    return path


def three_workers(seed=0):
    return TopologySpec((
        WorkerSpec("w1", 4, 20, NatClass.FULL_CONE),
        WorkerSpec("w2", 4, 20, NatClass.PORT_RESTRICTED),
        WorkerSpec("w3", 4, 20, NatClass.SYMMETRIC),
    ), group_size=5, heartbeat=0.1, seed=seed)


# 1 -------------------------------------------------------------------------------------


def test_01_sweep_fidelity(verdict):
    t0 = time.perf_counter()
    got = linear_offsets(-10, 30, 10000)
    elapsed = time.perf_counter() - t0
    s, e = Fraction(-10), Fraction(30)
    oracle = [float(s + (e - s) * i / 9999) for i in range(10000)]
    worst = max(abs(g - w) / max(abs(w), 1e-300) for g, w in zip(got[1:-1], oracle[1:-1]) if w != 0)
    zero_ok = all(g == 0.0 for g, w in zip(got, oracle) if w == 0)
    ok = (len(got) == 10000 and got[0] == -10.0 and got[-1] == 30.0
          and all(a < b for a, b in zip(got, got[1:])) and worst <= 1e-12 and zero_ok and elapsed < 1.0)
    assert verdict(1, "sweep fidelity", ok, count=len(got), first=got[0], last=got[-1],
                   max_rel_err=f"{worst:.2e}", seconds=f"{elapsed:.3f}")


# 2 -------------------------------------------------------------------------------------


def test_02_partition(verdict):
    shared = b"depth_layers=2\n"
    sims = [SimulationSpec(i, {"p.nml": shared, DRIVER: f"time,AirTemp\n0,{i}\n".encode()}) for i in range(10000)]
    t0 = time.perf_counter()
    bundles = gemt.group(sims, gemt.GemtConfig(group_size=5), "c" * 40)
    elapsed = time.perf_counter() - t0
    flat = sorted(s for b in bundles for s in b.sim_ids)
    # each archive must unpack to exactly the sims its bundle claims
    spot = random.Random(2).sample(bundles, 50)
    unpacked_ok = all(sorted(gemt.unpack(b.archive)[1]) == sorted(b.sim_ids) for b in spot)
    ok = (len(bundles) == 2000 and flat == list(range(10000)) and len(set(flat)) == 10000
          and all(len(b.sim_ids) == 5 for b in bundles) and unpacked_ok and elapsed < 5.0)
    assert verdict(2, "partition", ok, jobs=len(bundles), sims=len(flat), seconds=f"{elapsed:.2f}")


# 3 -------------------------------------------------------------------------------------


@pytest.mark.slow
def test_03_evaluation_replay(verdict, tmp_path):
    t0 = time.monotonic()
    report = replay_evaluation(evaluation_topology(), [3000, 5000, 10000], root=tmp_path / "replay")
    big = report.batches[-1]
    (tmp_path / "report.txt").write_text(report.to_text())
    spans = {}
    for slots in (1, 2, 4, 16):
        r = replay_evaluation(evaluation_topology().with_slots(slots), [600], root=tmp_path / f"slots{slots}")
        spans[slots] = r.batches[0].makespan_s if r.valid else math.inf
    # non-increasing, allowing 5% scheduling noise between neighbours
    order = sorted(spans)
    monotone = all(spans[b] <= spans[a] * 1.05 for a, b in zip(order, order[1:]))
    elapsed = time.monotonic() - t0
    ok = (report.valid and big.speedup_fast >= 2.0 and big.speedup_slow >= 10.0 and monotone
          and elapsed < 600)
    assert verdict(3, "evaluation replay", ok,
                   makespans="/".join(f"{b.makespan_s:.2f}" for b in report.batches),
                   speedup_fast=f"{big.speedup_fast:.2f}", speedup_slow=f"{big.speedup_slow:.2f}",
                   slot_makespans="/".join(f"{s}:{spans[s]:.2f}" for s in order),
                   seconds=f"{elapsed:.0f}")


# 4 -------------------------------------------------------------------------------------


def test_04_async_gateway(verdict, tmp_path):
    with Cluster(three_workers(), tmp_path / "c") as cluster:
        cluster.wait_workers()
        sim_dir = baseline_dir(tmp_path / "in")
        t0 = time.monotonic()
        uid = cluster.client.run_sampled(sim_dir, DRIVER, "AirTemp", "normal", {"mean": 0, "sd": 2}, 1000, seed=11)
        client_s = time.monotonic() - t0
        first = cluster.client.check_completion(uid)
        done = cluster.client.wait(uid, timeout=120, poll=0.05)
    m = done.metrics
    ordered = m["replied_at"] < m["inputs_ready_at"]
    ok = (done.state.value == "COMPLETED" and m["service_response"] < m["input_processing"]
          and client_s < 2.0 and ordered and first.state.value in ("SUBMITTED", "GENERATING", "RUNNING"))
    assert verdict(4, "async gateway", ok, service_response_ms=m["service_response"],
                   input_processing_ms=m["input_processing"], client_uid_s=f"{client_s:.3f}",
                   state_after_reply=first.state.value)


# 5 -------------------------------------------------------------------------------------


def test_05_nat_matrix(verdict):
    classes = list(NatClass)
    t0 = time.monotonic()
    mismatches, lost, direct = [], 0, 0
    with OverlayWorld() as world:
        for a, b in itertools.product(classes, repeat=2):
            pa = world.peer(f"a-{a.value}-{b.value}", a)
            pb = world.peer(f"b-{a.value}-{b.value}", b)
            got, done = [], threading.Event()

            def handler(pid, msg, got=got, done=done):
                got.append(msg)
                if len(got) == 100:
                    done.set()

            pb.on_message(handler)
            link = pa.connect(pb.peer_id)
            want = LinkKind.DIRECT if oracle_direct(a.value, b.value) else LinkKind.RELAYED
            if link.kind is not want:
                mismatches.append((a.value, b.value, link.kind.value))
            direct += link.kind is LinkKind.DIRECT
            msgs = [i.to_bytes(2, "big") for i in range(100)]
            for m in msgs:
                link.send(m)
            done.wait(10)
            if got != msgs:
                lost += 1
            pa.kill()
            pb.kill()
        sym = (NatClass.SYMMETRIC.value, NatClass.SYMMETRIC.value)
    elapsed = time.monotonic() - t0
    ok = not mismatches and lost == 0 and elapsed < 60 and not oracle_direct(*sym)
    assert verdict(5, "NAT traversal matrix", ok, pairs=25, direct=direct, relayed=25 - direct,
                   mismatches=mismatches or 0, pairs_with_loss=lost, seconds=f"{elapsed:.1f}")


# 6 -------------------------------------------------------------------------------------


@pytest.mark.slow
def test_06_exactly_once_under_faults(verdict, tmp_path):
    n = 300
    base = inputs.baseline()
    spec = SweepSpec(DRIVER, "AirTemp", start_value=-10, end_value=30, count=n)
    expected = {s.sim_id: simulate_files(s.input_files)[OUTPUT_FILE] for s in expand(base, spec)}
    violations, kills = [], 0
    sim_dir = baseline_dir(tmp_path / "in")
    for seed in range(20):
        topo = three_workers(seed)
        victim, after = seeded_victim(topo, seed)
        with Cluster(topo, tmp_path / f"run{seed}") as cluster:
            cluster.wait_workers()
            fault = cluster.inject_fault(
                FaultKind.WORKER_KILL, victim,
                when=lambda c=cluster, v=victim, k=after: len(c.events.select("worker.job_start", worker=v)) >= k)
            uid = cluster.client.run_sweep(sim_dir, DRIVER, "AirTemp", -10, 30, n)
            done = cluster.client.wait(uid, timeout=120, poll=0.05)
            data = cluster.client.download_results(uid) if done.terminal else b""
            kills += fault.applied.is_set()
        if done.state.value != "COMPLETED":
            violations.append((seed, done.state.value))
            continue
        names = zipfile.ZipFile(io.BytesIO(data)).namelist()
        outputs, failed, _ = gemt.read_collated(data)
        if (len(names) != len(set(names)) or failed or sorted(outputs) != list(range(n))
                or any(outputs[i][OUTPUT_FILE] != expected[i] for i in range(n))):
            violations.append((seed, "collation"))
    ok = not violations and kills == 20
    assert verdict(6, "exactly-once under faults", ok, runs=20, kills_applied=kills,
                   violations=len(violations), detail=violations or "none")


# 7 -------------------------------------------------------------------------------------


def _stateless_run(root, restart: bool):
    with Cluster(three_workers(), root) as cluster:
        cluster.wait_workers()
        sim_dir = baseline_dir(root / "in")
        uid = cluster.client.run_sweep(sim_dir, DRIVER, "AirTemp", -10, 30, 120)
        if restart:
            cluster.restart_gateway()  # between submit and status
        first = cluster.client.check_completion(uid)
        done = cluster.client.wait(uid, timeout=120, poll=0.05)
        if restart:
            cluster.restart_gateway()  # between completion and results
        full = cluster.client.download_results(uid)
        part = cluster.client.download_results(uid, sims=[3, 7], columns=["temp_surface"])
        final = cluster.client.check_completion(uid)
        restarts = len(cluster.events.select("harness.gateway_restart"))

    def view(c):
        keep = ("jobs_total", "jobs_done", "jobs_failed")
        return c.state.value, c.fraction, c.reason, {k: c.metrics.get(k) for k in keep}

    return {"first_known": first.state.value in ("SUBMITTED", "GENERATING", "RUNNING", "COMPLETED"),
            "done": view(done), "final": view(final), "full": full, "part": part, "restarts": restarts}


@pytest.mark.slow
def test_07_gateway_statelessness(verdict, tmp_path):
    plain = _stateless_run(tmp_path / "plain", restart=False)
    bounced = _stateless_run(tmp_path / "bounced", restart=True)
    same = {k: plain[k] == bounced[k] for k in ("first_known", "done", "final", "full", "part")}
    ok = all(same.values()) and bounced["restarts"] == 2 and plain["done"][0] == "COMPLETED"
    assert verdict(7, "gateway statelessness", ok, restarts=bounced["restarts"],
                   identical=",".join(k for k, v in same.items() if v),
                   differing=",".join(k for k, v in same.items() if not v) or "none",
                   results_bytes=len(plain["full"]))


# 8 -------------------------------------------------------------------------------------


def test_08_security_policy(verdict, tmp_path):
    canary = tmp_path / "canary"
    touch = f"#!/bin/sh\ntouch {canary}\n".encode()
    execs, armed = [], threading.Event()

    def audit(event, args):
        if armed.is_set() and event in ("subprocess.Popen", "os.system", "os.exec", "os.posix_spawn",
                                        "os.spawn", "os.fork", "os.startfile", "ctypes.dlopen"):
            execs.append(event)

    sys.addaudithook(audit)
    hostile = {
        "sim_000/run.sh": (touch, 0o644),
        "sim_000/hook.py": (b"import os; os.system('true')\n", 0o644),
        "sim_000/met_hourly.csv": (touch, 0o644),  # script hidden behind a data name
        "sim_000/blob.dat": (b"\x7fELF\x02\x01\x01\x00", 0o644),
        "sim_000/notes.txt": (b"inert", 0o755),
    }
    statuses = {}
    with Cluster(three_workers(), tmp_path / "c") as cluster:
        cluster.wait_workers()
        armed.set()
        try:
            for name, (payload, mode) in hostile.items():
                files = inputs.experiment_files(2)
                buf = io.BytesIO()
                with zipfile.ZipFile(buf, "w") as zf:
                    for n, d in files.items():
                        if n != name:
                            zf.writestr(n, d)
                    info = zipfile.ZipInfo(name)
                    info.external_attr = (0o100000 | mode) << 16
                    zf.writestr(info, payload)
                r = cluster.client.http.post("/experiment", files={"archive": ("u.zip", buf.getvalue())})
                statuses[name] = r.status_code
            # inert text naming the canary is plain data and runs normally
            files = inputs.experiment_files(2)
            files["sim_001/readme.txt"] = f"touch {canary}".encode()
            exp = tmp_path / "exp"
            for n, d in files.items():
                (exp / n).parent.mkdir(parents=True, exist_ok=True)
                (exp / n).write_bytes(d)
            uid = cluster.client.run_experiment(exp)
            done = cluster.client.wait(uid, timeout=60, poll=0.05)
        finally:
            armed.clear()
        scratch_exec = [p for p in (tmp_path / "c").rglob("*") if p.is_file() and p.stat().st_mode & 0o111]
    ok = (all(s == 403 for s in statuses.values()) and done.state.value == "COMPLETED"
          and not canary.exists() and not execs and not scratch_exec)
    assert verdict(8, "security policy", ok, rejected=f"{sum(s == 403 for s in statuses.values())}/{len(statuses)}",
                   canary_exists=canary.exists(), exec_events=len(execs), executable_files=len(scratch_exec))


# 9 -------------------------------------------------------------------------------------


def _driver(air):
    lines = ["time,AirTemp"] + [f"{i},{a!r}" for i, a in enumerate(air)]
    return DriverTable.parse("\n".join(lines) + "\n")


def test_09_model_sanity(verdict):
    rng = np.random.default_rng(20240601)
    bad = {"fixed_point": 0, "limit": 0, "bounded": 0, "determinism": 0}
    for _ in range(1000):
        p = LakeParams(depth_layers=int(rng.integers(1, 7)), layer_thickness_m=float(rng.uniform(0.1, 5)),
                       k0=float(rng.uniform(0.01, 1.0)), d=float(rng.uniform(0.1, 50)),
                       initial_temp_c=float(rng.uniform(-5, 30)))
        air = [float(a) for a in rng.uniform(-40, 40, int(rng.integers(1, 40)))]
        out = run_model(p, _driver(air))
        lo, hi = min(p.initial_temp_c, *air), max(p.initial_temp_c, *air)
        if not (np.all(np.isfinite(out.values)) and out.values.min() >= lo - 1e-9 and out.values.max() <= hi + 1e-9):
            bad["bounded"] += 1
        still = run_model(p, _driver([p.initial_temp_c] * len(air)))
        if not np.all(still.values == p.initial_temp_c):
            bad["fixed_point"] += 1
        full = run_model(LakeParams(depth_layers=1, k0=1.0, d=math.inf, initial_temp_c=p.initial_temp_c), _driver(air))
        # t + 1.0 * (a - t) is a up to one rounding step
        if not np.allclose(full.values[1:, 0], air[:-1], rtol=1e-12, atol=1e-12):
            bad["limit"] += 1
        if out.to_csv() != run_model(p, _driver(air)).to_csv():
            bad["determinism"] += 1
    base = inputs.baseline()
    double_run = simulate_files(base) == simulate_files(base)
    ok = not any(bad.values()) and double_run
    assert verdict(9, "model sanity", ok, inputs=1000, double_run_equal=double_run,
                   **{f"violations_{k}": v for k, v in bad.items()})


# 10 ------------------------------------------------------------------------------------


def test_10_subset_retrieval(verdict, tmp_path):
    with Cluster(three_workers(), tmp_path / "c") as cluster:
        cluster.wait_workers()
        uid = cluster.client.run_sweep(baseline_dir(tmp_path / "in"), DRIVER, "AirTemp", -10, 30, 20)
        cluster.client.wait(uid, timeout=60, poll=0.05)
        full = cluster.client.download_results(uid)
        wanted = ["temp_surface"]
        part = cluster.client.download_results(uid, columns=wanted)
    outputs, failed, summary = gemt.read_collated(part)
    headers = {tuple(o[OUTPUT_FILE].decode().splitlines()[0].split(",")[1:]) for o in outputs.values()}
    full_out, _, _ = gemt.read_collated(full)
    rows_kept = all(len(outputs[s][OUTPUT_FILE].splitlines()) == len(full_out[s][OUTPUT_FILE].splitlines())
                    for s in outputs)
    ok = len(part) < len(full) and headers == {tuple(wanted)} and len(outputs) == 20 and not failed and rows_kept
    assert verdict(10, "subset retrieval", ok, full_bytes=len(full), subset_bytes=len(part),
                   columns=json.dumps(sorted(headers)))
