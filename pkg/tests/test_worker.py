import threading
import time

import pytest

from lakesweep import gemt, protocol
from lakesweep.domain import SimulationSpec
from lakesweep.errors import ContractViolation
from lakesweep.events import EventLog
from lakesweep.harness import inputs
from lakesweep.harness.world import OverlayWorld
from lakesweep.overlay import NatClass
from lakesweep.protocol import Kind, Message
from lakesweep.scheduler import SchedulerConfig, SchedulerCore, SchedulerService
from lakesweep.worker import AgentConfig, WorkerAgent

UID = "c" * 40


def make_jobs(n_sims, k, emulate_ms=None, uid=UID):
    files = inputs.experiment_files(n_sims)
    sims = gemt.load_simulations(files)
    if emulate_ms is not None:
        from lakesweep.model import LakeParams

        sims = [SimulationSpec(s.sim_id, {**s.input_files,
                inputs.PARAMS_NAME: LakeParams(emulate_ms=emulate_ms).to_text().encode()}) for s in sims]
    return gemt.group(sims, gemt.GemtConfig(group_size=k), uid)


def _wait(cond, timeout=20.0):
    end = time.monotonic() + timeout
    while time.monotonic() < end:
        if cond():
            return True
        time.sleep(0.02)
    return cond()


@pytest.fixture
def cluster(tmp_path):
    events = EventLog()
    world = OverlayWorld(events=events)
    sched_peer = world.peer("scheduler", NatClass.OPEN)
    results, failures = {}, {}
    lock = threading.Lock()

    def on_result(jid, archive):
        with lock:
            results.setdefault(jid, []).append(archive)

    core = SchedulerCore(SchedulerConfig(heartbeat_period=0.2), events=events)
    svc = SchedulerService(sched_peer, core, on_result=on_result,
                           on_job_failed=lambda j, r: failures.setdefault(j, r), events=events).start()
    agents = []

    def add_worker(name, nat=NatClass.RESTRICTED, slots=2, **kw):
        peer = world.peer(name, nat)
        agent = WorkerAgent(peer, "scheduler", slots, tmp_path / name, heartbeat_period=0.2, events=events, **kw)
        agents.append(agent.start())
        return agent

    class C:
        pass

    c = C()
    c.world, c.svc, c.results, c.failures, c.add_worker, c.events, c.agents = (
        world, svc, results, failures, add_worker, events, agents)
    yield c
    svc.stop()
    for a in agents:
        a.kill()
    world.close()


def test_zero_slots_rejected(tmp_path):
    with pytest.raises(ContractViolation):
        AgentConfig(peer_id="w", slots=0)
    with pytest.raises(ContractViolation):
        WorkerAgent(type("P", (), {"peer_id": "w"})(), "s", 0, tmp_path)


def test_agent_config_file(tmp_path):
    p = tmp_path / "agent.conf"
    p.write_text("peer_id = w1\nslots = 16\nmemory_mb = 16384\nscratch_root = /tmp/x\n"
                 "rendezvous = 127.0.0.1:5222\nscheduler = sched\nemulate_ms = 57\n")
    cfg = AgentConfig.from_file(p)
    assert (cfg.slots, cfg.memory_mb, cfg.emulate_ms, cfg.scheduler) == (16, 16384, 57, "sched")
    with pytest.raises(ContractViolation):
        AgentConfig.from_text("peer_id = w\nbogus = 1\n")


def test_ad_reflects_configuration(cluster):
    agent = cluster.add_worker("w16", slots=16)
    ad = agent.ad()
    assert ad.total_slots == 16 and ad.free_slots == 16
    assert _wait(lambda: "w16" in cluster.svc.core.workers)
    assert cluster.svc.core.workers["w16"].ad.total_slots == 16


def test_bundle_result_has_every_status(cluster):
    cluster.add_worker("w1")
    job = make_jobs(10, 10)[0]
    cluster.svc.submit(job)
    assert _wait(lambda: job.job_id in cluster.results)
    res = gemt.JobResult.from_archive(cluster.results[job.job_id][0])
    assert sorted(res.sims) == list(range(10))
    assert all(s.ok for s in res.sims.values())


def test_end_to_end_two_workers(cluster):
    cluster.add_worker("cone", NatClass.FULL_CONE, slots=2)
    cluster.add_worker("sym", NatClass.SYMMETRIC, slots=2)
    jobs = make_jobs(40, 2)
    for j in jobs:
        cluster.svc.submit(j)
    assert _wait(lambda: len(cluster.results) == len(jobs))
    assert all(len(v) == 1 for v in cluster.results.values())


def test_transport_transparency_relayed(tmp_path):
    events = EventLog()
    with OverlayWorld(events=events) as world:
        sched = world.peer("scheduler", NatClass.SYMMETRIC)
        results = {}
        svc = SchedulerService(sched, SchedulerCore(SchedulerConfig(heartbeat_period=0.2), events=events),
                               on_result=lambda j, a: results.setdefault(j, a), events=events).start()
        peer = world.peer("w", NatClass.SYMMETRIC)
        agent = WorkerAgent(peer, "scheduler", 2, tmp_path / "w", heartbeat_period=0.2).start()
        try:
            jobs = make_jobs(6, 2)
            for j in jobs:
                svc.submit(j)
            assert _wait(lambda: len(results) == 3)
            assert peer.link("scheduler").kind.value == "RELAYED"
        finally:
            svc.stop()
            agent.kill()


def test_slot_limit_respected(cluster):
    agent = cluster.add_worker("w", slots=2)
    for j in make_jobs(12, 1, emulate_ms=30):
        cluster.svc.submit(j)
    assert _wait(lambda: len(cluster.results) == 12)
    assert agent.max_concurrent <= 2


def test_concurrent_outputs_match_sequential(cluster, tmp_path):
    cluster.add_worker("w", slots=4)
    jobs = make_jobs(8, 2)
    for j in jobs:
        cluster.svc.submit(j)
    assert _wait(lambda: len(cluster.results) == len(jobs))
    for j in jobs:
        seq = gemt.run_job(j.archive, scratch_root=tmp_path / "seq").to_archive()
        assert cluster.results[j.job_id][0] == seq


def test_worker_kill_requeues_and_completes(cluster):
    victim = cluster.add_worker("victim", slots=2)
    cluster.add_worker("survivor", slots=2)
    jobs = make_jobs(20, 2, emulate_ms=40)
    for j in jobs:
        cluster.svc.submit(j)
    assert _wait(lambda: any(e["worker"] == "victim" for e in cluster.events.select("worker.job_start")))
    victim.kill()
    assert _wait(lambda: len(cluster.results) == len(jobs), 30)
    assert all(len(v) == 1 for v in cluster.results.values())
    assert cluster.events.select("sched.worker_dead", worker="victim")


def test_restarted_agent_starts_clean_and_rejoins(cluster, tmp_path):
    from lakesweep.overlay import Identity

    ident = Identity()
    peer = cluster.world.peer("phoenix", NatClass.PORT_RESTRICTED, identity=ident)
    agent = WorkerAgent(peer, "scheduler", 1, tmp_path / "phoenix", heartbeat_period=0.2).start()
    junk = tmp_path / "phoenix" / "slot0" / "leftover"
    junk.mkdir(parents=True)
    (tmp_path / "phoenix" / "results" / "x.partial").write_bytes(b"half")
    agent.kill()
    peer2 = cluster.world.peer("phoenix", NatClass.PORT_RESTRICTED, identity=ident)
    agent2 = WorkerAgent(peer2, "scheduler", 1, tmp_path / "phoenix", heartbeat_period=0.2).start()
    cluster.agents.append(agent2)
    assert not junk.exists()
    assert not (tmp_path / "phoenix" / "results" / "x.partial").exists()
    job = make_jobs(2, 2)[0]
    cluster.svc.submit(job)
    assert _wait(lambda: job.job_id in cluster.results)


def test_corrupt_archive_gives_failure_result(tmp_path):
    res = gemt.run_job(b"not a zip", scratch_root=tmp_path)
    assert not res.ok and "corrupt" in res.reason


def test_full_agent_rejects_extra_dispatch(tmp_path):
    sent = []

    class FakePeer:
        peer_id = "w"

        def on_message(self, h):
            self.h = h

        def send_to(self, pid, data, **kw):
            sent.append(Message.decode(data))

        def kill(self):
            pass

    gate = threading.Event()
    agent = WorkerAgent(FakePeer(), "s", 1, tmp_path, heartbeat_period=10,
                        runner=lambda d: gate.wait(5)).start()
    try:
        job_a, job_b = make_jobs(2, 1)
        agent.peer.h("s", protocol.dispatch(job_a.job_id, 1, job_a.archive).encode())
        assert _wait(lambda: agent.running_now == 1)
        agent.peer.h("s", protocol.dispatch(job_b.job_id, 1, job_b.archive).encode())
        assert _wait(lambda: any(m.kind is Kind.REJECT for m in sent))
        assert agent.ad().free_slots == 0
    finally:
        gate.set()
        agent.kill()
