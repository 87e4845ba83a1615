import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lakesweep import protocol
from lakesweep.domain import JobBundle, job_id
from lakesweep.errors import ContractViolation
from lakesweep.protocol import Kind, Message, WorkerAd
from lakesweep.scheduler import (
    Deliver,
    JobFailed,
    Journal,
    Outcome,
    SchedulerConfig,
    SchedulerCore,
    Send,
    matchmake,
)

UID = "a" * 40


def bundle(i, uid=UID):
    return JobBundle(job_id(uid, i), (i,), archive=f"job{i}".encode())


def ad(wid, slots, free=None, boot="b1", running=()):
    return WorkerAd(wid, slots, slots if free is None else free, 1024, 0.0, None, tuple(running), boot)


def dispatched(actions):
    return [(a.message.header["job_id"], a.worker_id) for a in actions
            if isinstance(a, Send) and a.message.kind is Kind.DISPATCH]


# -- matchmaking ----------------------------------------------------------------


def test_single_match_decrements_free():
    m = matchmake(["j0"], [ad("w", 16)])
    assert m.pairs == [("j0", "w")]
    assert m.free_slots["w"] == 15


def test_hundred_jobs_on_three_sixteen_slot_workers():
    m = matchmake([f"j{i}" for i in range(100)], [ad("a", 16), ad("b", 16), ad("c", 16)])
    assert len(m) == 48
    assert [j for j, _ in m] == [f"j{i}" for i in range(48)]  # FIFO head first


def test_no_ads_no_assignment():
    assert len(matchmake(["j0", "j1"], [])) == 0


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 300), st.lists(st.integers(0, 20), max_size=6))
def test_matchmake_counts_and_uniqueness(n_jobs, frees):
    ads = [ad(f"w{i}", max(f, 1), f) for i, f in enumerate(frees)]
    m = matchmake([f"j{i}" for i in range(n_jobs)], ads)
    assert len(m) == min(n_jobs, sum(frees))
    assert len({j for j, _ in m}) == len(m)
    for a in ads:
        used = sum(1 for _, w in m if w == a.worker_id)
        assert used <= a.free_slots
        assert m.free_slots[a.worker_id] == a.free_slots - used


# -- queue -----------------------------------------------------------------------


def test_enqueue_positions_fifo():
    core = SchedulerCore()
    assert [core.enqueue(bundle(i), 0) for i in range(3)] == [0, 1, 2]


def test_duplicate_job_rejected_queue_unchanged():
    core = SchedulerCore()
    core.enqueue(bundle(0), 0)
    with pytest.raises(ContractViolation):
        core.enqueue(bundle(0), 0)
    assert core.queue_depth == 1


def test_two_thousand_jobs():
    core = SchedulerCore()
    n_jobs = math.ceil(10000 / 5)
    for i in range(n_jobs):
        core.enqueue(bundle(i), 0)
    assert core.queue_depth == 2000


# -- dispatch lifecycle (virtual time) ------------------------------------------------


def test_happy_path_pending_then_success():
    core = SchedulerCore()
    core.enqueue(bundle(0), 0)
    core.advertise(ad("w", 4), 0)
    acts = core.tick(0.1)
    assert dispatched(acts) == [(job_id(UID, 0), "w")]
    assert core.records(job_id(UID, 0))[0].outcome is Outcome.PENDING
    out = core.on_result("w", job_id(UID, 0), True, b"res", 0.5)
    assert out == [Deliver(job_id(UID, 0), b"res", "w")]
    assert core.records(job_id(UID, 0))[0].outcome is Outcome.SUCCESS


def test_heartbeat_lapse_marks_lost_and_requeues():
    cfg = SchedulerConfig(heartbeat_period=2, missed_beats=3)
    core = SchedulerCore(cfg)
    core.enqueue(bundle(0), 0)
    core.advertise(ad("dead", 1), 0)
    core.tick(0)
    core.advertise(ad("alive", 1), 5)
    assert dispatched(core.tick(5.9)) == []  # still inside the window
    acts = core.tick(6.1)
    recs = core.records(job_id(UID, 0))
    assert recs[0].outcome is Outcome.LOST
    assert dispatched(acts) == [(job_id(UID, 0), "alive")]
    assert recs[-1].attempt == 2


def test_wall_clock_limit_fails_and_retries_until_exhausted():
    cfg = SchedulerConfig(heartbeat_period=100, max_retries=3, job_timeout=1.0)
    core = SchedulerCore(cfg)
    jid = job_id(UID, 0)
    core.enqueue(bundle(0), 0)
    core.advertise(ad("w", 8), 0)
    t, failed = 0.0, []
    for _ in range(10):
        acts = core.tick(t)
        failed += [a for a in acts if isinstance(a, JobFailed)]
        t += 1.5
    recs = core.records(jid)
    assert len(recs) == 4  # attempt <= max_retries + 1
    assert all(r.outcome is Outcome.FAILURE and r.reason == "timeout" for r in recs)
    assert [a.job_id for a in failed] == [jid]


def test_duplicate_result_first_wins():
    core = SchedulerCore(SchedulerConfig(heartbeat_period=1))
    jid = job_id(UID, 0)
    core.enqueue(bundle(0), 0)
    core.advertise(ad("slow", 1), 0)
    core.tick(0)
    core.advertise(ad("fast", 1), 2.9)
    core.tick(3.1)  # slow lapses; job redispatched to fast
    first = core.on_result("fast", jid, True, b"A", 3.2)
    second = core.on_result("slow", jid, True, b"B", 3.3)
    assert [a.archive for a in first if isinstance(a, Deliver)] == [b"A"]
    assert second == []


def test_late_success_from_lost_attempt_supersedes_pending():
    core = SchedulerCore(SchedulerConfig(heartbeat_period=1))
    jid = job_id(UID, 0)
    core.enqueue(bundle(0), 0)
    core.advertise(ad("slow", 1), 0)
    core.tick(0)
    core.advertise(ad("fast", 1), 2.9)
    core.tick(3.1)
    acts = core.on_result("slow", jid, True, b"late", 3.2)
    assert any(isinstance(a, Deliver) for a in acts)
    assert any(isinstance(a, Send) and a.message.kind is Kind.ABORT and a.worker_id == "fast" for a in acts)
    assert core.on_result("fast", jid, True, b"dup", 3.3) == []


def test_result_for_aborted_experiment_dropped():
    core = SchedulerCore()
    jid = job_id(UID, 0)
    core.enqueue(bundle(0), 0)
    core.enqueue(bundle(1), 0)
    core.advertise(ad("w", 1), 0)
    core.tick(0)
    acts = core.abort(UID, 0.1)
    assert any(isinstance(a, Send) and a.message.kind is Kind.ABORT for a in acts)
    assert core.queue_depth == 0
    assert core.on_result("w", jid, True, b"x", 0.2) == []
    core.advertise(ad("w", 1), 0.3)
    assert dispatched(core.tick(0.3)) == []


def test_unknown_job_result_dropped():
    core = SchedulerCore()
    assert core.on_result("w", job_id(UID, 9), True, b"x", 0) == []


def test_reject_requeues_without_charging_attempt():
    core = SchedulerCore()
    jid = job_id(UID, 0)
    core.enqueue(bundle(0), 0)
    core.advertise(ad("w", 1), 0)
    core.tick(0)
    core.on_reject("w", jid, 0.01)
    assert core.queue_depth == 1
    acts = core.tick(1.0)
    assert dispatched(acts) == [(jid, "w")]
    assert core.records(jid)[-1].attempt == 1


def test_failed_job_result_retried():
    core = SchedulerCore()
    jid = job_id(UID, 0)
    core.enqueue(bundle(0), 0)
    core.advertise(ad("w", 1), 0)
    core.tick(0)
    core.on_result("w", jid, False, b"", 0.1, reason="corrupt archive")
    assert dispatched(core.tick(0.2)) == [(jid, "w")]


def test_restarted_worker_loses_previous_jobs():
    core = SchedulerCore()
    jid = job_id(UID, 0)
    core.enqueue(bundle(0), 0)
    core.advertise(ad("w", 1, boot="one"), 0)
    core.tick(0)
    core.advertise(ad("w", 1, boot="two"), 0.5)
    assert core.records(jid)[0].outcome is Outcome.LOST
    assert dispatched(core.tick(0.5)) == [(jid, "w")]


def test_requeued_jobs_go_to_head_in_order():
    core = SchedulerCore(SchedulerConfig(heartbeat_period=1))
    for i in range(6):
        core.enqueue(bundle(i), 0)
    core.advertise(ad("w", 3), 0)
    core.tick(0)
    core.advertise(ad("v", 10), 2.5)
    acts = core.tick(3.5)
    assert [j for j, _ in dispatched(acts)] == [job_id(UID, i) for i in (0, 1, 2, 3, 4, 5)]


# -- randomized fault property ------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_exactly_once_and_capacity_under_random_faults(seed):
    """Random kills, duplicates, drops; every job delivered once, slots never exceeded."""
    rng = random.Random(seed)
    cfg = SchedulerConfig(heartbeat_period=1, missed_beats=2, max_retries=50)
    core = SchedulerCore(cfg)
    n = rng.randint(1, 40)
    for i in range(n):
        core.enqueue(bundle(i), 0)
    boots = {w: 0 for w in ("w0", "w1", "w2")}
    slots = {"w0": 2, "w1": 3, "w2": 1}
    running: dict[str, set] = {w: set() for w in boots}
    alive = {w: True for w in boots}
    delivered = []
    t = 0.0
    for _ in range(400):
        t += 0.25
        for w in boots:
            if alive[w]:
                core.heartbeat(ad(w, slots[w], boot=str(boots[w])), t)
            elif rng.random() < 0.2:
                alive[w], boots[w] = True, boots[w] + 1
                running[w] = set()
        for a in core.tick(t):
            if isinstance(a, Send) and a.message.kind is Kind.DISPATCH and alive[a.worker_id]:
                running[a.worker_id].add(a.message.header["job_id"])
        for w in boots:
            pend = core.pending(w)
            assert len(pend) <= slots[w]
            if not alive[w]:
                continue
            if rng.random() < 0.03:
                alive[w] = False  # crash: results never arrive
                continue
            for jid in list(running[w]):
                if rng.random() < 0.5:
                    running[w].discard(jid)
                    times = 2 if rng.random() < 0.2 else 1
                    for _ in range(times):
                        for a in core.on_result(w, jid, True, jid.encode(), t):
                            if isinstance(a, Deliver):
                                delivered.append(a.job_id)
        if len(delivered) == n:
            break
    assert len(delivered) == len(set(delivered))
    assert set(delivered) <= {job_id(UID, i) for i in range(n)}


def test_liveness_with_one_live_worker():
    core = SchedulerCore(SchedulerConfig(heartbeat_period=1))
    for i in range(20):
        core.enqueue(bundle(i), 0)
    delivered = set()
    t = 0.0
    while len(delivered) < 20 and t < 100:
        t += 0.5
        core.heartbeat(ad("w", 4), t)
        for a in core.tick(t):
            if isinstance(a, Send) and a.message.kind is Kind.DISPATCH:
                jid = a.message.header["job_id"]
                for r in core.on_result("w", jid, True, b"", t):
                    if isinstance(r, Deliver):
                        delivered.add(r.job_id)
    assert len(delivered) == 20


# -- journal ---------------------------------------------------------------------------


def test_journal_recovery_requeues_unfinished(tmp_path):
    j = Journal(tmp_path)
    core = SchedulerCore(journal=j)
    for i in range(4):
        core.enqueue(bundle(i), 0)
    core.advertise(ad("w", 2), 0)
    core.tick(0)
    core.on_result("w", job_id(UID, 0), True, b"", 1)
    other = "b" * 40
    core.enqueue(bundle(7, other), 1)
    core.abort(other, 1)
    j.close()
    # torn trailing write
    with open(j.path, "a") as fh:
        fh.write('{"op": "done", "job_')
    rec = SchedulerCore.recover(Journal(tmp_path))
    assert list(rec.queue) == [job_id(UID, i) for i in (1, 2, 3)]
    assert rec.jobs[job_id(UID, 1)].archive == b"job1"
    assert other in rec.aborted


# -- protocol -----------------------------------------------------------------------------


def test_message_round_trip():
    m = protocol.dispatch("j", 2, b"\x00\x01zip")
    back = Message.decode(m.encode())
    assert back == m
    a = ad("w", 16, 3, running=("x",))
    assert WorkerAd.from_header(protocol.heartbeat(a).header).running == ("x",)


def test_ad_invariants():
    with pytest.raises(ContractViolation):
        WorkerAd("w", 0, 0)
    with pytest.raises(ContractViolation):
        WorkerAd("w", 4, 5)
