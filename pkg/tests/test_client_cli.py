import hashlib
import socket
import threading
import time
from pathlib import Path

import pytest
import uvicorn

from lakesweep import cli, gemt
from lakesweep.client import ClientError, ClientSession, ServerRejected, pack_directory
from lakesweep.domain import ExperimentState
from lakesweep.errors import TransportError
from lakesweep.gws import Gateway, create_app
from lakesweep.harness import inputs
from lakesweep.harness.local import LocalScheduler
from lakesweep.model import OUTPUT_FILE

DRIVER = inputs.DRIVER_NAME


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class LiveServer:
    def __init__(self, root, hold=False):
        self.sched = LocalScheduler(2, root / "scratch", hold=hold)
        self.gw = Gateway(root / "data", self.sched, gemt.GemtConfig(group_size=3)).start()
        self.port = free_port()
        self.server = uvicorn.Server(uvicorn.Config(create_app(self.gw), host="127.0.0.1", port=self.port,
                                                    log_level="warning"))
        self.thread = threading.Thread(target=self.server.run, daemon=True)
        self.thread.start()
        end = time.monotonic() + 10
        while not self.server.started:
            assert time.monotonic() < end, "server did not start"
            time.sleep(0.01)
        self.url = f"http://127.0.0.1:{self.port}"

    def close(self):
        self.server.should_exit = True
        self.thread.join(timeout=5)
        self.gw.close()
        self.sched.close()


@pytest.fixture
def server(tmp_path):
    s = LiveServer(tmp_path / "srv")
    yield s
    s.close()


@pytest.fixture
def held_server(tmp_path):
    s = LiveServer(tmp_path / "srv", hold=True)
    yield s
    s.sched.release()
    s.close()


@pytest.fixture
def sim_dir(tmp_path):
    d = tmp_path / "baseline"
    d.mkdir()
    for name, data in inputs.baseline().items():
        (d / name).write_bytes(data)
    return d


@pytest.fixture
def exp_dir(tmp_path):
    d = tmp_path / "experiment"
    for name, data in inputs.experiment_files(3).items():
        p = d / name
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(data)
    return d


def run_cli(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr().out
    fields = {}
    for line in out.splitlines():
        key, sep, value = line.partition("=")
        if sep:
            fields[key] = value
    return code, fields


def completion(url, uid, timeout=30):
    s = ClientSession(url)
    try:
        return s.wait(uid, timeout=timeout, poll=0.02)
    finally:
        s.close()


# -- library ------------------------------------------------------------------------


def test_url_must_be_well_formed():
    for bad in ("localhost:8000", "ftp://x", "http://"):
        with pytest.raises(ClientError):
            ClientSession(bad)


def test_empty_experiment_dir_sends_nothing(tmp_path):
    calls = []

    class Spy:
        def request(self, *a, **kw):
            calls.append(a)

        def close(self):
            pass

    s = ClientSession("http://example.invalid", http=Spy())
    (tmp_path / "empty").mkdir()
    with pytest.raises(ClientError):
        s.run_experiment(tmp_path / "empty")
    (tmp_path / "empty" / "sim_0").mkdir()  # an empty sim dir does not count either
    with pytest.raises(ClientError):
        s.run_experiment(tmp_path / "empty")
    with pytest.raises(ClientError):
        s.run_sweep(tmp_path / "empty", DRIVER, "AirTemp", 0, 1, 5)
    assert calls == []


def test_sweep_validation_happens_before_upload(sim_dir):
    s = ClientSession("http://127.0.0.1:9")  # nothing listens there
    with pytest.raises(ClientError):
        s.run_sweep(sim_dir, DRIVER, "AirTemp", -10, 30, 0)
    with pytest.raises(ClientError):
        s.run_sweep(sim_dir, "no_such.csv", "AirTemp", -10, 30, 5)
    with pytest.raises(ClientError):
        s.check_completion("a" * 39)
    with pytest.raises(ClientError):
        s.check_completion("G" * 40)


def test_transport_error_when_server_down():
    s = ClientSession(f"http://127.0.0.1:{free_port()}", retries=1, backoff=0.01, timeout=2)
    with pytest.raises(TransportError):
        s.check_completion("a" * 40)


def test_pack_directory_skips_hidden(tmp_path):
    (tmp_path / ".git").mkdir()
    (tmp_path / ".git" / "HEAD").write_text("x")
    (tmp_path / ".DS_Store").write_text("x")
    (tmp_path / "sim_0").mkdir()
    (tmp_path / "sim_0" / "a.csv").write_text("1")
    assert sorted(gemt.read_zip(pack_directory(tmp_path))) == ["sim_0/a.csv"]
    assert sorted(gemt.read_zip(pack_directory(tmp_path, flat=True))) == ["a.csv"]


def test_library_round_trip(server, exp_dir, tmp_path):
    s = ClientSession(server.url)
    uid = s.run_experiment(exp_dir)
    assert len(uid) == 40 and s.last_uid == uid
    done = s.wait(uid, timeout=30, poll=0.02)
    assert done.state is ExperimentState.COMPLETED and done.fraction == 1.0
    out = s.get_results(uid, tmp_path / "dl")
    assert out == tmp_path / "dl" / uid
    assert sorted(p.name for p in out.iterdir() if p.is_dir()) == ["0", "1", "2"]
    assert (out / "0" / OUTPUT_FILE).is_file()
    with pytest.raises(ServerRejected) as info:
        s.check_completion("0" * 40)
    assert info.value.not_found
    s.close()


def test_results_conflict_carries_fraction(held_server, sim_dir):
    s = ClientSession(held_server.url)
    uid = s.run_sweep(sim_dir, DRIVER, "AirTemp", 0, 1, 6)
    with pytest.raises(ServerRejected) as info:
        s.download_results(uid)
    assert info.value.status == 409
    assert 0.0 <= info.value.fraction < 1.0
    s.close()


def test_server_message_surfaced_verbatim(server, sim_dir):
    s = ClientSession(server.url)
    with pytest.raises(ServerRejected) as info:
        s.run_sampled(sim_dir, DRIVER, "AirTemp", "normal", {"mean": 0}, 5)
    assert info.value.status == 400
    assert "sd" in str(info.value)
    s.close()


# -- command line ---------------------------------------------------------------------


def test_cli_sweep_status_results(server, sim_dir, tmp_path, capsys):
    code, out = run_cli(capsys, "sweep", "--url", server.url, "--sim-dir", sim_dir, "--driver-file-name", DRIVER,
                        "--parameter-name", "AirTemp", "--start-value", -10, "--end-value", 30,
                        "--number-of-increments", 7)
    assert code == 0 and len(out["uid"]) == 40
    uid = out["uid"]
    completion(server.url, uid)
    code, out = run_cli(capsys, "status", "--url", server.url, "--uid", uid)
    assert code == 0
    assert out["state"] == "COMPLETED" and float(out["fraction"]) == 1.0
    assert int(out["metric.jobs_total"]) == 3

    code, out = run_cli(capsys, "results", "--url", server.url, "--uid", uid, "--dest", tmp_path / "a")
    assert code == 0 and int(out["files"]) > 0
    code, _ = run_cli(capsys, "results", "--url", server.url, "--uid", uid, "--dest", tmp_path / "b")
    assert code == 0

    def digest(root):
        return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
                for p in sorted(root.rglob("*")) if p.is_file()}

    assert digest(tmp_path / "a" / uid) == digest(tmp_path / "b" / uid)


def test_cli_columns_filter(server, exp_dir, tmp_path, capsys):
    code, out = run_cli(capsys, "run", "--url", server.url, "--exp-dir", exp_dir)
    uid = out["uid"]
    completion(server.url, uid)
    code, out = run_cli(capsys, "results", "--url", server.url, "--uid", uid, "--dest", tmp_path,
                        "--sims", "1", "--columns", "temp_surface")
    assert code == 0
    got = tmp_path / uid
    assert sorted(p.name for p in got.iterdir() if p.is_dir()) == ["1"]
    header = (got / "1" / OUTPUT_FILE).read_text().splitlines()[0].split(",")
    assert header[1:] == ["temp_surface"]


def test_cli_sample_and_abort(held_server, sim_dir, capsys):
    code, out = run_cli(capsys, "sample", "--url", held_server.url, "--sim-dir", sim_dir,
                        "--driver-file-name", DRIVER, "--parameter-name", "AirTemp", "--distribution", "uniform",
                        "--param", "a=-1", "--param", "b=1", "--number-of-samples", 9, "--seed", 4)
    assert code == 0
    uid = out["uid"]
    code, out = run_cli(capsys, "status", "--url", held_server.url, "--uid", uid)
    assert code == cli.EXIT_IN_PROGRESS
    assert 0.0 <= float(out["fraction"]) < 1.0
    code, out = run_cli(capsys, "abort", "--url", held_server.url, "--uid", uid)
    assert (code, out["state"]) == (0, "ABORTED")
    code, out = run_cli(capsys, "status", "--url", held_server.url, "--uid", uid)
    assert (code, out["state"]) == (0, "ABORTED")
    code, out = run_cli(capsys, "abort", "--url", held_server.url, "--uid", uid)
    assert code == cli.EXIT_REJECTED and out["status"] == "409"


def test_cli_exit_codes(server, sim_dir, tmp_path, capsys):
    code, out = run_cli(capsys, "status", "--url", server.url, "--uid", "abc")
    assert code == cli.EXIT_USAGE and "malformed uid" in out["error"]
    code, out = run_cli(capsys, "status", "--url", server.url, "--uid", "0" * 40)
    assert code == cli.EXIT_REJECTED and out["not_found"] == "true"
    code, out = run_cli(capsys, "sweep", "--url", server.url, "--sim-dir", sim_dir, "--driver-file-name", DRIVER,
                        "--parameter-name", "AirTemp", "--start-value", 0, "--end-value", 1,
                        "--number-of-increments", 0)
    assert code == cli.EXIT_USAGE
    code, out = run_cli(capsys, "sample", "--url", server.url, "--sim-dir", sim_dir, "--driver-file-name", DRIVER,
                        "--parameter-name", "AirTemp", "--distribution", "normal", "--param", "mean",
                        "--number-of-samples", 3)
    assert code == cli.EXIT_USAGE
    code, out = run_cli(capsys, "status", "--url", f"http://127.0.0.1:{free_port()}", "--uid", "a" * 40)
    assert code == cli.EXIT_TRANSPORT and out["error"].startswith("transport")
    (tmp_path / "empty").mkdir()
    code, out = run_cli(capsys, "run", "--url", server.url, "--exp-dir", tmp_path / "empty")
    assert code == cli.EXIT_USAGE
    code, out = run_cli(capsys, "health", "--url", server.url)
    assert code == 0 and "queue_depth" in out


def test_cli_usage_errors_exit_one(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["status"])
    assert info.value.code == cli.EXIT_USAGE
    with pytest.raises(SystemExit) as info:
        cli.main(["frobnicate"])
    assert info.value.code == cli.EXIT_USAGE


def test_cli_bench_rejects_bad_batches(capsys):
    code, out = run_cli(capsys, "bench", "--batches", "ten")
    assert code == cli.EXIT_USAGE


@pytest.mark.slow
def test_processes_over_real_udp(tmp_path, sim_dir):
    """rendezvous, serve and agent as separate processes talking over loopback UDP."""
    import signal
    import subprocess
    import sys

    rv_port, relay_port, http_port = free_port(), free_port(), free_port()
    conf = tmp_path / "agent.conf"
    conf.write_text(f"peer_id = node-1\nslots = 2\nscratch_root = {tmp_path / 'node'}\n"
                    f"rendezvous = 127.0.0.1:{rv_port}\nrelay = 127.0.0.1:{relay_port}\nheartbeat = 0.5\n")
    base = [sys.executable, "-m", "lakesweep.cli"]
    procs = []

    def spawn(*argv):
        p = subprocess.Popen(base + list(argv), stdout=subprocess.PIPE, stderr=subprocess.DEVNULL, text=True)
        procs.append(p)
        return p

    try:
        rv = spawn("rendezvous", "--host", "127.0.0.1", "--port", str(rv_port), "--relay-port", str(relay_port))
        assert rv.stdout.readline().startswith("rendezvous=")
        srv = spawn("serve", "--data-root", str(tmp_path / "srv"), "--port", str(http_port), "--heartbeat", "0.5",
                    "--rendezvous", f"127.0.0.1:{rv_port}", "--relay", f"127.0.0.1:{relay_port}")
        assert srv.stdout.readline().startswith("listening=")
        agent = spawn("agent", "--config", str(conf))
        assert agent.stdout.readline() == "peer_id=node-1\n"
        url = f"http://127.0.0.1:{http_port}"
        s = ClientSession(url, retries=20, backoff=0.1)
        s.health()  # uvicorn may still be binding
        uid = s.run_sweep(sim_dir, DRIVER, "AirTemp", -10, 30, 12)
        done = s.wait(uid, timeout=60, poll=0.1)
        assert done.state is ExperimentState.COMPLETED
        outputs, failed, _ = gemt.read_collated(s.download_results(uid))
        assert sorted(outputs) == list(range(12)) and not failed
        s.close()
        agent.send_signal(signal.SIGINT)
        assert agent.wait(10) == 0
    finally:
        for p in procs:
            if p.poll() is None:
                p.terminate()
                p.wait(10)


def test_cli_bench_writes_report_and_table(tmp_path, capsys):
    import csv
    import json

    topo = {"workers": [{"name": "fast", "slots": 4, "emulate_ms": 6, "nat": "FULL_CONE"},
                        {"name": "slow", "slots": 4, "emulate_ms": 57, "nat": "SYMMETRIC"}],
            "group_size": 5, "heartbeat": 0.1}
    (tmp_path / "topo.json").write_text(json.dumps(topo))
    code, out = run_cli(capsys, "bench", "--topology", tmp_path / "topo.json", "--batches", "20,40",
                        "--report", tmp_path / "r.txt", "--csv", tmp_path / "m.csv", "--work-dir", tmp_path / "w")
    assert code == 0 and out["valid"] == "true"
    assert out["batch.40.state"] == "COMPLETED"
    assert "overall: valid" in (tmp_path / "r.txt").read_text()
    rows = list(csv.DictReader((tmp_path / "m.csv").open()))
    assert [int(r["n_sims"]) for r in rows] == [20, 40]
    assert [int(r["jobs"]) for r in rows] == [4, 8]
