"""``lakesweep`` command line.

Client subcommands (run, sweep, sample, status, results, abort, health)
are thin wrappers over :class:`~lakesweep.client.ClientSession`. The
rest start long-running processes: ``serve`` (gateway and scheduler),
``agent`` (an execute node), ``rendezvous`` (overlay services), and
``bench`` (the topology replay).

Output is ``key=value`` lines on stdout. Exit codes: 0 success or a
terminal state, 1 usage error, 2 transport error, 3 rejected by the
server, 4 experiment still in progress.
"""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading
from pathlib import Path
from typing import Sequence

from .client import ClientError, ClientSession, ServerRejected
from .errors import ContractViolation, HarnessError, InvalidSpec, LakesweepError, TransportError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_TRANSPORT = 2
EXIT_REJECTED = 3
EXIT_IN_PROGRESS = 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; 2 is reserved for transport errors here
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def emit(**fields) -> None:
    for key, value in fields.items():
        if value is None:
            continue
        if isinstance(value, float):
            value = repr(value)
        print(f"{key}={value}")


def _csv(text: str | None) -> list[str] | None:
    if not text:
        return None
    return [p.strip() for p in text.split(",") if p.strip()]


def _sims(text: str | None) -> list[int] | None:
    items = _csv(text)
    if items is None:
        return None
    try:
        return [int(p) for p in items]
    except ValueError:
        raise UsageError(f"--sims must be comma-separated integers, got {text!r}") from None


def _key_values(pairs: Sequence[str]) -> dict[str, float]:
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"--param expects name=value, got {pair!r}")
        try:
            out[key.strip()] = float(value)
        except ValueError:
            raise UsageError(f"--param {key.strip()}: not a number: {value!r}") from None
    return out


# -- client subcommands ------------------------------------------------------------


def cmd_run(session: ClientSession, args) -> int:
    emit(uid=session.run_experiment(args.exp_dir))
    return EXIT_OK


def cmd_sweep(session: ClientSession, args) -> int:
    uid = session.run_sweep(args.sim_dir, args.driver_file_name, args.parameter_name, args.start_value,
                            args.end_value, args.number_of_increments, args.operation)
    emit(uid=uid)
    return EXIT_OK


def cmd_sample(session: ClientSession, args) -> int:
    uid = session.run_sampled(args.sim_dir, args.driver_file_name, args.parameter_name, args.distribution,
                              _key_values(args.param), args.number_of_samples, args.operation, args.seed)
    emit(uid=uid)
    return EXIT_OK


def cmd_status(session: ClientSession, args) -> int:
    c = session.check_completion(args.uid)
    emit(uid=c.uid, state=c.state.value, fraction=c.fraction, reason=c.reason)
    for key, value in sorted(c.metrics.items()):
        emit(**{f"metric.{key}": value})
    return EXIT_OK if c.terminal else EXIT_IN_PROGRESS


def cmd_results(session: ClientSession, args) -> int:
    out = session.get_results(args.uid, args.dest, _sims(args.sims), _csv(args.columns))
    emit(uid=args.uid, path=out, files=sum(1 for p in out.rglob("*") if p.is_file()))
    return EXIT_OK


def cmd_abort(session: ClientSession, args) -> int:
    emit(uid=args.uid, state=session.abort(args.uid))
    return EXIT_OK


def cmd_health(session: ClientSession, args) -> int:
    emit(**session.health())
    return EXIT_OK


# -- process subcommands ------------------------------------------------------------


def _wait_for_signal() -> None:
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    stop.wait()


def _addr(text: str | None):
    from .overlay import parse_addr

    return parse_addr(text) if text else None


def cmd_bench(args) -> int:
    from .harness.cluster import TopologySpec, evaluation_topology
    from .harness.replay import replay_evaluation

    topology = TopologySpec.from_file(args.topology) if args.topology else evaluation_topology()
    try:
        batches = [int(b) for b in args.batches.split(",") if b.strip()]
    except ValueError:
        raise UsageError(f"--batches must be comma-separated integers, got {args.batches!r}") from None
    if not batches or min(batches) < 1:
        raise UsageError("--batches needs at least one positive size")
    report = replay_evaluation(topology, batches, root=args.work_dir, timeout=args.timeout)
    text = report.to_text()
    if args.report:
        Path(args.report).write_text(text)
    else:
        sys.stdout.write(text)
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    for b in report.batches:
        emit(**{f"batch.{b.n_sims}.makespan_s": round(b.makespan_s, 4),
                f"batch.{b.n_sims}.speedup_fast": round(b.speedup_fast, 3),
                f"batch.{b.n_sims}.speedup_slow": round(b.speedup_slow, 3),
                f"batch.{b.n_sims}.state": b.state})
    emit(valid=str(report.valid).lower())
    return EXIT_OK if report.valid else EXIT_REJECTED


def cmd_serve(args) -> int:
    import uvicorn

    from . import gemt
    from .gws import Gateway, create_app

    root = Path(args.data_root)
    root.mkdir(parents=True, exist_ok=True)
    config = gemt.GemtConfig(group_size=args.group_size)
    closers = []
    if args.local_slots:
        from .harness.local import LocalScheduler

        scheduler = LocalScheduler(args.local_slots, root / "local-scratch")
        closers.append(scheduler.close)
    else:
        if not args.rendezvous:
            raise UsageError("serve needs --rendezvous (overlay mode) or --local-slots")
        from .overlay import Identity, OverlayPeer, UdpSocket
        from .scheduler import Journal, SchedulerConfig, SchedulerCore, SchedulerService

        reflectors = None
        if args.reflectors:
            pair = _csv(args.reflectors)
            if len(pair) != 2:
                raise UsageError("--reflectors takes two addresses, host:port,host:port")
            reflectors = (_addr(pair[0]), _addr(pair[1]))
        peer = OverlayPeer(UdpSocket(args.overlay_host, args.overlay_port), args.peer_id, args.group,
                           _addr(args.rendezvous), reflectors=reflectors, relay=_addr(args.relay),
                           identity=Identity.load_or_create(root / "identity.key")).start()
        peer.join()
        journal = Journal(root / "scheduler")
        core = SchedulerCore.recover(journal, SchedulerConfig(heartbeat_period=args.heartbeat))
        scheduler = SchedulerService(peer, core).start()
        closers += [scheduler.stop, peer.leave]
    gateway = Gateway(root / "experiments", scheduler, config, workers=args.workers).start()
    closers.insert(0, gateway.close)
    emit(listening=f"{args.host}:{args.port}", data_root=root)
    sys.stdout.flush()
    try:
        uvicorn.run(create_app(gateway), host=args.host, port=args.port, log_level="warning")
    finally:
        for close in closers:
            close()
    return EXIT_OK


def cmd_agent(args) -> int:
    from .overlay import Identity, OverlayPeer, UdpSocket
    from .worker import AgentConfig, WorkerAgent

    cfg = AgentConfig.from_file(args.config)
    if not cfg.rendezvous:
        raise UsageError("agent configuration needs rendezvous = host:port")
    scratch = Path(cfg.scratch_root)
    scratch.mkdir(parents=True, exist_ok=True)
    peer = OverlayPeer(UdpSocket(args.host, args.port), cfg.peer_id, cfg.group, _addr(cfg.rendezvous),
                       relay=_addr(cfg.relay), identity=Identity.load_or_create(scratch / "identity.key")).start()
    peer.join()
    agent = WorkerAgent(peer, cfg.scheduler, cfg.slots, scratch, memory_mb=cfg.memory_mb,
                        heartbeat_period=cfg.heartbeat, emulate_ms=cfg.emulate_ms,
                        speed_hint=cfg.speed_hint).start()
    emit(peer_id=cfg.peer_id, slots=cfg.slots, nat=peer.nat_class.value if peer.nat_class else "unknown")
    sys.stdout.flush()
    try:
        _wait_for_signal()
    finally:
        agent.stop()  # also leaves the overlay
    return EXIT_OK


def cmd_rendezvous(args) -> int:
    from .overlay import Reflector, Relay, Rendezvous, UdpSocket

    services = [Rendezvous(UdpSocket(args.host, args.port)).start()]
    emit(rendezvous=f"{args.host}:{services[0].address[1]}")
    if args.relay_port is not None:
        services.append(Relay(UdpSocket(args.host, args.relay_port)).start())
        emit(relay=f"{args.host}:{services[-1].address[1]}")
    if args.reflectors:
        ips = _csv(args.reflectors)
        if len(ips) != 2:
            raise UsageError("--reflectors takes two local IP addresses, e.g. 127.0.0.1,127.0.0.2")
        pair = [Reflector(UdpSocket(ip, 3478), UdpSocket(ip, 3479), f"reflector-{i}") for i, ip in enumerate(ips)]
        pair[0].pair(pair[1])
        for r in pair:
            services.append(r.start())
            emit(reflector=f"{r.address[0]}:{r.address[1]}")
    sys.stdout.flush()
    try:
        _wait_for_signal()
    finally:
        for svc in services:
            svc.stop()
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lakesweep", description="Lake model parameter sweeps on a worker overlay.")
    p.add_argument("-v", "--verbose", action="store_true", help="log to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def client(name: str, help: str):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--url", required=True, help="gateway base URL, e.g. http://localhost:8000")
        sp.add_argument("--timeout", type=float, default=60.0)
        return sp

    sp = client("run", "upload a directory of prepared simulations")
    sp.add_argument("--exp-dir", required=True)
    sp.set_defaults(func=cmd_run)

    sp = client("sweep", "evenly spaced sweep of one driver variable")
    sp.add_argument("--sim-dir", required=True)
    sp.add_argument("--driver-file-name", required=True)
    sp.add_argument("--parameter-name", required=True)
    sp.add_argument("--start-value", type=float, required=True)
    sp.add_argument("--end-value", type=float, required=True)
    sp.add_argument("--number-of-increments", type=int, required=True)
    sp.add_argument("--operation", default="add")
    sp.set_defaults(func=cmd_sweep)

    sp = client("sample", "perturb a driver variable with draws from a distribution")
    sp.add_argument("--sim-dir", required=True)
    sp.add_argument("--driver-file-name", required=True)
    sp.add_argument("--parameter-name", required=True)
    sp.add_argument("--distribution", required=True, help="uniform, normal, binomial or poisson")
    sp.add_argument("--param", action="append", default=[], metavar="NAME=VALUE",
                    help="distribution parameter, repeatable (a, b, mean, sd, n, p, lambda)")
    sp.add_argument("--number-of-samples", type=int, required=True)
    sp.add_argument("--operation", default="add")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_sample)

    for name, help, func in (("status", "state and fraction complete", cmd_status),
                             ("abort", "stop an experiment", cmd_abort)):
        sp = client(name, help)
        sp.add_argument("--uid", required=True)
        sp.set_defaults(func=func)

    sp = client("results", "download and unpack results under DEST/UID")
    sp.add_argument("--uid", required=True)
    sp.add_argument("--dest", default=".")
    sp.add_argument("--sims", help="comma-separated simulation ids")
    sp.add_argument("--columns", help="comma-separated output columns")
    sp.set_defaults(func=cmd_results)

    sp = client("health", "gateway queue and worker summary")
    sp.set_defaults(func=cmd_health)

    sp = sub.add_parser("bench", help="replay batches on an emulated topology")
    sp.add_argument("--topology", help="topology JSON file (default: one fast and two slow 16-slot nodes)")
    sp.add_argument("--batches", default="3000,5000,10000")
    sp.add_argument("--report", help="write the text report here instead of stdout")
    sp.add_argument("--csv", help="write the metrics table here")
    sp.add_argument("--work-dir", help="keep run data here")
    sp.add_argument("--timeout", type=float, default=600.0)
    sp.set_defaults(func=cmd_bench, local=True)

    sp = sub.add_parser("serve", help="run the gateway and scheduler")
    sp.add_argument("--data-root", required=True)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8000)
    sp.add_argument("--group-size", type=int, default=10)
    sp.add_argument("--workers", type=int, default=2, help="gateway task threads")
    sp.add_argument("--local-slots", type=int, help="run jobs in-process instead of on the overlay")
    sp.add_argument("--rendezvous", help="host:port")
    sp.add_argument("--relay", help="host:port")
    sp.add_argument("--reflectors", help="host:port,host:port")
    sp.add_argument("--group", default="lakesweep")
    sp.add_argument("--peer-id", default="scheduler")
    sp.add_argument("--overlay-host", default="0.0.0.0")
    sp.add_argument("--overlay-port", type=int, default=0)
    sp.add_argument("--heartbeat", type=float, default=2.0)
    sp.set_defaults(func=cmd_serve, local=True)

    sp = sub.add_parser("agent", help="run an execute node")
    sp.add_argument("--config", required=True, help="key = value agent configuration")
    sp.add_argument("--host", default="0.0.0.0")
    sp.add_argument("--port", type=int, default=0)
    sp.set_defaults(func=cmd_agent, local=True)

    sp = sub.add_parser("rendezvous", help="run the rendezvous, and optionally a relay and reflectors")
    sp.add_argument("--host", default="0.0.0.0")
    sp.add_argument("--port", type=int, default=5222)
    sp.add_argument("--relay-port", type=int)
    sp.add_argument("--reflectors", help="two local IPs to answer NAT probes from")
    sp.set_defaults(func=cmd_rendezvous, local=True)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    session = None
    try:
        if getattr(args, "local", False):
            return args.func(args)
        session = ClientSession(args.url, timeout=args.timeout)
        return args.func(session, args)
    except (UsageError, ClientError, InvalidSpec, ContractViolation, HarnessError) as exc:
        emit(error=str(exc))
        return EXIT_USAGE
    except TransportError as exc:
        emit(error=f"transport: {exc}")
        return EXIT_TRANSPORT
    except ServerRejected as exc:
        fields = {"error": str(exc), "status": exc.status}
        if exc.not_found:
            fields["not_found"] = "true"
        if exc.fraction is not None:
            fields["state"] = exc.body.get("state")
            fields["fraction"] = float(exc.fraction)
        emit(**fields)
        return EXIT_REJECTED
    except LakesweepError as exc:
        emit(error=str(exc))
        return EXIT_USAGE
    finally:
        if session is not None:
            session.close()


if __name__ == "__main__":
    sys.exit(main())
