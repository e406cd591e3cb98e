"""Command-line entry point.

One binary, eleven subcommands: spec validation, deployment against live
daemons, one-process runs, observation, teardown, result collection, the
two long-running server roles, benchmarks, and fixture generation.

Exit codes: 0 success, 1 validation error, 2 deployment error, 3 runtime
error.
"""

from __future__ import annotations

import argparse
import json
import os
import signal
import sys
import threading
import time
from pathlib import Path

from . import model, runner
from .autoscaler import ReplicationManager, StageState
from .controller import (
    Controller,
    EndpointUnreachable,
    PartialDeployment,
    SystemHandle,
    SystemNotRunning,
    plan_digest,
)
from .daemon import Daemon
from .eos import scenes
from .errors import GeoNimbusError
from .remote import (
    AttachableManager,
    DaemonServer,
    LoggingServer,
    ManagerServer,
    MetricsRelay,
    RemoteDaemonPort,
    RemoteManagerClient,
)
from .storage import DataStore, LocalStoreBinding, StorageManager

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_DEPLOYMENT = 2
EXIT_RUNTIME = 3


def _work_root(args) -> Path:
    root = getattr(args, "work_root", None) or os.environ.get("GEONIMBUS_WORK_ROOT")
    return Path(root) if root else Path.cwd() / "geonimbus-work"


def _state_path(work_root: Path, system: str) -> Path:
    return work_root / "systems" / f"{system}.json"


def _load_spec(path: str) -> model.SystemSpec:
    return model.parse_spec(Path(path).read_text())


def _validated_plan(path: str) -> model.DeploymentPlan:
    spec = _load_spec(path)
    return model.plan(spec)


def _parse_workers(pairs: list[str] | None) -> dict[str, int]:
    out: dict[str, int] = {}
    for pair in pairs or []:
        stage, sep, count = pair.partition("=")
        if not sep:
            raise GeoNimbusError(f"--workers expects stage=N, got {pair!r}")
        out[stage] = int(count)
    return out


def _save_state(work_root: Path, doc: dict) -> Path:
    path = _state_path(work_root, doc["system"])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _load_state(work_root: Path, system: str) -> dict:
    path = _state_path(work_root, system)
    if not path.exists():
        raise SystemNotRunning(f"no state for system {system!r} under {path.parent}")
    return json.loads(path.read_text())


def _remote_setup(state: dict):
    spec = model.parse_spec(state["spec"])
    manager = RemoteManagerClient(state["manager_address"])
    ports = {
        name: RemoteDaemonPort(addr, manager_address=state["manager_address"])
        for name, addr in state["endpoints"].items()
    }
    return spec, manager, ports


def _serve_forever() -> None:
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            signal.signal(sig, lambda *_: stop.set())
        except ValueError:
            pass  # not on the main thread; rely on KeyboardInterrupt
    try:
        stop.wait()
    except KeyboardInterrupt:
        pass


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_validate(args) -> int:
    try:
        spec = _load_spec(args.spec)
    except (model.SpecSyntax, model.MissingField) as exc:
        print(f"invalid: {exc}")
        return EXIT_VALIDATION
    violations = model.validate(spec)
    if violations:
        for v in violations:
            print(str(v))
        return EXIT_VALIDATION
    system_plan = model.plan(spec)
    print(f"ok: system {spec.name!r}, {len(spec.stages)} stages, order: {' -> '.join(system_plan.order)}")
    return EXIT_OK


def cmd_deploy(args) -> int:
    work_root = _work_root(args)
    system_plan = _validated_plan(args.spec)
    manager = RemoteManagerClient(args.manager)
    ports = {
        e.name: RemoteDaemonPort(e.address, manager_address=args.manager)
        for e in system_plan.spec.endpoints
    }
    controller = Controller(manager)
    handle = controller.deploy_system(system_plan, ports)
    _save_state(
        work_root,
        {
            "system": handle.system,
            "digest": handle.digest,
            "spec": model.serialize_spec(system_plan.spec),
            "manager_address": args.manager,
            "endpoints": {e.name: e.address for e in system_plan.spec.endpoints},
            "state": "running",
        },
    )
    print(f"deployed {handle.system}: {len(system_plan.order)} stages on {len(ports)} endpoints")
    return EXIT_OK


def cmd_run(args) -> int:
    work_root = _work_root(args)
    rc = cmd_deploy(args)
    if rc != EXIT_OK:
        return rc
    state = _load_state(work_root, _validated_plan(args.spec).system)
    spec, manager, ports = _remote_setup(state)
    controller = Controller(manager)
    handle = SystemHandle(
        system=spec.name,
        plan=model.plan(spec),
        digest=state["digest"],
        daemons=ports,
        manager=manager,
    )
    items = runner._input_items(args.input)
    started = time.time()
    count = controller.ingest(handle, items) if items else 0
    if count and not controller.wait_idle(handle, timeout=args.timeout):
        print(f"runtime error: still busy after {args.timeout}s")
        return EXIT_RUNTIME
    elapsed = (time.time() - started) if count else 0.0
    out_dir = args.out or str(work_root / "results" / spec.name)
    summary = controller.collect_results(handle, out_dir)
    if not args.keep_running:
        controller.teardown(handle, force=False)
        state["state"] = "stopped"
        _save_state(work_root, state)
    print(f"ingested {count} items in {elapsed:.2f}s; {summary['records']} summary records")
    print(f"results: {summary['summaries']}")
    return EXIT_OK


def cmd_run_local(args) -> int:
    spec = _load_spec(args.spec)
    report = runner.run_local(
        spec,
        args.input,
        args.work_root or str(_work_root(args) / f"local-{spec.name}"),
        workers=_parse_workers(args.workers),
        autoscale=args.autoscale,
        timeout=args.timeout,
    )
    print(f"system {report.system}: {report.ingested} items -> {report.records} records "
          f"in {report.response_seconds:.2f}s")
    print(f"results: {report.results_dir}")
    for command in report.commands:
        print(f"autoscaler: {command.action} {command.stage} -> {command.target_workers} ({command.reason})")
    return EXIT_OK


def cmd_status(args) -> int:
    state = _load_state(_work_root(args), args.system)
    _, _, ports = _remote_setup(state)
    print(f"system {args.system}: {state['state']}")
    for endpoint, port in sorted(ports.items()):
        try:
            doc = port.status()
        except Exception as exc:
            print(f"  {endpoint}: unreachable ({exc})")
            continue
        for stage, row in sorted(doc.get("stages", {}).items()):
            print(
                f"  {stage}@{endpoint}: {row['state']}, workers={row['workers']}, "
                f"queue={row['queue_depth']}, done={row['completed']}, failed={row['failed']}"
            )
    return EXIT_OK


def cmd_teardown(args) -> int:
    work_root = _work_root(args)
    state = _load_state(work_root, args.system)
    spec, manager, ports = _remote_setup(state)
    handle = SystemHandle(
        system=spec.name,
        plan=model.plan(spec),
        digest=state["digest"],
        daemons=ports,
        manager=manager,
    )
    Controller(manager).teardown(handle, force=args.force)
    state["state"] = "stopped"
    _save_state(work_root, state)
    print(f"system {args.system} stopped (catalogs retained)")
    return EXIT_OK


def cmd_results(args) -> int:
    state = _load_state(_work_root(args), args.system)
    spec, manager, _ = _remote_setup(state)
    handle = SystemHandle(
        system=spec.name,
        plan=model.plan(spec),
        digest=state["digest"],
        daemons={},
        manager=manager,
    )
    summary = Controller(manager).collect_results(handle, args.out)
    print(f"{summary['records']} records -> {summary['summaries']}")
    return EXIT_OK


def cmd_daemon(args) -> int:
    host, _, port = args.listen.rpartition(":")
    name = args.name or f"endpoint-{port}"
    store = DataStore(
        f"{name}-local",
        args.store_root,
        kind="local",
        capacity_bytes=args.capacity,
        endpoint=name,
    )
    sink = MetricsRelay(args.logging) if args.logging else None
    daemon = Daemon(
        name,
        cores=args.cores,
        store=store,
        manager=AttachableManager(),
        work_root=args.work_root or str(Path(args.store_root).parent / f"{name}-work"),
        metrics_sink=sink,
        reporting_interval=args.reporting_interval,
    )
    server = DaemonServer(daemon, host or "127.0.0.1", int(port))
    if args.manager:
        server.attach_manager(args.manager)
    print(f"daemon {name} listening on {server.address} (cores={args.cores})", flush=True)
    _serve_forever()
    server.close()
    return EXIT_OK


def cmd_storage_manager(args) -> int:
    host, _, port = args.listen.rpartition(":")
    manager = StorageManager(args.root)
    for entry in args.global_store or []:
        name, sep, capacity = entry.partition("=")
        if not sep:
            raise GeoNimbusError(f"--global-store expects NAME=CAPACITY_BYTES, got {entry!r}")
        store = DataStore(
            name,
            Path(args.root) / "global" / name,
            kind="global",
            capacity_bytes=int(capacity),
            endpoint="storage-manager",
            events=manager.events,
        )
        manager.register_store(LocalStoreBinding(store))
    server = ManagerServer(manager, host or "127.0.0.1", int(port))
    print(f"storage manager listening on {server.address}", flush=True)
    _serve_forever()
    server.close()
    return EXIT_OK


def cmd_bench(args) -> int:
    spec = _load_spec(args.spec)
    sweep = tuple(int(w) for w in args.sweep.split(","))
    rows = runner.bench(
        spec,
        args.work_root or str(_work_root(args) / f"bench-{spec.name}"),
        scenes_count=args.scenes,
        sweep=sweep,
        stage=args.stage,
        repeats=args.repeats,
        per_scene_seconds=args.per_scene_seconds,
        timeout=args.timeout,
    )
    print(f"{'workers':>8} {'run':>4} {'seconds':>10}")
    for row in rows:
        print(f"{row.workers:>8} {row.run:>4} {row.response_seconds:>10.2f}")
    return EXIT_OK


def cmd_make_fixtures(args) -> int:
    out = Path(args.out)
    scene_dir = out / "scenes"
    bands = tuple(int(b) for b in args.bands.split(","))
    written = scenes.make_fixture_set(
        scene_dir,
        args.count,
        width=args.width,
        height=args.height,
        path=args.path,
        row=args.row,
        bands=bands,
        start_year=args.start_year,
    )
    query = {
        "lat": scenes.DEFAULT_POINT[0],
        "lon": scenes.DEFAULT_POINT[1],
        "start": f"{args.start_year}-01-01",
        "end": f"{args.start_year + args.count}-12-31",
        "source_dir": str(scene_dir.resolve()),
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "query.json").write_text(json.dumps(query, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(written)} scenes under {scene_dir} and query.json")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geonimbus", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(fn=fn)
        return p

    p = add("validate", cmd_validate, help="check a system spec")
    p.add_argument("spec")

    p = add("deploy", cmd_deploy, help="deploy a spec onto live daemons")
    p.add_argument("spec")
    p.add_argument("--manager", required=True, help="storage manager host:port")
    p.add_argument("--work-root")

    p = add("run", cmd_run, help="deploy, ingest, wait, collect results")
    p.add_argument("spec")
    p.add_argument("--input", required=True)
    p.add_argument("--manager", required=True)
    p.add_argument("--out")
    p.add_argument("--timeout", type=float, default=600.0)
    p.add_argument("--keep-running", action="store_true")
    p.add_argument("--work-root")

    p = add("run-local", cmd_run_local, help="run a whole system in this process")
    p.add_argument("spec")
    p.add_argument("--input", required=True)
    p.add_argument("--workers", action="append", metavar="STAGE=N")
    p.add_argument("--autoscale", action="store_true")
    p.add_argument("--timeout", type=float, default=600.0)
    p.add_argument("--work-root")

    p = add("status", cmd_status, help="per-stage state of a deployed system")
    p.add_argument("system")
    p.add_argument("--work-root")

    p = add("teardown", cmd_teardown, help="drain and stop a deployed system")
    p.add_argument("system")
    p.add_argument("--force", action="store_true", help="skip draining")
    p.add_argument("--work-root")

    p = add("results", cmd_results, help="collect sink outputs of a system")
    p.add_argument("system")
    p.add_argument("--out", required=True)
    p.add_argument("--work-root")

    p = add("daemon", cmd_daemon, help="serve one endpoint")
    p.add_argument("--listen", required=True, metavar="HOST:PORT")
    p.add_argument("--store-root", required=True)
    p.add_argument("--cores", type=int, default=os.cpu_count() or 1)
    p.add_argument("--name")
    p.add_argument("--work-root")
    p.add_argument("--manager", help="storage manager address to register with")
    p.add_argument("--logging", help="metrics logging service address")
    p.add_argument("--capacity", type=int, default=1 << 40)
    p.add_argument("--reporting-interval", type=float, default=1.0)

    p = add("storage-manager", cmd_storage_manager, help="serve the storage manager")
    p.add_argument("--listen", required=True, metavar="HOST:PORT")
    p.add_argument("--root", required=True)
    p.add_argument("--global-store", action="append", metavar="NAME=CAPACITY")

    p = add("bench", cmd_bench, help="worker sweep over synthetic scenes")
    p.add_argument("spec")
    p.add_argument("--scenes", type=int, default=16)
    p.add_argument("--sweep", default="1,2,4")
    p.add_argument("--stage", default="derivates")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--per-scene-seconds", type=float, default=1.0)
    p.add_argument("--timeout", type=float, default=600.0)
    p.add_argument("--work-root")

    p = add("make-fixtures", cmd_make_fixtures, help="generate synthetic scene archives")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--width", type=int, default=100)
    p.add_argument("--height", type=int, default=100)
    p.add_argument("--path", type=int, default=scenes.DEFAULT_PATH)
    p.add_argument("--row", type=int, default=scenes.DEFAULT_ROW)
    p.add_argument("--bands", default="4,7")
    p.add_argument("--start-year", type=int, default=2013)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (model.SpecSyntax, model.MissingField, model.InvalidSpec) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (EndpointUnreachable, PartialDeployment, SystemNotRunning) as exc:
        print(f"deployment error: {exc}", file=sys.stderr)
        return EXIT_DEPLOYMENT
    except runner.RunFailed as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except GeoNimbusError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
