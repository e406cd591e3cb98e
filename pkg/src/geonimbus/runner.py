"""One-process execution: local systems, full runs, and benchmarks.

Local mode hosts one in-process daemon per declared endpoint, an embedded
storage manager, and the same controller logic used against live
daemons, so channel wiring and data movement follow identical contracts.
Links declared (or defaulted) as ``file`` run on memory channels here;
explicit ``network`` links still flow through the embedded manager.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Optional

from .autoscaler import (
    ReplicationManager,
    ScaleCommand,
    StageMetrics,
    StageState,
)
from .controller import Controller, SystemHandle
from .daemon import Daemon, DaemonStoreBinding, LinkBinding
from .errors import GeoNimbusError
from .eos import scenes
from .eos.stages import ENV_HASH_BYTES
from .model import DeploymentPlan, StageSpec, SystemSpec, parse_spec, plan as make_plan
from .storage import DataStore, EventLog, StorageManager


class RunFailed(GeoNimbusError):
    """The pipeline did not reach quiescence before the deadline."""


class LocalDaemonPort:
    """Controller port over an in-process daemon."""

    def __init__(self, daemon: Daemon):
        self.daemon = daemon

    def ping(self) -> dict:
        return self.daemon.ping()

    def store_id(self) -> str:
        return self.daemon.store.store_id

    def deploy_stage(self, spec: StageSpec, bindings: list[LinkBinding], *, system: str = "") -> None:
        self.daemon.deploy_stage(spec, bindings, system=system)

    def undeploy_stage(self, stage: str, *, force: bool = False) -> None:
        self.daemon.undeploy_stage(stage, force=force)

    def resize_workers(self, stage: str, count: int) -> int:
        return self.daemon.resize_workers(stage, count)

    def ingest(self, stage: str, name: str, data: bytes) -> str:
        return self.daemon.ingest(stage, name, data).id

    def status(self) -> dict:
        return self.daemon.status()

    def counters(self) -> dict:
        return self.daemon.counters()


class MetricsHistory:
    """Metrics sink that keeps every window, for run reports."""

    def __init__(self) -> None:
        self._history: dict[str, list[StageMetrics]] = {}

    def __call__(self, metrics: StageMetrics) -> None:
        self._history.setdefault(metrics.stage, []).append(metrics)

    def by_stage(self) -> dict[str, list[StageMetrics]]:
        return {k: list(v) for k, v in self._history.items()}


def _compose_sinks(*sinks: Optional[Callable[[StageMetrics], None]]):
    todo = [s for s in sinks if s is not None]

    def sink(metrics: StageMetrics) -> None:
        for s in todo:
            s(metrics)

    return sink


@dataclass
class LocalSystem:
    spec: SystemSpec
    plan: DeploymentPlan
    manager: StorageManager
    controller: Controller
    daemons: dict[str, Daemon]
    ports: dict[str, LocalDaemonPort]
    handle: SystemHandle
    events: EventLog
    history: MetricsHistory
    replication: Optional[ReplicationManager]
    work_root: Path

    def stage_daemon(self, stage: str) -> Daemon:
        return self.daemons[self.spec.stage(stage).endpoint]

    def close(self) -> None:
        if self.replication is not None:
            self.replication.stop()
        for daemon in self.daemons.values():
            daemon.close()


def localize_channels(spec: SystemSpec) -> SystemSpec:
    """file -> memory for one-process runs; network links keep the full
    storage flow through the embedded manager."""
    links = tuple(
        replace(link, channel="memory") if link.channel == "file" else link for link in spec.links
    )
    return replace(spec, links=links)


def _apply_worker_overrides(spec: SystemSpec, workers: Mapping[str, int] | None) -> SystemSpec:
    if not workers:
        return spec
    unknown = set(workers) - {s.name for s in spec.stages}
    if unknown:
        raise GeoNimbusError(f"worker overrides name unknown stages: {sorted(unknown)}")
    stages = tuple(
        replace(s, workers_initial=int(workers[s.name])) if s.name in workers else s
        for s in spec.stages
    )
    return replace(spec, stages=stages)


def build_local_system(
    spec: SystemSpec,
    work_root: str | os.PathLike,
    *,
    workers: Mapping[str, int] | None = None,
    params: Mapping[str, str] | None = None,
    autoscale: bool = False,
    control_interval: float = 1.0,
    reporting_interval: float = 0.25,
    keep_channels: bool = False,
) -> LocalSystem:
    """Stand up every endpoint of ``spec`` in this process and deploy."""
    work_root = Path(work_root)
    work_root.mkdir(parents=True, exist_ok=True)
    spec = _apply_worker_overrides(spec if keep_channels else localize_channels(spec), workers)
    system_plan = make_plan(spec)  # raises InvalidSpec with violations

    events = EventLog()
    manager = StorageManager(work_root / "manager", events=events)
    history = MetricsHistory()

    replication: Optional[ReplicationManager] = None
    daemons: dict[str, Daemon] = {}
    ports: dict[str, LocalDaemonPort] = {}

    def resize(stage: str, count: int) -> None:
        daemons[spec.stage(stage).endpoint].resize_workers(stage, count)

    def states() -> dict[str, StageState]:
        out: dict[str, StageState] = {}
        for daemon in daemons.values():
            for runtime in daemon.runtimes():
                out[runtime.spec.name] = StageState(
                    workers=runtime.worker_count(),
                    workers_max=runtime.resolved_max(),
                    workers_initial=runtime.spec.workers_initial,
                )
        return out

    if autoscale:
        replication = ReplicationManager(
            resize,
            states,
            interval=control_interval,
            log_path=str(work_root / "autoscaler.log"),
        )
    sink = _compose_sinks(history, replication.feed if replication else None)

    for endpoint in spec.endpoints:
        store = DataStore(
            f"{endpoint.name}-local",
            work_root / "stores" / endpoint.name,
            kind="local",
            endpoint=endpoint.name,
            events=events,
        )
        daemon = Daemon(
            endpoint.name,
            cores=endpoint.cores,
            store=store,
            manager=manager,
            work_root=work_root / "work" / endpoint.name,
            params=params,
            metrics_sink=sink,
            reporting_interval=reporting_interval,
        )
        manager.register_store(DaemonStoreBinding(daemon))
        daemons[endpoint.name] = daemon
        ports[endpoint.name] = LocalDaemonPort(daemon)

    controller = Controller(manager)
    handle = controller.deploy_system(system_plan, ports)
    if replication is not None:
        replication.start()
    return LocalSystem(
        spec=spec,
        plan=system_plan,
        manager=manager,
        controller=controller,
        daemons=daemons,
        ports=ports,
        handle=handle,
        events=events,
        history=history,
        replication=replication,
        work_root=work_root,
    )


@dataclass
class RunReport:
    system: str
    response_seconds: float
    ingested: int
    records: int
    results_dir: str
    counters: dict[str, tuple[int, int, int]] = field(default_factory=dict)
    commands: list[ScaleCommand] = field(default_factory=list)
    stage_history: dict[str, list[StageMetrics]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "system": self.system,
            "response_seconds": self.response_seconds,
            "ingested": self.ingested,
            "records": self.records,
            "results_dir": self.results_dir,
            "counters": {k: list(v) for k, v in sorted(self.counters.items())},
            "commands": [c.to_dict() for c in self.commands],
            "stage_history": {
                stage: [w.to_dict() for w in windows]
                for stage, windows in sorted(self.stage_history.items())
            },
        }


def _input_items(input_dir: str | os.PathLike) -> list[tuple[str, bytes]]:
    root = Path(input_dir)
    if not root.is_dir():
        raise GeoNimbusError(f"input directory {root} does not exist")
    return [(p.name, p.read_bytes()) for p in sorted(root.iterdir()) if p.is_file()]


def run_local(
    spec: SystemSpec,
    input_dir: str | os.PathLike,
    work_root: str | os.PathLike,
    *,
    workers: Mapping[str, int] | None = None,
    params: Mapping[str, str] | None = None,
    autoscale: bool = False,
    timeout: float = 600.0,
) -> RunReport:
    """Deploy, ingest every file in ``input_dir``, run to quiescence,
    collect results, tear down.  Raises :class:`RunFailed` on timeout."""
    system = build_local_system(
        spec, work_root, workers=workers, params=params, autoscale=autoscale
    )
    try:
        items = _input_items(input_dir)
        started = time.time()
        count = system.controller.ingest(system.handle, items) if items else 0
        if count and not system.controller.wait_idle(system.handle, timeout=timeout):
            raise RunFailed(f"{spec.name}: still busy after {timeout}s")
        elapsed = (time.time() - started) if count else 0.0
        results_dir = Path(work_root) / "results"
        summary = system.controller.collect_results(system.handle, str(results_dir))
        counters: dict[str, tuple[int, int, int]] = {}
        for daemon in system.daemons.values():
            counters.update(daemon.counters())
        failed = {s: c for s, c in counters.items() if c[2] > 0}
        if failed:
            raise RunFailed(f"{spec.name}: stage failures {failed}; see work dirs under {work_root}")
        report = RunReport(
            system=spec.name,
            response_seconds=elapsed,
            ingested=count,
            records=summary["records"],
            results_dir=str(results_dir),
            counters=counters,
            commands=list(system.replication.commands) if system.replication else [],
            stage_history=system.history.by_stage(),
        )
        (results_dir / "run_report.json").write_text(
            json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
        )
        system.controller.teardown(system.handle)
        return report
    finally:
        system.close()


def load_spec(path: str | os.PathLike) -> SystemSpec:
    return parse_spec(Path(path).read_text())


# ---------------------------------------------------------------------------
# Benchmarks
# ---------------------------------------------------------------------------


def calibrate_hash_bytes(target_seconds: float = 1.0) -> int:
    """Size a hashing workload so one scene costs about ``target_seconds``
    of single-threaded compute.  Measured once; the result is pinned for a
    whole sweep so every point runs the identical workload."""
    probe = b"\x5a" * (32 << 20)
    start = time.perf_counter()
    hashlib.sha256(probe).hexdigest()
    elapsed = time.perf_counter() - start
    rate = len(probe) / max(elapsed, 1e-9)
    return max(1 << 20, int(rate * target_seconds))


@dataclass
class BenchRow:
    workers: int
    run: int
    response_seconds: float
    ingested: int

    def to_dict(self) -> dict:
        return {
            "workers": self.workers,
            "run": self.run,
            "response_seconds": self.response_seconds,
            "ingested": self.ingested,
        }


def bench(
    spec: SystemSpec,
    work_root: str | os.PathLike,
    *,
    scenes_count: int = 16,
    sweep: tuple[int, ...] = (1, 2, 4),
    stage: str = "derivates",
    repeats: int = 1,
    per_scene_seconds: float = 1.0,
    timeout: float = 600.0,
) -> list[BenchRow]:
    """Worker sweep over a synthetic dataset with a CPU-inflated stage.

    The dataset and the hashing workload are generated once and shared by
    every sweep point; the autoscaler stays off so worker counts are
    exactly the swept values.
    """
    work_root = Path(work_root)
    work_root.mkdir(parents=True, exist_ok=True)
    input_dir = work_root / "input"
    input_dir.mkdir(exist_ok=True)
    scene_dir = work_root / "input_scenes"
    if scenes_count > 0:
        scenes.make_fixture_set(scene_dir, scenes_count)
        (input_dir / "query.json").write_text(
            json.dumps(
                {
                    "lat": scenes.DEFAULT_POINT[0],
                    "lon": scenes.DEFAULT_POINT[1],
                    "start": "2000-01-01",
                    "end": "2099-12-31",
                    "source_dir": str(scene_dir),
                },
                indent=2,
            )
        )
    hash_bytes = calibrate_hash_bytes(per_scene_seconds) if scenes_count > 0 else 0
    rows: list[BenchRow] = []
    for workers in sweep:
        for run in range(repeats):
            report = run_local(
                spec,
                input_dir,
                work_root / f"w{workers}r{run}",
                workers={stage: workers},
                params={ENV_HASH_BYTES: str(hash_bytes)},
                autoscale=False,
                timeout=timeout,
            )
            rows.append(
                BenchRow(
                    workers=workers,
                    run=run,
                    response_seconds=report.response_seconds,
                    ingested=report.ingested,
                )
            )
    (work_root / "bench_report.json").write_text(
        json.dumps([r.to_dict() for r in rows], indent=2, sort_keys=True) + "\n"
    )
    return rows
