"""Per-endpoint daemon: stage deployment, worker pools, and metrics.

One daemon stands in for one endpoint.  Each deployed stage gets a
:class:`StageRuntime` with its own FIFO queue and worker pool; arriving
items are materialized under ``<work-root>/<stage>/in`` and handed to the
stage entry, whose output files are pushed to the endpoint's local store,
published, and forwarded over the stage's outgoing links.

Channel semantics
-----------------
memory   bounded in-process queue (64 pending per link); the producer
         blocks when the consumer lags, payload bytes stay in RAM until a
         consumer worker picks the task up
file     payload written straight into the consumer stage's input
         directory on the same endpoint
network  nothing to do here: the storage manager holds a standing route
         for the link and relays published items to the consumer's store

Failed tasks are retried once, then dead-lettered to ``failed/`` together
with the error text.  A metrics thread reports one window per stage per
reporting interval (default 1 s).
"""

from __future__ import annotations

import dataclasses
import os
import queue as queue_mod
import shutil
import subprocess
import threading
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional

from .autoscaler import StageMetrics
from .errors import GeoNimbusError
from .model import StageSpec
from .registry import StageContext, resolve_command, resolve_function
from .storage import (
    EVENT_INPUT_WRITE,
    EVENT_TRANSFER,
    DataItem,
    DataStore,
    DigestMismatch,
    StoreInfo,
    content_id,
)

MEMORY_CHANNEL_CAPACITY = 64
POLL_SECONDS = 0.05

STATE_DEPLOYING = "deploying"
STATE_READY = "ready"
STATE_DRAINING = "draining"
STATE_STOPPED = "stopped"


class DuplicateStage(GeoNimbusError):
    """Stage with this name is already deployed and not stopped."""


class UnknownStage(GeoNimbusError):
    """No runtime with the requested stage name."""


class StageStopped(GeoNimbusError):
    """Runtime no longer accepts work."""


class OutOfRange(GeoNimbusError):
    """Requested worker count violates the stage's bounds."""


class StageInvocationFailed(GeoNimbusError):
    """Stage entry raised or exited nonzero (after retry)."""


@dataclass(frozen=True)
class TaskRecord:
    item_id: str
    enqueue_time: float
    start_time: float
    end_time: float
    bytes_in: int
    bytes_out: int
    outcome: str  # "ok" | "failed"

    @property
    def wait_time(self) -> float:
        return self.start_time - self.enqueue_time

    @property
    def service_time(self) -> float:
        return self.end_time - self.start_time

    def to_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "enqueue_time": self.enqueue_time,
            "start_time": self.start_time,
            "end_time": self.end_time,
            "bytes_in": self.bytes_in,
            "bytes_out": self.bytes_out,
            "outcome": self.outcome,
        }


@dataclass
class WorkItem:
    item_id: str
    name: str
    enqueue_time: float
    payload: Optional[bytes] = None  # memory channel: bytes still in RAM
    path: Optional[str] = None  # file already materialized in input_dir
    on_start: Optional[Callable[[], None]] = None  # releases channel slot


@dataclass(frozen=True)
class LinkBinding:
    to_stage: str
    channel: str
    to_endpoint: str


class _Worker:
    def __init__(self, runtime: "StageRuntime", number: int):
        self.runtime = runtime
        self.number = number
        self.thread = threading.Thread(
            target=runtime._worker_loop,
            args=(self,),
            name=f"{runtime.daemon.name}:{runtime.spec.name}:w{number}",
            daemon=True,
        )
        self.thread.start()


class StageRuntime:
    def __init__(self, daemon: "Daemon", spec: StageSpec, bindings: list[LinkBinding], system: str):
        self.daemon = daemon
        self.spec = spec
        self.system = system
        self.out_links = bindings
        self.state = STATE_DEPLOYING
        root = Path(daemon.work_root) / spec.name
        self.input_dir = root / "in"
        self.output_dir = root / "out"
        self.failed_dir = root / "failed"
        for d in (self.input_dir, self.output_dir, self.failed_dir):
            d.mkdir(parents=True, exist_ok=True)
        self.queue: queue_mod.Queue[WorkItem] = queue_mod.Queue()
        self._lock = threading.Lock()
        self._workers: list[_Worker] = []
        self._target = 0
        self._task_seq = 0
        self.enqueued = 0
        self.completed = 0
        self.failed = 0
        self._window_records: list[TaskRecord] = []
        self._window_start = time.time()
        # memory-channel slot gates, one per outgoing memory link
        self._gates: dict[str, threading.BoundedSemaphore] = {
            b.to_stage: threading.BoundedSemaphore(MEMORY_CHANNEL_CAPACITY)
            for b in bindings
            if b.channel == "memory"
        }
        if spec.kind == "function":
            self._fn = resolve_function(spec.entry)
            self._argv = None
        else:
            self._fn = None
            self._argv = resolve_command(spec.entry)

    # -- worker pool ----------------------------------------------------------

    def resolved_max(self) -> int:
        if self.spec.workers_max == "auto":
            return self.daemon.cores
        return int(self.spec.workers_max)

    def worker_count(self) -> int:
        with self._lock:
            return sum(1 for w in self._workers if w.thread.is_alive())

    def set_workers(self, count: int) -> int:
        if not 1 <= count <= self.resolved_max():
            raise OutOfRange(
                f"{self.spec.name}: worker count {count} outside 1..{self.resolved_max()}"
            )
        with self._lock:
            self._target = count
            alive = [w for w in self._workers if w.thread.is_alive()]
            next_number = max((w.number for w in alive), default=-1) + 1
            while len(alive) < count:
                worker = _Worker(self, next_number)
                self._workers.append(worker)
                alive.append(worker)
                next_number += 1
        return count

    def _shutdown_workers(self) -> None:
        with self._lock:
            self._target = 0
            workers = list(self._workers)
        for w in workers:
            w.thread.join(timeout=30)

    # -- intake ---------------------------------------------------------------

    def enqueue(self, item: WorkItem) -> None:
        with self._lock:
            if self.state not in (STATE_DEPLOYING, STATE_READY):
                raise StageStopped(f"stage {self.spec.name} is {self.state}")
            self.enqueued += 1
        self.queue.put(item)

    def backlog(self) -> int:
        with self._lock:
            return self.enqueued - self.completed - self.failed

    # -- the worker body ------------------------------------------------------

    def _worker_loop(self, worker: _Worker) -> None:
        while True:
            with self._lock:
                if worker.number >= self._target:
                    return
                draining = self.state == STATE_DRAINING
            try:
                work = self.queue.get(timeout=POLL_SECONDS)
            except queue_mod.Empty:
                if draining and self.backlog() == 0:
                    return
                continue
            self._run_task(work)

    def _materialize(self, work: WorkItem) -> Path:
        if work.path is not None:
            return Path(work.path)
        name = f"{work.item_id[:12]}_{work.name}" if work.name else work.item_id[:12]
        path = self.input_dir / name
        path.write_bytes(work.payload or b"")
        return path

    def _run_task(self, work: WorkItem) -> None:
        start = time.time()
        input_path = self._materialize(work)
        if work.on_start is not None:
            work.on_start()  # frees the producer's channel slot
        bytes_in = input_path.stat().st_size
        with self._lock:
            self._task_seq += 1
            seq = self._task_seq
        error_text = None
        outputs: list[Path] = []
        for attempt in (1, 2):
            task_out = self.output_dir / f"t{seq:06d}a{attempt}"
            task_out.mkdir(parents=True, exist_ok=True)
            try:
                self._invoke(input_path, task_out)
                outputs = sorted(p for p in task_out.rglob("*") if p.is_file())
                error_text = None
                break
            except Exception:
                error_text = traceback.format_exc()
        end = time.time()
        bytes_out = 0
        outcome = "ok"
        if error_text is None:
            try:
                for path in outputs:
                    data = path.read_bytes()
                    bytes_out += len(data)
                    self.daemon._forward(self, data, path.name)
            except Exception:
                error_text = traceback.format_exc()
        if error_text is not None:
            outcome = "failed"
            self._dead_letter(input_path, error_text)
        record = TaskRecord(
            item_id=work.item_id,
            enqueue_time=work.enqueue_time,
            start_time=start,
            end_time=time.time(),
            bytes_in=bytes_in,
            bytes_out=bytes_out,
            outcome=outcome,
        )
        with self._lock:
            self._window_records.append(record)
            if outcome == "ok":
                self.completed += 1
            else:
                self.failed += 1

    def _invoke(self, input_path: Path, task_out: Path) -> None:
        if self._fn is not None:
            ctx = StageContext(
                stage=self.spec.name,
                system=self.system,
                work_dir=str(Path(self.daemon.work_root) / self.spec.name),
                params=self.daemon.params,
            )
            self._fn(str(input_path), str(task_out), ctx)
            return
        env = dict(os.environ)
        env.update(self.daemon.params)
        env["GEONIMBUS_OUTPUT_DIR"] = str(task_out)
        proc = subprocess.run(
            [*self._argv, str(input_path)],
            env=env,
            capture_output=True,
            text=True,
            timeout=600,
        )
        if proc.returncode != 0:
            raise StageInvocationFailed(
                f"{self.spec.name}: exit {proc.returncode}: {proc.stderr.strip()[-2000:]}"
            )

    def _dead_letter(self, input_path: Path, error_text: str) -> None:
        target = self.failed_dir / input_path.name
        try:
            if input_path.exists():
                shutil.copyfile(input_path, target)
            target.with_suffix(target.suffix + ".error.txt").write_text(error_text)
        except OSError:
            pass

    # -- metrics --------------------------------------------------------------

    def snapshot_window(self, now: float) -> StageMetrics:
        with self._lock:
            records = self._window_records
            self._window_records = []
            window_start = self._window_start
            self._window_start = now
            depth = self.enqueued - self.completed - self.failed
            workers = sum(1 for w in self._workers if w.thread.is_alive())
        done = [r for r in records if r.outcome == "ok"]
        return StageMetrics(
            stage=self.spec.name,
            window_start=window_start,
            window_end=now,
            tasks_done=len(done),
            bytes_processed=sum(r.bytes_in for r in done),
            mean_service_time=sum(r.service_time for r in done) / len(done) if done else 0.0,
            mean_wait_time=sum(r.wait_time for r in done) / len(done) if done else 0.0,
            workers=workers,
            queue_depth=depth,
        )

    def status(self) -> dict:
        with self._lock:
            return {
                "stage": self.spec.name,
                "state": self.state,
                "workers": sum(1 for w in self._workers if w.thread.is_alive()),
                "queue_depth": self.enqueued - self.completed - self.failed,
                "completed": self.completed,
                "failed": self.failed,
            }


class Daemon:
    """Endpoint-side runtime hosting stage worker pools and a local store.

    ``manager`` is anything with the storage manager's publish surface
    (``publish_and_route``); in one process that is the manager object
    itself, across machines a wire-protocol client.
    """

    def __init__(
        self,
        name: str,
        *,
        cores: int,
        store: DataStore,
        manager,
        work_root: str | os.PathLike,
        params: Mapping[str, str] | None = None,
        metrics_sink: Callable[[StageMetrics], None] | None = None,
        reporting_interval: float = 1.0,
    ) -> None:
        self.name = name
        self.cores = max(1, int(cores))
        self.store = store
        self.manager = manager
        self.work_root = str(work_root)
        self.params = dict(params or {})
        self.metrics_sink = metrics_sink
        self.reporting_interval = reporting_interval
        self._lock = threading.Lock()
        self._runtimes: dict[str, StageRuntime] = {}
        self._closed = threading.Event()
        self._reporter: threading.Thread | None = None
        Path(self.work_root).mkdir(parents=True, exist_ok=True)

    # -- deployment -----------------------------------------------------------

    def deploy_stage(self, spec: StageSpec, bindings: list[LinkBinding], *, system: str = "") -> StageRuntime:
        with self._lock:
            existing = self._runtimes.get(spec.name)
            if existing is not None and existing.state != STATE_STOPPED:
                raise DuplicateStage(f"stage {spec.name!r} already deployed on {self.name}")
        runtime = StageRuntime(self, spec, bindings, system)  # EntryNotFound surfaces here
        with self._lock:
            self._runtimes[spec.name] = runtime
        runtime.set_workers(spec.workers_initial)
        runtime.state = STATE_READY
        self._ensure_reporter()
        return runtime

    def runtime(self, stage: str) -> StageRuntime:
        with self._lock:
            try:
                return self._runtimes[stage]
            except KeyError:
                raise UnknownStage(f"no stage {stage!r} on daemon {self.name}") from None

    def runtimes(self) -> list[StageRuntime]:
        with self._lock:
            return list(self._runtimes.values())

    def undeploy_stage(self, stage: str, *, force: bool = False) -> None:
        runtime = self.runtime(stage)
        if runtime.state == STATE_STOPPED:
            return
        runtime.state = STATE_STOPPED if force else STATE_DRAINING
        if not force:
            deadline = time.time() + 120
            while runtime.backlog() > 0 and time.time() < deadline:
                time.sleep(POLL_SECONDS)
            runtime.state = STATE_STOPPED
        runtime._shutdown_workers()

    def resize_workers(self, stage: str, new_count: int) -> int:
        runtime = self.runtime(stage)
        if runtime.state not in (STATE_READY, STATE_DEPLOYING):
            raise StageStopped(f"stage {stage} is {runtime.state}")
        return runtime.set_workers(new_count)

    # -- data paths -----------------------------------------------------------

    def ingest(self, stage: str, name: str, data: bytes) -> DataItem:
        """Push source bytes into the local store and queue them for the
        stage; this is how a dataflow starts."""
        runtime = self.runtime(stage)
        item = self.store.push(data, f"ingest:{stage}")
        self.manager.publish_catalog(item, self.store.store_id, system=runtime.system)
        runtime.enqueue(WorkItem(item.id, name, time.time(), payload=data))
        return item

    def deliver(self, item: DataItem, payload: bytes, consumer_stage: str | None, link: str | None) -> StoreInfo:
        """Storage-manager delivery: verify digest, land bytes in the local
        store, then hand them to the consumer stage's input directory."""
        if content_id(payload) != item.id:
            raise DigestMismatch(f"delivered bytes for {item.id} fail digest check at {self.name}")
        self.store.push(payload, item.producer_stage, record_event=False)
        if self.store.events is not None:
            self.store.events.emit(EVENT_TRANSFER, item.id, self.store.store_id, stage=consumer_stage, link=link)
        if consumer_stage is not None:
            runtime = self.runtime(consumer_stage)
            name = f"{item.id[:12]}_{link.split('->')[0] if link else 'item'}"
            path = runtime.input_dir / name
            path.write_bytes(payload)
            if self.store.events is not None:
                self.store.events.emit(
                    EVENT_INPUT_WRITE, item.id, self.store.store_id, stage=consumer_stage, link=link
                )
            runtime.enqueue(WorkItem(item.id, name, time.time(), path=str(path)))
        return self.store.info()

    def _forward(self, runtime: StageRuntime, data: bytes, name: str) -> None:
        """Push one output to the local store, publish it, and feed every
        same-endpoint link."""
        item = self.store.push(data, runtime.spec.name)
        if item.producer_stage != runtime.spec.name:
            # Dedup can hand back a record first written by another stage;
            # routes match on the publishing stage, so restamp it here.
            item = dataclasses.replace(item, producer_stage=runtime.spec.name)
        self.manager.publish_and_route(item, self.store.store_id, system=runtime.system)
        for binding in runtime.out_links:
            if binding.channel == "network":
                continue  # the manager's standing route covers this link
            consumer = self.runtime(binding.to_stage)
            if binding.channel == "memory":
                gate = runtime._gates[binding.to_stage]
                gate.acquire()
                consumer.enqueue(
                    WorkItem(item.id, name, time.time(), payload=data, on_start=gate.release)
                )
            else:  # file channel: hand the payload over on disk right away
                path = consumer.input_dir / f"{item.id[:12]}_{name}"
                path.write_bytes(data)
                consumer.enqueue(WorkItem(item.id, name, time.time(), path=str(path)))

    # -- introspection ---------------------------------------------------------

    def busy(self) -> bool:
        return any(r.backlog() > 0 for r in self.runtimes())

    def counters(self) -> dict[str, tuple[int, int, int]]:
        return {r.spec.name: (r.enqueued, r.completed, r.failed) for r in self.runtimes()}

    def status(self) -> dict:
        return {
            "daemon": self.name,
            "cores": self.cores,
            "stages": {r.spec.name: r.status() for r in self.runtimes()},
        }

    def ping(self) -> dict:
        return {"daemon": self.name, "cores": self.cores, "stages": sorted(r.spec.name for r in self.runtimes())}

    # -- metrics reporter -------------------------------------------------------

    def _ensure_reporter(self) -> None:
        with self._lock:
            if self._reporter is not None and self._reporter.is_alive():
                return
            self._reporter = threading.Thread(
                target=self._report_loop, name=f"{self.name}-metrics", daemon=True
            )
            self._reporter.start()

    def _report_loop(self) -> None:
        while not self._closed.wait(self.reporting_interval):
            self.report_metrics()

    def report_metrics(self) -> list[StageMetrics]:
        """Cut one metrics window per non-stopped stage and hand the
        reports to the sink (best-effort)."""
        now = time.time()
        reports = [r.snapshot_window(now) for r in self.runtimes() if r.state != STATE_STOPPED]
        if self.metrics_sink is not None:
            for report in reports:
                try:
                    self.metrics_sink(report)
                except Exception:
                    pass  # reporting is best-effort by contract
        return reports

    def close(self, *, force: bool = True) -> None:
        self._closed.set()
        for runtime in self.runtimes():
            if runtime.state != STATE_STOPPED:
                try:
                    self.undeploy_stage(runtime.spec.name, force=force)
                except GeoNimbusError:
                    pass


class DaemonStoreBinding:
    """Presents a daemon's local store to the storage manager."""

    def __init__(self, daemon: Daemon):
        self.daemon = daemon

    def info(self) -> StoreInfo:
        return self.daemon.store.info()

    def fetch(self, item_id: str) -> bytes:
        return self.daemon.store.pull(item_id)

    def deliver(self, item: DataItem, payload: bytes, consumer_stage: str | None, link: str | None) -> StoreInfo:
        return self.daemon.deliver(item, payload, consumer_stage, link)
