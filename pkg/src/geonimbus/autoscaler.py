"""Throughput-driven worker autoscaling.

Every control interval the loop turns per-stage metrics windows into a
smoothed throughput table (EWMA, alpha 0.5), picks the active stage with
the minimum throughput as the bottleneck, and issues at most one scale
command: add a worker below the cap, or roll a previous add back when the
smoothed throughput dropped more than 10% within the three windows after
it.  Worker counts never leave [workers_initial, workers_max].

Decisions are pure functions of a metrics snapshot, so the whole policy
is testable against scripted traces without any live system.
"""

from __future__ import annotations

import json
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

from .errors import GeoNimbusError

ALPHA = 0.5
DEGRADATION_THRESHOLD = 0.10
OBSERVE_WINDOWS = 3
COOLDOWN_INTERVALS = 3
CONTROL_INTERVAL = 5.0

ACTION_ADD = "add_worker"
ACTION_REMOVE = "remove_worker"
ACTION_NOOP = "noop"


class NoActiveStages(GeoNimbusError):
    """Every stage is idle with an empty queue."""


@dataclass(frozen=True)
class StageMetrics:
    stage: str
    window_start: float
    window_end: float
    tasks_done: int
    bytes_processed: int
    mean_service_time: float
    mean_wait_time: float
    workers: int
    queue_depth: int = 0  # bookkeeping: lets the loop tell idle from starved

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "window_start": self.window_start,
            "window_end": self.window_end,
            "tasks_done": self.tasks_done,
            "bytes_processed": self.bytes_processed,
            "mean_service_time": self.mean_service_time,
            "mean_wait_time": self.mean_wait_time,
            "workers": self.workers,
            "queue_depth": self.queue_depth,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "StageMetrics":
        return cls(
            stage=doc["stage"],
            window_start=float(doc["window_start"]),
            window_end=float(doc["window_end"]),
            tasks_done=int(doc["tasks_done"]),
            bytes_processed=int(doc["bytes_processed"]),
            mean_service_time=float(doc["mean_service_time"]),
            mean_wait_time=float(doc["mean_wait_time"]),
            workers=int(doc["workers"]),
            queue_depth=int(doc.get("queue_depth", 0)),
        )


@dataclass(frozen=True)
class ThroughputEntry:
    stage: str
    throughput: float  # bytes/second, smoothed
    mean_wait_time: float
    workers: int
    queue_depth: int
    active: bool


@dataclass(frozen=True)
class ThroughputTable:
    entries: Mapping[str, ThroughputEntry]

    def active(self) -> list[ThroughputEntry]:
        return [e for e in self.entries.values() if e.active]

    def to_dict(self) -> dict:
        return {
            name: {"throughput": e.throughput, "active": e.active, "workers": e.workers}
            for name, e in sorted(self.entries.items())
        }


@dataclass(frozen=True)
class BottleneckReport:
    stage: str
    throughput: float
    table: ThroughputTable


@dataclass(frozen=True)
class ScaleCommand:
    stage: str
    action: str
    target_workers: int
    reason: str

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "action": self.action,
            "target_workers": self.target_workers,
            "reason": self.reason,
        }


@dataclass(frozen=True)
class StageState:
    workers: int
    workers_max: int
    workers_initial: int


def compute_throughput(history: Mapping[str, Sequence[StageMetrics]], alpha: float = ALPHA) -> ThroughputTable:
    """Raw window rate is bytes_processed over window length; smoothing is
    an EWMA seeded with the first window.  A stage whose latest window has
    zero completed tasks and an empty queue is inactive."""
    entries: dict[str, ThroughputEntry] = {}
    for stage, windows in history.items():
        if not windows:
            continue
        smoothed: Optional[float] = None
        for w in windows:
            length = w.window_end - w.window_start
            rate = w.bytes_processed / length if length > 0 else 0.0
            smoothed = rate if smoothed is None else alpha * rate + (1 - alpha) * smoothed
        latest = windows[-1]
        entries[stage] = ThroughputEntry(
            stage=stage,
            throughput=float(smoothed),
            mean_wait_time=latest.mean_wait_time,
            workers=latest.workers,
            queue_depth=latest.queue_depth,
            active=not (latest.tasks_done == 0 and latest.queue_depth == 0),
        )
    return ThroughputTable(entries)


def find_bottleneck(table: ThroughputTable) -> BottleneckReport:
    """Argmin throughput over active stages; ties go to the largest mean
    waiting time, then the smallest name."""
    candidates = table.active()
    if not candidates:
        raise NoActiveStages("no stage is processing or holding work")
    best = min(candidates, key=lambda e: (e.throughput, -e.mean_wait_time, e.stage))
    return BottleneckReport(stage=best.stage, throughput=best.throughput, table=table)


@dataclass
class _AddRecord:
    baseline: float
    previous_workers: int
    interval: int
    windows_seen: int = 0


class ScalePolicy:
    """Decision engine: one command per call, rollback checked first."""

    def __init__(
        self,
        *,
        degradation: float = DEGRADATION_THRESHOLD,
        observe_windows: int = OBSERVE_WINDOWS,
        cooldown_intervals: int = COOLDOWN_INTERVALS,
    ) -> None:
        self.degradation = degradation
        self.observe_windows = observe_windows
        self.cooldown_intervals = cooldown_intervals
        self._pending_adds: dict[str, _AddRecord] = {}
        self._last_add: dict[str, int] = {}

    def decide(
        self,
        report: BottleneckReport,
        states: Mapping[str, StageState],
        interval_no: int,
    ) -> ScaleCommand:
        rollback = self._check_rollbacks(report.table, states)
        if rollback is not None:
            return rollback
        stage = report.stage
        state = states.get(stage)
        if state is None:
            return ScaleCommand(stage, ACTION_NOOP, 0, "no runtime state for stage")
        if state.workers >= state.workers_max:
            return ScaleCommand(stage, ACTION_NOOP, state.workers, "at worker cap")
        last = self._last_add.get(stage)
        if last is not None and interval_no - last < self.cooldown_intervals:
            return ScaleCommand(stage, ACTION_NOOP, state.workers, "cooldown after recent add")
        entry = report.table.entries[stage]
        self._pending_adds[stage] = _AddRecord(
            baseline=entry.throughput, previous_workers=state.workers, interval=interval_no
        )
        self._last_add[stage] = interval_no
        return ScaleCommand(
            stage,
            ACTION_ADD,
            state.workers + 1,
            f"bottleneck at {entry.throughput:.1f} B/s with {state.workers} workers",
        )

    def _check_rollbacks(
        self, table: ThroughputTable, states: Mapping[str, StageState]
    ) -> Optional[ScaleCommand]:
        """Post-add observation: a >10% smoothed-throughput drop within the
        watch window undoes the add; otherwise the add is accepted."""
        for stage in sorted(self._pending_adds):
            record = self._pending_adds[stage]
            entry = table.entries.get(stage)
            if entry is None or not entry.active:
                continue
            record.windows_seen += 1
            dropped = entry.throughput < (1.0 - self.degradation) * record.baseline
            if dropped:
                del self._pending_adds[stage]
                state = states.get(stage)
                target = max(
                    record.previous_workers,
                    state.workers_initial if state is not None else 1,
                )
                return ScaleCommand(
                    stage,
                    ACTION_REMOVE,
                    target,
                    f"throughput fell {entry.throughput:.1f} < {(1 - self.degradation) * record.baseline:.1f}"
                    f" after add; rolling back",
                )
            if record.windows_seen >= self.observe_windows:
                del self._pending_adds[stage]  # add held up; new baseline accepted
        return None


class ReplicationManager:
    """The control loop: ingests metrics reports, decides, dispatches.

    ``resize`` performs the actual worker change; ``states`` supplies the
    current per-stage worker bounds.  Every interval is audited as one
    JSON line in ``log_path``.
    """

    def __init__(
        self,
        resize: Callable[[str, int], None],
        states: Callable[[], Mapping[str, StageState]],
        *,
        interval: float = CONTROL_INTERVAL,
        policy: ScalePolicy | None = None,
        log_path: str | None = None,
        history_windows: int = 240,
    ) -> None:
        self.resize = resize
        self.states = states
        self.interval = interval
        self.policy = policy or ScalePolicy()
        self.log_path = log_path
        self._history: dict[str, deque[StageMetrics]] = {}
        self._lock = threading.Lock()
        self._history_windows = history_windows
        self._interval_no = 0
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self.commands: list[ScaleCommand] = []

    # -- ingestion -------------------------------------------------------------

    def feed(self, metrics: StageMetrics) -> None:
        with self._lock:
            window = self._history.setdefault(
                metrics.stage, deque(maxlen=self._history_windows)
            )
            window.append(metrics)

    def snapshot(self) -> dict[str, list[StageMetrics]]:
        with self._lock:
            return {stage: list(windows) for stage, windows in self._history.items()}

    # -- one interval ------------------------------------------------------------

    def step(self) -> Optional[ScaleCommand]:
        self._interval_no += 1
        table = compute_throughput(self.snapshot())
        try:
            report = find_bottleneck(table)
        except NoActiveStages:
            self._audit({"interval": self._interval_no, "table": table.to_dict(), "idle": True})
            return None
        command = self.policy.decide(report, self.states(), self._interval_no)
        dispatch_error = None
        if command.action != ACTION_NOOP:
            try:
                self.resize(command.stage, command.target_workers)
            except Exception as exc:  # retried naturally on the next interval
                dispatch_error = f"{type(exc).__name__}: {exc}"
        self.commands.append(command)
        self._audit(
            {
                "interval": self._interval_no,
                "table": table.to_dict(),
                "bottleneck": report.stage,
                "command": command.to_dict(),
                "dispatch_error": dispatch_error,
            }
        )
        return command

    def _audit(self, doc: dict) -> None:
        if self.log_path is None:
            return
        doc = {"t": time.time(), **doc}
        try:
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(doc, sort_keys=True) + "\n")
        except OSError:
            pass

    # -- loop ---------------------------------------------------------------------

    def start(self) -> None:
        if self._thread is not None and self._thread.is_alive():
            return
        self._stop.clear()
        self._thread = threading.Thread(target=self._run, name="autoscaler", daemon=True)
        self._thread.start()

    def _run(self) -> None:
        while not self._stop.wait(self.interval):
            self.step()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=self.interval + 5)
