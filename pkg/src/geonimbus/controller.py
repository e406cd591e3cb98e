"""Deployment orchestration: plan -> running system.

The controller talks to daemons through ports, small objects exposing the
daemon surface it needs (ping, deploy, resize, ingest, counters, ...).
In one process the port wraps a :class:`~geonimbus.daemon.Daemon`
directly; across machines it wraps a wire-protocol client.  Stages deploy
in reverse topological order so every consumer is wired before any
producer can emit, and a failed deployment rolls back to zero stages.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Protocol

from .daemon import LinkBinding
from .errors import GeoNimbusError
from .eos.summary import WaterSummary, trend_by_region
from .model import DeploymentPlan, StageSpec, serialize_spec
from .storage import Route

STATE_RUNNING = "running"
STATE_STOPPED = "stopped"


class EndpointUnreachable(GeoNimbusError):
    """A daemon named in the plan did not answer the liveness ping."""

    def __init__(self, endpoint: str, detail: str = ""):
        super().__init__(f"endpoint {endpoint!r} unreachable" + (f": {detail}" if detail else ""))
        self.endpoint = endpoint


class PartialDeployment(GeoNimbusError):
    """Deployment failed midway; names the stages that had succeeded
    (they are torn back down before this is raised)."""

    def __init__(self, failed_stage: str, succeeded: list[str], detail: str):
        super().__init__(
            f"stage {failed_stage!r} failed to deploy ({detail}); "
            f"rolled back {len(succeeded)} stage(s): {', '.join(succeeded) or 'none'}"
        )
        self.failed_stage = failed_stage
        self.succeeded = succeeded


class SystemNotRunning(GeoNimbusError):
    """Operation requires a running system handle."""


class DaemonPort(Protocol):
    """What the controller requires from an endpoint."""

    def ping(self) -> dict: ...

    def store_id(self) -> str: ...

    def deploy_stage(self, spec: StageSpec, bindings: list[LinkBinding], *, system: str) -> None: ...

    def undeploy_stage(self, stage: str, *, force: bool = False) -> None: ...

    def resize_workers(self, stage: str, count: int) -> int: ...

    def ingest(self, stage: str, name: str, data: bytes) -> str: ...

    def status(self) -> dict: ...

    def counters(self) -> dict: ...


@dataclass
class SystemHandle:
    system: str
    plan: DeploymentPlan
    digest: str
    daemons: Mapping[str, DaemonPort]  # endpoint name -> port
    manager: object
    state: str = STATE_RUNNING
    deployed_at: float = field(default_factory=time.time)

    def endpoint_of(self, stage: str) -> str:
        return self.plan.spec.stage(stage).endpoint

    def port_for_stage(self, stage: str) -> DaemonPort:
        return self.daemons[self.endpoint_of(stage)]


def plan_digest(plan: DeploymentPlan) -> str:
    doc = {
        "spec": serialize_spec(plan.spec),
        "order": list(plan.order),
        "bindings": [
            [b.link.from_stage, b.link.to_stage, b.link.channel, b.from_endpoint, b.to_endpoint]
            for b in plan.bindings
        ],
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


class Controller:
    """Deploys plans onto daemon ports and manages the resulting handles."""

    def __init__(self, manager) -> None:
        self.manager = manager
        self._lock = threading.Lock()
        self._systems: dict[str, SystemHandle] = {}

    # -- deployment -------------------------------------------------------------

    def deploy_system(self, plan: DeploymentPlan, daemons: Mapping[str, DaemonPort]) -> SystemHandle:
        digest = plan_digest(plan)
        with self._lock:
            existing = self._systems.get(plan.system)
        if existing is not None and existing.digest == digest and existing.state == STATE_RUNNING:
            return existing  # identical plan already up: no-op

        used_endpoints = {s.endpoint for s in plan.spec.stages}
        for endpoint in sorted(used_endpoints):
            port = daemons.get(endpoint)
            if port is None:
                raise EndpointUnreachable(endpoint, "no daemon registered")
            try:
                port.ping()
            except Exception as exc:
                raise EndpointUnreachable(endpoint, str(exc)) from exc

        # standing routes carry network links through the storage manager
        for binding in plan.bindings:
            if binding.link.channel != "network":
                continue
            self.manager.add_route(
                Route(
                    system=plan.system,
                    producer_stage=binding.link.from_stage,
                    consumer_stage=binding.link.to_stage,
                    target_store=daemons[binding.to_endpoint].store_id(),
                )
            )

        deployed: list[str] = []
        for stage_name in reversed(plan.order):  # consumers first
            spec = plan.spec.stage(stage_name)
            out_bindings = [
                LinkBinding(
                    to_stage=b.link.to_stage,
                    channel=b.link.channel,
                    to_endpoint=b.to_endpoint,
                )
                for b in plan.bindings
                if b.link.from_stage == stage_name
            ]
            try:
                daemons[spec.endpoint].deploy_stage(spec, out_bindings, system=plan.system)
            except Exception as exc:
                for name in reversed(deployed):
                    try:
                        daemons[plan.spec.stage(name).endpoint].undeploy_stage(name, force=True)
                    except Exception:
                        pass
                raise PartialDeployment(stage_name, deployed, f"{type(exc).__name__}: {exc}") from exc
            deployed.append(stage_name)

        handle = SystemHandle(
            system=plan.system,
            plan=plan,
            digest=digest,
            daemons=dict(daemons),
            manager=self.manager,
        )
        with self._lock:
            self._systems[plan.system] = handle
        return handle

    def handle(self, system: str) -> SystemHandle:
        with self._lock:
            try:
                return self._systems[system]
            except KeyError:
                raise SystemNotRunning(f"no deployed system {system!r}") from None

    # -- dataflow ---------------------------------------------------------------

    def ingest(self, handle: SystemHandle, items: Iterable[tuple[str, bytes]], stage: str | None = None) -> int:
        """Push source items into the (single) source stage; returns the
        accepted count."""
        if handle.state != STATE_RUNNING:
            raise SystemNotRunning(f"system {handle.system} is {handle.state}")
        sources = [stage] if stage else [s.name for s in handle.plan.spec.source_stages()]
        if len(sources) != 1:
            raise SystemNotRunning(
                f"system {handle.system} has {len(sources)} source stages; pass one explicitly"
            )
        source = sources[0]
        port = handle.port_for_stage(source)
        count = 0
        for name, data in items:
            port.ingest(source, name, data)
            count += 1
        return count

    # -- observation --------------------------------------------------------------

    def status(self, handle: SystemHandle) -> dict:
        stages: dict[str, dict] = {}
        for endpoint, port in handle.daemons.items():
            doc = port.status()
            for stage, row in doc.get("stages", {}).items():
                stages[stage] = {**row, "endpoint": endpoint}
        return {"system": handle.system, "state": handle.state, "stages": stages}

    def wait_idle(self, handle: SystemHandle, timeout: float = 120.0, settle_polls: int = 3) -> bool:
        """True once every stage backlog is zero, no transfer is pending,
        and completion counters hold still for a few polls."""
        deadline = time.time() + timeout
        stable = 0
        last = None
        while time.time() < deadline:
            backlog = 0
            counters = {}
            for endpoint, port in handle.daemons.items():
                for stage, (enq, done, failed) in port.counters().items():
                    backlog += enq - done - failed
                    counters[stage] = (enq, done, failed)
            pending = self.manager.pending_transfers()
            if backlog == 0 and pending == 0 and counters == last:
                stable += 1
                if stable >= settle_polls:
                    return True
            else:
                stable = 0
            last = counters
            time.sleep(0.1)
        return False

    # -- teardown -----------------------------------------------------------------

    def teardown(self, handle: SystemHandle, *, force: bool = False) -> None:
        """Drain (unless forced) and stop every stage; catalogs, stores,
        and daemons stay up.  Idempotent."""
        for stage_name in plan_order_for_teardown(handle.plan):
            try:
                handle.port_for_stage(stage_name).undeploy_stage(stage_name, force=force)
            except Exception:
                pass
        handle.state = STATE_STOPPED

    # -- results --------------------------------------------------------------------

    def collect_results(self, handle: SystemHandle, out_dir: str) -> dict:
        """Gather sink-stage outputs from the catalog into ``out_dir``.

        Summary records across all sink items are merged, sorted by
        (scene_id, index_name), and written as ``summaries.jsonl``; per
        (path, row, index) trends land in ``trends.json``.  Sorting makes
        the files byte-comparable across runs and modes.
        """
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        sinks = {s.name for s in handle.plan.spec.sink_stages()}
        records: list[dict] = []
        seen: set[str] = set()
        for sink in sorted(sinks):
            for entry in self.manager.entries(system=handle.system, producer_stage=sink):
                if entry.item.id in seen:
                    continue
                seen.add(entry.item.id)
                payload = self.manager.fetch_bytes(entry.item.id)
                for line in payload.decode("utf-8").splitlines():
                    if line.strip():
                        records.append(json.loads(line))
        records.sort(key=lambda r: (r.get("scene_id", ""), r.get("index_name", "")))
        summary_path = out / "summaries.jsonl"
        with open(summary_path, "w") as fh:
            for record in records:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        summaries = [WaterSummary.from_record(r) for r in records]
        trends = {
            f"{path}/{row}/{index}": {
                "slope": line.slope,
                "intercept": line.intercept,
                "n_points": line.n_points,
            }
            for (path, row, index), line in sorted(trend_by_region(summaries).items())
        }
        trends_path = out / "trends.json"
        trends_path.write_text(json.dumps(trends, indent=2, sort_keys=True) + "\n")
        return {
            "records": len(records),
            "summaries": str(summary_path),
            "trends": str(trends_path),
        }


def plan_order_for_teardown(plan: DeploymentPlan) -> list[str]:
    """Producers first, so upstream stages stop feeding before consumers
    drain."""
    return list(plan.order)
