"""Declarative system model: parse, validate and plan staged dataflows.

A system document is a YAML file with four top-level sections::

    system:
      name: <identifier>
    endpoints:
      - name: <identifier>
        address: <host:port>
        cores: <positive int>
        roles: [compute, local-store, global-store]   # optional
    stages:
      - name: <identifier>
        kind: function | subprocess
        entry: <registry id or command line>
        endpoint: <endpoint name>
        workers_initial: <positive int>               # optional, default 1
        workers_max: <positive int> | auto            # optional, default auto
    links:
      - from_stage: <stage name>
        to_stage: <stage name>
        channel: file | memory | network              # optional, defaulted

When ``channel`` is omitted it defaults to ``file`` for links between
stages on the same endpoint and ``network`` otherwise.  ``workers_max:
auto`` resolves to the core count of the stage's endpoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

import yaml

from .errors import GeoNimbusError

STAGE_KINDS = ("function", "subprocess")
CHANNELS = ("file", "memory", "network")
ENDPOINT_ROLES = ("compute", "local-store", "global-store")
DEFAULT_ROLES = frozenset({"compute", "local-store"})


class SpecSyntax(GeoNimbusError):
    """The document is not well-formed in the documented format."""


class MissingField(GeoNimbusError):
    """A required key is absent from the document."""

    def __init__(self, path: str):
        super().__init__(f"missing required field: {path}")
        self.path = path


class InvalidSpec(GeoNimbusError):
    """An operation that requires a valid spec was handed an invalid one."""

    def __init__(self, violations: list["Violation"]):
        lines = "; ".join(str(v) for v in violations)
        super().__init__(f"system spec is invalid: {lines}")
        self.violations = violations


@dataclass(frozen=True)
class EndpointSpec:
    name: str
    address: str
    cores: int
    roles: frozenset = DEFAULT_ROLES


@dataclass(frozen=True)
class StageSpec:
    name: str
    kind: str
    entry: str
    endpoint: str
    workers_initial: int = 1
    workers_max: int | str = "auto"

    def resolved_workers_max(self, endpoint: EndpointSpec) -> int:
        """Resolve ``auto`` to the endpoint's core count."""
        if self.workers_max == "auto":
            return endpoint.cores
        return int(self.workers_max)


@dataclass(frozen=True)
class Interconnection:
    from_stage: str
    to_stage: str
    channel: str


@dataclass(frozen=True)
class SystemSpec:
    name: str
    stages: tuple[StageSpec, ...]
    endpoints: tuple[EndpointSpec, ...]
    links: tuple[Interconnection, ...]

    def stage(self, name: str) -> StageSpec:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    def endpoint(self, name: str) -> EndpointSpec:
        for e in self.endpoints:
            if e.name == name:
                return e
        raise KeyError(name)

    def links_from(self, stage: str) -> tuple[Interconnection, ...]:
        return tuple(l for l in self.links if l.from_stage == stage)

    def links_to(self, stage: str) -> tuple[Interconnection, ...]:
        return tuple(l for l in self.links if l.to_stage == stage)

    def source_stages(self) -> tuple[StageSpec, ...]:
        """Stages with no incoming links (ingest targets)."""
        with_in = {l.to_stage for l in self.links}
        return tuple(s for s in self.stages if s.name not in with_in)

    def sink_stages(self) -> tuple[StageSpec, ...]:
        """Stages with no outgoing links (result producers)."""
        with_out = {l.from_stage for l in self.links}
        return tuple(s for s in self.stages if s.name not in with_out)


@dataclass(frozen=True)
class Violation:
    code: str
    location: str
    message: str

    def __str__(self) -> str:
        return f"{self.code} at {self.location}: {self.message}"


@dataclass(frozen=True)
class ChannelBinding:
    link: Interconnection
    from_endpoint: str
    to_endpoint: str


@dataclass(frozen=True)
class DeploymentPlan:
    system: str
    order: tuple[str, ...]
    groups: tuple[tuple[str, tuple[StageSpec, ...]], ...]
    bindings: tuple[ChannelBinding, ...]
    spec: SystemSpec = field(repr=False)

    def group(self, endpoint: str) -> tuple[StageSpec, ...]:
        for name, stages in self.groups:
            if name == endpoint:
                return stages
        return ()


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _require(mapping: Mapping[str, Any], key: str, path: str) -> Any:
    if key not in mapping or mapping[key] is None:
        raise MissingField(f"{path}.{key}")
    return mapping[key]


def _as_mapping(value: Any, path: str) -> Mapping[str, Any]:
    if not isinstance(value, Mapping):
        raise SpecSyntax(f"{path} must be a mapping, got {type(value).__name__}")
    return value

def _as_sequence(value: Any, path: str) -> list:
    if value is None:
        return []
    if isinstance(value, (str, bytes)) or not isinstance(value, Iterable):
        raise SpecSyntax(f"{path} must be a sequence")
    return list(value)


def _as_identifier(value: Any, path: str) -> str:
    if not isinstance(value, str) or not value or any(c.isspace() for c in value):
        raise SpecSyntax(f"{path} must be a non-empty identifier, got {value!r}")
    return value


def _as_int(value: Any, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SpecSyntax(f"{path} must be an integer, got {value!r}")
    return value


def _parse_endpoint(doc: Mapping[str, Any], path: str) -> EndpointSpec:
    name = _as_identifier(_require(doc, "name", path), f"{path}.name")
    address = _require(doc, "address", path)
    if not isinstance(address, str):
        raise SpecSyntax(f"{path}.address must be a string")
    cores = _as_int(_require(doc, "cores", path), f"{path}.cores")
    roles_raw = _as_sequence(doc.get("roles"), f"{path}.roles") or sorted(DEFAULT_ROLES)
    roles = []
    for r in roles_raw:
        if r not in ENDPOINT_ROLES:
            raise SpecSyntax(f"{path}.roles: unknown role {r!r}")
        roles.append(r)
    return EndpointSpec(name=name, address=address, cores=cores, roles=frozenset(roles))


def _parse_stage(doc: Mapping[str, Any], path: str) -> StageSpec:
    name = _as_identifier(_require(doc, "name", path), f"{path}.name")
    kind = _require(doc, "kind", path)
    if kind not in STAGE_KINDS:
        raise SpecSyntax(f"{path}.kind must be one of {STAGE_KINDS}, got {kind!r}")
    entry = _require(doc, "entry", path)
    if not isinstance(entry, str) or not entry:
        raise SpecSyntax(f"{path}.entry must be a non-empty string")
    endpoint = _as_identifier(_require(doc, "endpoint", path), f"{path}.endpoint")
    workers_initial = doc.get("workers_initial", 1)
    workers_initial = _as_int(workers_initial, f"{path}.workers_initial")
    workers_max: int | str = doc.get("workers_max", "auto")
    if workers_max != "auto":
        workers_max = _as_int(workers_max, f"{path}.workers_max")
    return StageSpec(
        name=name,
        kind=kind,
        entry=entry,
        endpoint=endpoint,
        workers_initial=workers_initial,
        workers_max=workers_max,
    )


def parse_spec(document: str) -> SystemSpec:
    """Parse a YAML system document into a :class:`SystemSpec`.

    Raises :class:`SpecSyntax` for malformed documents and
    :class:`MissingField` when a required key is absent.  Referential and
    structural rules are checked by :func:`validate`, not here.
    """
    try:
        raw = yaml.safe_load(document)
    except yaml.YAMLError as exc:
        raise SpecSyntax(f"document is not valid YAML: {exc}") from exc
    top = _as_mapping(raw, "document")
    system = _as_mapping(_require(top, "system", "document"), "system")
    name = _as_identifier(_require(system, "name", "system"), "system.name")

    endpoints = tuple(
        _parse_endpoint(_as_mapping(e, f"endpoints[{i}]"), f"endpoints[{i}]")
        for i, e in enumerate(_as_sequence(_require(top, "endpoints", "document"), "endpoints"))
    )
    stages = tuple(
        _parse_stage(_as_mapping(s, f"stages[{i}]"), f"stages[{i}]")
        for i, s in enumerate(_as_sequence(_require(top, "stages", "document"), "stages"))
    )

    endpoint_of = {s.name: s.endpoint for s in stages}
    endpoint_names = {e.name for e in endpoints}
    links = []
    for i, raw_link in enumerate(_as_sequence(top.get("links"), "links")):
        path = f"links[{i}]"
        doc = _as_mapping(raw_link, path)
        from_stage = _as_identifier(_require(doc, "from_stage", path), f"{path}.from_stage")
        to_stage = _as_identifier(_require(doc, "to_stage", path), f"{path}.to_stage")
        channel = doc.get("channel")
        if channel is None:
            channel = _default_channel(from_stage, to_stage, endpoint_of, endpoint_names)
        elif channel not in CHANNELS:
            raise SpecSyntax(f"{path}.channel must be one of {CHANNELS}, got {channel!r}")
        links.append(Interconnection(from_stage=from_stage, to_stage=to_stage, channel=channel))

    return SystemSpec(name=name, stages=stages, endpoints=endpoints, links=tuple(links))


def _default_channel(
    from_stage: str,
    to_stage: str,
    endpoint_of: Mapping[str, str],
    endpoint_names: set,
) -> str:
    a = endpoint_of.get(from_stage)
    b = endpoint_of.get(to_stage)
    if a is not None and b is not None and a == b and a in endpoint_names:
        return "file"
    return "network"


def serialize_spec(spec: SystemSpec) -> str:
    """Render a :class:`SystemSpec` back into the documented YAML format."""
    doc: dict[str, Any] = {
        "system": {"name": spec.name},
        "endpoints": [
            {
                "name": e.name,
                "address": e.address,
                "cores": e.cores,
                "roles": sorted(e.roles),
            }
            for e in spec.endpoints
        ],
        "stages": [
            {
                "name": s.name,
                "kind": s.kind,
                "entry": s.entry,
                "endpoint": s.endpoint,
                "workers_initial": s.workers_initial,
                "workers_max": s.workers_max,
            }
            for s in spec.stages
        ],
        "links": [
            {"from_stage": l.from_stage, "to_stage": l.to_stage, "channel": l.channel}
            for l in spec.links
        ],
    }
    return yaml.safe_dump(doc, sort_keys=False)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def _well_formed_address(address: str) -> bool:
    host, sep, port = address.rpartition(":")
    if not sep or not host:
        return False
    return port.isdigit() and 0 < int(port) < 65536


def validate(spec: SystemSpec) -> list[Violation]:
    """Return every violated invariant; an empty list means the spec is valid."""
    out: list[Violation] = []

    seen: set[str] = set()
    for s in spec.stages:
        if s.name in seen:
            out.append(Violation("DuplicateStageName", f"stages.{s.name}", "stage name declared twice"))
        seen.add(s.name)
    seen = set()
    for e in spec.endpoints:
        if e.name in seen:
            out.append(Violation("DuplicateEndpointName", f"endpoints.{e.name}", "endpoint name declared twice"))
        seen.add(e.name)

    endpoint_names = {e.name for e in spec.endpoints}
    stage_names = {s.name for s in spec.stages}

    for e in spec.endpoints:
        if e.cores < 1:
            out.append(Violation("BadCores", f"endpoints.{e.name}", f"cores must be >= 1, got {e.cores}"))
        if not _well_formed_address(e.address):
            out.append(Violation("BadAddress", f"endpoints.{e.name}", f"address {e.address!r} is not host:port"))

    for s in spec.stages:
        if s.endpoint not in endpoint_names:
            out.append(Violation("UnknownEndpoint", f"stages.{s.name}", f"endpoint {s.endpoint!r} is not declared"))
            continue
        endpoint = spec.endpoint(s.endpoint)
        resolved_max = s.resolved_workers_max(endpoint)
        if s.workers_initial < 1 or s.workers_initial > resolved_max or resolved_max < 1:
            out.append(
                Violation(
                    "BadWorkerBounds",
                    f"stages.{s.name}",
                    f"need 1 <= workers_initial <= workers_max, got {s.workers_initial}..{resolved_max}",
                )
            )

    endpoint_of = {s.name: s.endpoint for s in spec.stages}
    for i, l in enumerate(spec.links):
        loc = f"links[{i}]"
        missing = False
        for ref in (l.from_stage, l.to_stage):
            if ref not in stage_names:
                out.append(Violation("UnknownStage", loc, f"stage {ref!r} is not declared"))
                missing = True
        if missing:
            continue
        a, b = endpoint_of[l.from_stage], endpoint_of[l.to_stage]
        if a != b and l.channel != "network":
            out.append(
                Violation(
                    "ChannelEndpointMismatch",
                    loc,
                    f"{l.channel} channel requires both stages on one endpoint ({a} != {b})",
                )
            )

    if not _has_cycle_violations(spec, out):
        pass
    return out


def _has_cycle_violations(spec: SystemSpec, out: list[Violation]) -> bool:
    stage_names = [s.name for s in spec.stages]
    known = set(stage_names)
    indegree = {n: 0 for n in stage_names}
    adjacency: dict[str, list[str]] = {n: [] for n in stage_names}
    for l in spec.links:
        if l.from_stage in known and l.to_stage in known:
            adjacency[l.from_stage].append(l.to_stage)
            indegree[l.to_stage] += 1
    ready = [n for n in stage_names if indegree[n] == 0]
    visited = 0
    while ready:
        node = ready.pop(0)
        visited += 1
        for nxt in adjacency[node]:
            indegree[nxt] -= 1
            if indegree[nxt] == 0:
                ready.append(nxt)
    if visited != len(stage_names):
        stuck = sorted(n for n, d in indegree.items() if d > 0)
        out.append(Violation("CyclicGraph", "links", f"stage graph has a cycle through {stuck}"))
        return True
    return False


# ---------------------------------------------------------------------------
# Planning
# ---------------------------------------------------------------------------


def plan(spec: SystemSpec) -> DeploymentPlan:
    """Compute the deterministic deployment plan for a valid spec.

    Stages are ordered topologically with ties broken by declaration
    order, then grouped by endpoint.  Raises :class:`InvalidSpec` when
    :func:`validate` reports violations.
    """
    violations = validate(spec)
    if violations:
        raise InvalidSpec(violations)

    decl_index = {s.name: i for i, s in enumerate(spec.stages)}
    indegree = {s.name: 0 for s in spec.stages}
    adjacency: dict[str, list[str]] = {s.name: [] for s in spec.stages}
    for l in spec.links:
        adjacency[l.from_stage].append(l.to_stage)
        indegree[l.to_stage] += 1

    order: list[str] = []
    ready = sorted((n for n, d in indegree.items() if d == 0), key=decl_index.__getitem__)
    while ready:
        node = ready.pop(0)
        order.append(node)
        for nxt in adjacency[node]:
            indegree[nxt] -= 1
            if indegree[nxt] == 0:
                ready.append(nxt)
        ready.sort(key=decl_index.__getitem__)

    by_endpoint: dict[str, list[StageSpec]] = {}
    for name in order:
        stage = spec.stage(name)
        by_endpoint.setdefault(stage.endpoint, []).append(stage)
    groups = tuple(
        (e.name, tuple(by_endpoint[e.name]))
        for e in spec.endpoints
        if e.name in by_endpoint
    )

    endpoint_of = {s.name: s.endpoint for s in spec.stages}
    bindings = tuple(
        ChannelBinding(link=l, from_endpoint=endpoint_of[l.from_stage], to_endpoint=endpoint_of[l.to_stage])
        for l in spec.links
    )
    return DeploymentPlan(system=spec.name, order=tuple(order), groups=groups, bindings=bindings, spec=spec)
