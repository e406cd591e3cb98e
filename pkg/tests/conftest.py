"""Shared builders for the test suite.

Most tests construct small systems programmatically instead of going
through YAML; the builders here keep those declarations one line long.
"""

from __future__ import annotations

import socket

import pytest

from geonimbus.model import EndpointSpec, Interconnection, StageSpec, SystemSpec


def endpoint(name: str, *, cores: int = 2, port: int = 7001, roles=None) -> EndpointSpec:
    kwargs = {}
    if roles is not None:
        kwargs["roles"] = frozenset(roles)
    return EndpointSpec(name=name, address=f"127.0.0.1:{port}", cores=cores, **kwargs)


def stage(name: str, *, endpoint: str = "ep", entry: str | None = None,
          kind: str = "function", workers_initial: int = 1, workers_max="auto") -> StageSpec:
    return StageSpec(
        name=name,
        kind=kind,
        entry=entry or f"tests.{name}",
        endpoint=endpoint,
        workers_initial=workers_initial,
        workers_max=workers_max,
    )


def link(a: str, b: str, channel: str = "file") -> Interconnection:
    return Interconnection(from_stage=a, to_stage=b, channel=channel)


def system(name: str, stages, endpoints, links=()) -> SystemSpec:
    return SystemSpec(name=name, stages=tuple(stages), endpoints=tuple(endpoints), links=tuple(links))


def chain_spec(*names: str, endpoint_name: str = "ep", cores: int = 4) -> SystemSpec:
    """A linear pipeline of echo stages on one endpoint."""
    stages = [stage(n, endpoint=endpoint_name, entry="tests.echo") for n in names]
    links = [link(a, b) for a, b in zip(names, names[1:])]
    return system("chain", stages, [endpoint(endpoint_name, cores=cores)], links)


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture
def work_root(tmp_path):
    root = tmp_path / "work"
    root.mkdir()
    return root
