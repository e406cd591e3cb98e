"""Stage entry registry.

``function`` stages resolve their ``entry`` string here: either a name
registered with :func:`register` or a ``module:callable`` import path.
Stage callables take ``(input_path, output_dir, ctx)`` and communicate
results purely through files written under ``output_dir``.
"""

from __future__ import annotations

import importlib
import shlex
import shutil
from dataclasses import dataclass, field
from typing import Callable, Mapping

from .errors import GeoNimbusError


class EntryNotFound(GeoNimbusError):
    """Stage entry cannot be resolved to runnable code."""


@dataclass(frozen=True)
class StageContext:
    """Execution context handed to every stage invocation."""

    stage: str
    system: str
    work_dir: str
    params: Mapping[str, str] = field(default_factory=dict)

    def param(self, key: str, default: str | None = None) -> str | None:
        return self.params.get(key, default)


StageFn = Callable[[str, str, StageContext], object]

_REGISTRY: dict[str, StageFn] = {}


def register(name: str) -> Callable[[StageFn], StageFn]:
    def wrap(fn: StageFn) -> StageFn:
        _REGISTRY[name] = fn
        return fn

    return wrap


def registered() -> dict[str, StageFn]:
    return dict(_REGISTRY)


def resolve_function(entry: str) -> StageFn:
    """Look up a registered name, falling back to ``module:callable``."""
    # the shipped stage set registers on import
    from .eos import stages as _  # noqa: F401

    fn = _REGISTRY.get(entry)
    if fn is not None:
        return fn
    module_name, sep, attr = entry.partition(":")
    if sep:
        try:
            module = importlib.import_module(module_name)
            fn = getattr(module, attr)
        except (ImportError, AttributeError) as exc:
            raise EntryNotFound(f"cannot import {entry!r}: {exc}") from exc
        if not callable(fn):
            raise EntryNotFound(f"{entry!r} is not callable")
        return fn
    raise EntryNotFound(f"no registered stage function {entry!r}")


def resolve_command(entry: str) -> list[str]:
    """Split a subprocess entry and check the executable exists."""
    argv = shlex.split(entry)
    if not argv:
        raise EntryNotFound("empty command line")
    if shutil.which(argv[0]) is None:
        raise EntryNotFound(f"command {argv[0]!r} not found on PATH")
    return argv
