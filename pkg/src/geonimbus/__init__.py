"""GeoNimbus: staged dataflows for earth-observation processing.

A system is declared as a graph of stages pinned to endpoints and linked by
channels. The pieces:

- :mod:`geonimbus.model` parses and validates system specs and produces
  deployment plans.
- :mod:`geonimbus.wire` / :mod:`geonimbus.transport` define the framed
  message protocol and the full-duplex TCP layer beneath it.
- :mod:`geonimbus.storage` holds the content-addressed stores, the catalog,
  and relay transfers between stores.
- :mod:`geonimbus.daemon` executes stages on one endpoint with a worker
  pool per stage.
- :mod:`geonimbus.autoscaler` turns throughput windows into worker counts.
- :mod:`geonimbus.controller` deploys plans, feeds inputs, and collects
  results.
- :mod:`geonimbus.runner` runs a whole system inside one process.
- :mod:`geonimbus.eos` is the LandSat -> NDWI -> trend case study built on
  top of all of the above.
"""

from .errors import GeoNimbusError
from .model import (
    DeploymentPlan,
    EndpointSpec,
    Interconnection,
    InvalidSpec,
    StageSpec,
    SystemSpec,
    parse_spec,
    plan,
    serialize_spec,
    validate,
)

__version__ = "0.1.0"

__all__ = [
    "DeploymentPlan",
    "EndpointSpec",
    "GeoNimbusError",
    "Interconnection",
    "InvalidSpec",
    "StageSpec",
    "SystemSpec",
    "__version__",
    "parse_spec",
    "plan",
    "serialize_spec",
    "validate",
]
