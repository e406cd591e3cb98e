"""Shared exception base for the geonimbus package.

Module-specific errors live next to the code that raises them and all
derive from :class:`GeoNimbusError` so callers can catch broadly.
"""


class GeoNimbusError(Exception):
    """Base class for every error raised by this package."""
