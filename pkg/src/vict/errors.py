"""Exception hierarchy shared across the pipeline.

The CLI maps these onto exit codes: format errors -> 2, geometry and
registration errors -> 3, anything else -> 4.
"""


class VictError(Exception):
    """Base class for all pipeline errors."""


class FormatError(VictError):
    """A file violates the documented subset of its format."""


class GeometryError(VictError):
    """Grid geometry is invalid or two grids that must match do not."""


class RegistrationError(VictError):
    """Landmark configuration cannot support a rigid fit."""
