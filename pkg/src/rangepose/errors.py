"""Exception types shared across the package."""


class RangePoseError(Exception):
    """Base class for errors raised by this package."""


class DomainError(RangePoseError, ValueError):
    """An argument is outside its documented domain (no silent fixing)."""


class DegeneracyError(RangePoseError, ValueError):
    """Geometry too degenerate for the requested operation."""


class ObservabilityError(RangePoseError, ValueError):
    """Not enough usable measurements to pose the estimation problem."""


class DecodeError(RangePoseError, ValueError):
    """A wire message or file could not be decoded."""


class SchemaError(RangePoseError, ValueError):
    """A document parsed but does not match the expected schema."""


class ResourceError(RangePoseError, ValueError):
    """A request would exceed a hard resource bound."""
