"""Exception hierarchy shared across the package.

The CLI maps each family onto its own exit code, so new errors should
subclass one of ``ConfigError``, ``DataError`` or ``NumericError``.
"""


class WmhSegError(Exception):
    pass


class ConfigError(WmhSegError):
    pass


class DataError(WmhSegError):
    pass


class NumericError(WmhSegError):
    pass


class FormatError(DataError):
    """Unsupported or malformed image/manifest file."""


class IntegrityError(DataError):
    """File is truncated or internally inconsistent."""


class ArchitectureError(DataError):
    """Stored weights do not match the expected network layout."""


class InvalidMaskError(DataError):
    pass


class GeometryError(DataError):
    """Shapes or dimensions that do not line up."""


class NoBrainFoundError(DataError):
    pass


class NormalizationError(NumericError):
    pass


class UndefinedMetricError(WmhSegError):
    """Metric has no value for this input (e.g. distance to an empty set)."""
