"""Exception taxonomy shared across the package.

The split mirrors how callers are expected to react: configuration and
validation problems are user-fixable and reported before work starts,
usage errors are programming mistakes, numeric errors abort a run with
diagnostics, and domain/pruned signals are per-query conditions the
caller handles locally.
"""


class SdfViewError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SdfViewError):
    """Invalid configuration: bad key, bad value, incompatible dimensions."""


class ValidationError(SdfViewError):
    """Dataset or input file failed validation. Message names file and field."""


class UsageError(SdfViewError):
    """API misuse, e.g. backward before forward."""


class NumericError(SdfViewError):
    """Non-finite value where a finite one is required."""


class DomainError(SdfViewError):
    """Query outside the spatial domain of a grid or image."""


class PrunedRegionError(SdfViewError):
    """Query landed in a pruned octree region; caller should skip the sample."""
