"""Exception hierarchy.

Every failure raised by the services is a ``ValueError`` subclass carrying the
exit code the command line reports for it (1 = usage/input, 2 = data/processing).
"""


class SpecregError(ValueError):
    exit_code = 2


class UsageError(SpecregError):
    """Bad flags, missing arguments or unreadable inputs."""
    exit_code = 1


class ConfigError(UsageError):
    """Unknown key or unparsable value in a configuration file."""


class RegionFileError(UsageError):
    """Malformed line in a regions file."""


class ImageFormatError(UsageError):
    """Unreadable file, malformed header, unsupported bit depth or colour."""


class FoldingGuardError(UsageError):
    """Synthetic deformation amplitude violates the folding guard."""


class DimensionMismatchError(SpecregError):
    pass


class DegenerateImageError(SpecregError):
    """Constant image, zero variance or no valid threshold split."""


class EmptyRegionError(SpecregError):
    """The evaluation region (region ∩ valid) holds no pixels."""


class DomainError(SpecregError):
    """Query outside the supported domain of a transform."""


class OptimizationError(SpecregError):
    """Non-finite objective where a finite one is required."""
