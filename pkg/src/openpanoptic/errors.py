"""Exception hierarchy shared across the package."""


class OpenPanopticError(Exception):
    """Base class for all package errors."""


class IoError(OpenPanopticError):
    """Missing or truncated input file."""


class FormatError(OpenPanopticError):
    """Malformed binary payload or inconsistent record counts."""


class SpecError(OpenPanopticError):
    """Invalid synthetic-scene specification."""


class NumericalError(OpenPanopticError):
    """Non-finite values where finite math is required."""


class DomainError(OpenPanopticError):
    """Argument outside the mathematical domain of an operation."""


class EmptyMaskError(OpenPanopticError):
    """A batch statistic was requested over an empty voxel mask."""


class EmptySceneError(OpenPanopticError):
    """An operation needs at least one non-empty voxel."""


class OutOfBoundsError(OpenPanopticError):
    """Grid coordinate outside the voxel grid (or at a voxel with no output)."""


class MissingPrototypeError(OpenPanopticError):
    """An instance in the partition has no matching prototype."""


class EmptyInstanceError(OpenPanopticError):
    """An instance partition entry contains no voxels."""


class ShapeMismatchError(OpenPanopticError):
    """Array shapes or grid specs disagree."""


class ConfigError(OpenPanopticError):
    """Invalid or unknown configuration key/value."""
