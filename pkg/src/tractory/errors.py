"""Exception types shared across the package."""


class TractoryError(Exception):
    """Base class for all package errors."""


class FormatError(TractoryError):
    """A file does not conform to its declared on-disk format."""


class UnsupportedDatatypeError(FormatError):
    """A file uses a datatype outside the supported set."""


class EstimationError(TractoryError):
    """A numerical estimation problem is ill-posed (e.g. rank deficient)."""


class CheckpointError(TractoryError):
    """A model checkpoint is corrupt or inconsistent with its manifest."""


class ConfigError(TractoryError):
    """A configuration document failed validation."""
