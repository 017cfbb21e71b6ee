"""Exception hierarchy for Mask Volume Synth.

Each family maps onto one CLI exit code (see ``cli.EXIT_CODES``).
"""

from pathlib import Path
from typing import Optional, Union


class VolumeSynthError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(VolumeSynthError):
    """Invalid or unreadable run configuration."""


class MissingArtifactError(VolumeSynthError):
    """A required dataset, checkpoint or volume file is not available."""

    def __init__(self, message: str, stage: Optional[str] = None):
        super().__init__(message)
        self.stage = stage


class NumericFailureError(VolumeSynthError):
    """Training or sampling produced non-finite values."""


class ShapeContractError(VolumeSynthError, ValueError):
    """Array shapes or channel counts violate an operation contract."""


class PlanError(VolumeSynthError, ValueError):
    """A window plan cannot be built for the requested geometry."""


class ContainerFormatError(VolumeSynthError):
    """Base class for binary container (volume, mask, checkpoint) failures."""

    def __init__(self, message: str, path: Optional[Union[str, Path]] = None):
        if path is not None:
            message = f"{message}: {path}"
        super().__init__(message)
        self.path = path


class MagicMismatchError(ContainerFormatError):
    """File does not start with the expected magic bytes."""


class TruncatedPayloadError(ContainerFormatError):
    """File ends before the header-declared payload."""


class DimensionOverflowError(ContainerFormatError):
    """Header dimensions are zero or exceed the supported range."""


class VersionMismatchError(ContainerFormatError):
    """Container version is not supported by this build."""
