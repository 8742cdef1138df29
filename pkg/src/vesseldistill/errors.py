"""Exception types shared across the package."""


class VesselDistillError(Exception):
    """Base class for all package errors."""


class DimensionError(VesselDistillError, ValueError):
    """Array shapes or channel widths are incompatible."""


class ConfigurationError(VesselDistillError, ValueError):
    """A hyperparameter or configuration value is invalid."""


class ContractError(VesselDistillError, RuntimeError):
    """A call violated an operation's preconditions."""


class FormatError(VesselDistillError, ValueError):
    """A file on disk is malformed, truncated or fails validation."""


class StitchingError(VesselDistillError, ValueError):
    """Tiles handed to ``stitch`` do not come from one tiling plan."""


class GenerationError(VesselDistillError, ValueError):
    """Phantom generation parameters cannot produce a valid tree."""


class CheckpointError(VesselDistillError, ValueError):
    """A checkpoint failed its checksum, version or architecture check."""


class TrainingAborted(VesselDistillError, RuntimeError):
    """Training hit a non-finite loss and stopped."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
