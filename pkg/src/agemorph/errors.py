"""Exception types shared across the package."""


class AgemorphError(Exception):
    """Base class for all package errors."""


class ConfigError(AgemorphError):
    """Invalid or unknown configuration key/value."""


class ShapeError(AgemorphError):
    """Tensor shape does not match the declared contract."""


class AgeOutOfRangeError(AgemorphError):
    """Age falls outside every range of the group scheme."""


class InvariantError(AgemorphError):
    """A declared data invariant was violated (e.g. mask outside [0,1])."""


class NumericError(AgemorphError):
    """Non-finite value encountered during a forward pass or loss."""


class CheckpointError(AgemorphError):
    """Checkpoint cannot be loaded (corrupt archive or version mismatch)."""
