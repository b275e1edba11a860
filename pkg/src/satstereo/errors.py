"""Exception hierarchy shared across the toolkit."""


class SatStereoError(Exception):
    """Base class for every error raised by satstereo."""


class CoordinateError(SatStereoError, ValueError):
    """Coordinates or zone outside the valid domain."""


class SingularProjectionError(SatStereoError, ArithmeticError):
    """An RPC denominator vanished at the query point."""


class AffineFitError(SatStereoError):
    """Affine approximation residual exceeded the caller's tolerance."""

    def __init__(self, residual, tolerance):
        super().__init__(
            f"affine fit residual {residual:.6g} px exceeds tolerance {tolerance:.6g} px")
        self.residual = residual
        self.tolerance = tolerance


class DegenerateGeometryError(SatStereoError):
    """Point configuration cannot determine the requested transform."""


class EstimationError(SatStereoError):
    """A transform was estimated but fails its residual check."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class EmptyResultError(SatStereoError):
    """An operation produced no usable samples."""


class HullDegenerateError(SatStereoError):
    """Fewer than three non-collinear samples for triangulated interpolation."""


class DivergedError(SatStereoError):
    """Training produced a non-finite loss."""

    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


class ShapeError(SatStereoError, ValueError):
    """Tensor or raster extents violate an operation's contract."""


class ConfigError(SatStereoError):
    """Invalid pipeline or network configuration."""


class StageError(SatStereoError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
