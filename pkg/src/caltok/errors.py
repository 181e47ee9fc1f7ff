"""Exception types shared across the package."""


class CaltokError(Exception):
    """Base class for all caltok errors."""


class OutOfRangeError(CaltokError):
    """A radius (or other quantity) lies outside the invertible domain."""


class NonMonotoneError(CaltokError):
    """The radial polynomial is not strictly increasing on [0, theta_max]."""


class SamplingExhaustedError(CaltokError):
    """Rejection sampling failed to produce a valid calibration."""


class DimensionMismatchError(CaltokError):
    """Image / warp-field / depth-map dimensions do not agree."""


class ShapeMismatchError(CaltokError):
    """Tensor shapes are inconsistent with the model configuration."""


class InvalidConfigError(CaltokError):
    """A model or training configuration violates its invariants."""


class EmptyMaskError(CaltokError):
    """A reduction was requested over an empty set of valid pixels."""


class NonPositiveDepthError(CaltokError):
    """A ratio metric was evaluated on non-positive depth values."""
