"""Exception hierarchy shared across the package."""


class SdnError(Exception):
    """Base class for all sdnface errors."""


class ShapeMismatchError(SdnError, ValueError):
    """Tensor shapes are inconsistent; the message names the offending dims."""


class SpecValidationError(SdnError, ValueError):
    """A configuration object violates one of its invariants."""


class PtsParseError(SdnError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ManifestError(SdnError, ValueError):
    """Malformed or inconsistent dataset manifest."""


class ImageLoadError(SdnError):
    """Image file missing or undecodable."""


class DegenerateGeometryError(SdnError, ValueError):
    """Geometry that cannot be normalized (e.g. coincident eye points)."""


class WeightFormatError(SdnError):
    """Weight file does not start with the expected magic bytes."""


class WeightVersionError(WeightFormatError):
    pass


class WeightTruncationError(WeightFormatError):
    pass


class WeightChecksumError(WeightFormatError):
    pass


class WeightSpecMismatchError(WeightFormatError):
    """Stored network description disagrees with what the caller expects."""


class NumericalDivergenceError(SdnError, RuntimeError):
    """Training hit a NaN/Inf loss; carries the diagnostic context."""

    def __init__(self, iteration, lr, batch_ids):
        super().__init__(
            f"non-finite loss at iteration {iteration} (lr={lr!r}, "
            f"batch sample ids: {', '.join(map(str, batch_ids))})"
        )
        self.iteration = iteration
        self.lr = lr
        self.batch_ids = list(batch_ids)
