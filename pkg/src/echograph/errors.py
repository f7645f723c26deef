"""Exception hierarchy shared across the package."""


class EchoGraphError(Exception):
    """Base class for all errors raised by this package."""


class InvalidGraphError(EchoGraphError):
    """Graph construction or usage violates the contour-graph contract."""


class InvalidSpiralError(EchoGraphError):
    """Spiral sequence request is inconsistent with the graph."""


class DimensionError(EchoGraphError):
    """Array shapes do not match what an operation requires."""


class ConfigError(EchoGraphError):
    """A configuration value is outside its documented range."""


class DegenerateContourError(EchoGraphError):
    """Contour is self-intersecting, collapsed, or otherwise unusable."""


class DegenerateVolumeError(EchoGraphError):
    """Volume inputs make the ejection fraction undefined (EDV <= 0)."""


class LabelError(EchoGraphError):
    """A ground-truth index is outside the valid range."""


class NonFiniteError(EchoGraphError):
    """NaN or Inf reached a layer boundary."""


class TrainingDivergedError(EchoGraphError):
    """Loss or gradients became non-finite during training."""


class CheckpointError(EchoGraphError):
    """Checkpoint file is malformed, truncated, or incompatible."""


class InputTooShortError(EchoGraphError):
    """Video has fewer frames than the inference window needs."""


class GenerationError(EchoGraphError):
    """Synthetic case parameters are out of range or unreachable."""


class ParseError(EchoGraphError):
    """A data file on disk does not match its documented format."""


class AnnotationParseError(ParseError):
    """Annotation CSV row is malformed; message names the line."""


class VideoFormatError(ParseError):
    """Raw video container is malformed or truncated."""


class NegativeEfWarning(UserWarning):
    """ESV exceeded EDV, producing a negative ejection fraction."""
