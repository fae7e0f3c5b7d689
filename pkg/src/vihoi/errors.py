"""Exception types raised across the pipeline."""


class VihoiError(Exception):
    pass


class DegenerateRotation(VihoiError, ValueError):
    pass


class NotARotation(VihoiError, ValueError):
    pass


class EmptyMesh(VihoiError, ValueError):
    pass


class NotWatertight(VihoiError, ValueError):
    pass


class BadDims(VihoiError, ValueError):
    pass


class SamplingFailed(VihoiError, RuntimeError):
    pass


class InfeasibleTask(VihoiError, ValueError):
    pass


class EmptySplit(VihoiError, ValueError):
    pass


class TokenizationMismatch(VihoiError, ValueError):
    pass


class BadImageShape(VihoiError, ValueError):
    pass


class LayerMissing(VihoiError, KeyError):
    pass


class DepthTooSmall(VihoiError, ValueError):
    pass


class WidthMismatch(VihoiError, ValueError):
    pass


class ShapeMismatch(VihoiError, ValueError):
    pass


class BadT(VihoiError, ValueError):
    pass


class MissingReferenceImages(VihoiError, FileNotFoundError):
    pass


class FrozenViolation(VihoiError, RuntimeError):
    pass


class BadCamera(VihoiError, ValueError):
    pass


class BackendUnavailable(VihoiError, ConnectionError):
    pass


class BadResponseCount(VihoiError, ValueError):
    pass


class CorpusTooSmall(VihoiError, ValueError):
    pass


class LengthMismatch(VihoiError, ValueError):
    pass


class DegenerateCovariance(VihoiError, ArithmeticError):
    pass


class TooFewPairs(VihoiError, ValueError):
    pass


class ConfigError(VihoiError, ValueError):
    pass
