"""Exception types raised across the package."""


class ReconError(Exception):
    """Base class for all package errors."""


class NegativeInput(ReconError, ValueError):
    pass


class DegenerateDistribution(ReconError, ValueError):
    pass


class FormatError(ReconError, ValueError):
    """Malformed AODF/AODP file."""


class ShapeError(ReconError, ValueError):
    pass


class RangeError(ReconError, ValueError):
    pass


class NonPositiveSigma(ReconError, ValueError):
    pass


class MaskViolation(ReconError, ValueError):
    """Training mask is not contained in the observation mask."""


class DivergedLoss(ReconError, RuntimeError):
    pass


class NonFiniteState(ReconError, RuntimeError):
    """Sampler state became non-finite or blew past the magnitude guard."""


class ScheduleError(ReconError, ValueError):
    pass


class EmptySpectrum(ReconError, ValueError):
    pass


class AllConstant(ReconError, ValueError):
    pass


class NonLinearOperator(ReconError, TypeError):
    pass


class ConfigError(ReconError, ValueError):
    pass
