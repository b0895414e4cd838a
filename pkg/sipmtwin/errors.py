"""
Exception types raised by sipmtwin.

Every class also derives from the builtin a caller would naturally catch, so
``except ValueError`` keeps working around any of the argument checks.
"""
from typing import Dict, Optional, Sequence


class SipmTwinError(Exception):
    """ Base class for every error raised by this package """


class InvalidArgumentError(SipmTwinError, ValueError):
    """ An argument violates an operation precondition """


class DomainError(SipmTwinError, ValueError):
    """ A model was evaluated outside of its mathematical domain (e.g. ``E + d <= 0``) """


class EmptyInputError(SipmTwinError, ValueError):
    """ An operation received an empty or all-zero input it cannot work on """


class NotFoundError(SipmTwinError, LookupError):
    """ A searched-for feature (peak, threshold, ...) does not exist """


class UnboundedPeakError(SipmTwinError, ValueError):
    """ A peak flank never falls below half maximum inside the histogram """


class OutOfRangeError(SipmTwinError, ValueError):
    """ A value lies outside of the range a model can map """


class NoSolutionError(SipmTwinError, ArithmeticError):
    """ An equation has no real solution """


class UndefinedRatioError(SipmTwinError, ZeroDivisionError):
    """ A ratio was requested with a zero denominator """


class FitFailedError(SipmTwinError, ArithmeticError):
    """ A least-squares fit could not make progress

    * **diagnostics** - Dictionary with the state of the fit when it gave up
    """

    def __init__(self, message: str, diagnostics: Optional[Dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class IllConditionedError(SipmTwinError, ArithmeticError):
    """ The open/short/load system is singular at some frequencies

    * **indices** - Indices of the offending frequency points
    * **frequencies** - The offending frequencies in Hz
    """

    def __init__(
        self, message: str, indices: Sequence[int], frequencies: Sequence[float]
    ):
        super().__init__(message)
        self.indices = list(indices)
        self.frequencies = list(frequencies)


class ExperimentError(SipmTwinError, RuntimeError):
    """ A module error surfaced while running an experiment """

    def __init__(self, experiment: str, cause: Exception):
        super().__init__(f"{experiment} experiment failed: {cause}")
        self.experiment = experiment
        self.cause = cause
