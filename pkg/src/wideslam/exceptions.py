"""Exception hierarchy.

Numerical failures derive from :class:`NumericalError`; bad input files and
configuration derive from :class:`InputError`. The CLI maps the first to exit
code 1 and the second to exit code 2.
"""


class WideSlamError(Exception):
    pass


class NumericalError(WideSlamError):
    pass


class InputError(WideSlamError):
    pass


class OutOfFov(NumericalError, ValueError):
    pass


class Degenerate(NumericalError, ValueError):
    pass


class NoConvergence(NumericalError):
    pass


class NearCut(NumericalError, ValueError):
    pass


class Singular(NumericalError):
    pass


class TooFewMatches(NumericalError):
    pass


class Diverged(NumericalError):
    pass


class GaugeUnderconstrained(NumericalError):
    pass


class DegenerateConfig(NumericalError):
    pass


class DegenerateEpipolarPlane(NumericalError):
    pass


class NoModel(NumericalError):
    pass


class AmbiguousCheirality(NumericalError):
    pass


class ParallelRays(NumericalError):
    pass


class InitFailed(NumericalError):
    pass


class TrackingLost(NumericalError):
    pass


class EmptyVisibility(NumericalError):
    pass


class DegenerateGeometry(NumericalError):
    pass


class NoAssociations(NumericalError):
    pass


class TooShort(NumericalError):
    pass


class ConfigError(InputError, ValueError):
    pass


class ParseError(InputError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
