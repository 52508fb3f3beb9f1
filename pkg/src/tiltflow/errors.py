"""Exception hierarchy.  Each class corresponds to one documented failure."""


class TiltflowError(Exception):
    """Base class for all package errors."""


# measure construction
class MeasureError(TiltflowError, ValueError):
    pass


class MalformedSpec(MeasureError):
    pass


class NotCentered(MeasureError):
    pass


class MassNotOne(MeasureError):
    pass


class InfiniteVariance(MeasureError):
    pass


# tilt functionals
class TiltError(TiltflowError, ArithmeticError):
    pass


class TiltNotIntegrable(TiltError):
    pass


class QuadratureFailure(TiltError):
    pass


class TargetOutsideHull(TiltError):
    pass


class NoConvergence(TiltError):
    pass


class DegenerateTilt(TiltError):
    pass


# simulation
class NumericalBreakdown(TiltflowError):
    pass


class AllPathsFailed(TiltflowError):
    pass


# verification
class VerificationError(TiltflowError):
    pass


class InsufficientPaths(VerificationError):
    pass


class MissingCheckpoints(VerificationError):
    pass


class HypothesisNotAsserted(VerificationError):
    pass


class DegenerateTail(VerificationError):
    pass


class PilotStoppedEarly(VerificationError):
    pass
