"""Exception types raised across the package."""


class DmracError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(DmracError, ValueError):
    pass


class NotHurwitz(DmracError, ValueError):
    pass


class NotSymmetric(DmracError, ValueError):
    pass


class NotPositiveDefinite(DmracError, ValueError):
    pass


class NonFiniteDerivative(DmracError, ArithmeticError):
    pass


class NegativeVariance(DmracError, ValueError):
    pass


class EmptyBatch(DmracError, ValueError):
    pass


class ZeroFeature(DmracError, ValueError):
    pass


class EmptyBuffer(DmracError, ValueError):
    pass


class InsufficientData(DmracError, ValueError):
    pass


class EmptyTrace(DmracError, ValueError):
    pass


class InvalidConfidence(DmracError, ValueError):
    pass


class InvalidTolerance(DmracError, ValueError):
    pass


class UnstructuredScenario(DmracError, ValueError):
    pass


class DomainExit(DmracError, RuntimeError):
    """The state left the inflated operating box; the run is diverging."""

    def __init__(self, step, t, x):
        self.step = step
        self.t = t
        self.x = x
        super().__init__(f"state left the operating domain at step {step} (t={t:.3f}s): x={list(x)}")


class ParseError(DmracError, ValueError):
    def __init__(self, line, message):
        self.line = line
        super().__init__(f"line {line}: {message}")


class ValidationError(DmracError, ValueError):
    pass
