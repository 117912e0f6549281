"""Exception types shared across the package."""


class FluidSplatError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(FluidSplatError, ValueError):
    """A numeric parameter violates its documented precondition."""


class ParseError(FluidSplatError, ValueError):
    """A serialized artifact (PLY, JSON, field dump) is malformed."""


class ContractViolation(FluidSplatError, ValueError):
    """Caller passed inputs that break an operation's contract (shape mismatch etc.)."""


class SolverFailure(FluidSplatError, RuntimeError):
    """An iterative solver failed to converge.

    Carries the final relative residual and iteration count for diagnostics.
    """

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class DegenerateScenarioError(FluidSplatError, ValueError):
    """Scenario setup makes the requested objective ill-defined (e.g. zero dye mass)."""


class UsageError(FluidSplatError, ValueError):
    """Bad command-line arguments or config (maps to exit code 1)."""
