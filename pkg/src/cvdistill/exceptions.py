"""Exception types raised by cvdistill.

Bad arguments raise plain :class:`ValueError`; the classes here cover the
remaining failure modes and map onto CLI exit codes.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration (exit code 2)."""


class UnreachableYieldError(ValueError):
    """Requested distillation yield lies outside the feasible range (exit code 3)."""

    def __init__(self, target, feasible):
        self.target = target
        self.feasible = feasible
        lo, hi = feasible
        super().__init__(
            f"yield {target:g} is unreachable; feasible range is ({lo:g}, {hi:g}]"
        )


class NumericalFailure(RuntimeError):
    """A numerical routine did not converge (exit code 4)."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class PhysicalityError(RuntimeError):
    """A covariance matrix violated the uncertainty relation."""
