"""Typed exceptions shared across the package.

Exit-code mapping used by the CLI: parameter/format problems map to 2,
numerical failures map to 3.
"""


class NCEError(Exception):
    """Base class for all package errors."""


class ParameterError(NCEError, ValueError):
    """Invalid argument or inconsistent configuration."""


class FormatError(NCEError, ValueError):
    """Malformed container file (bad magic, truncation, length mismatch)."""


class CavityError(NCEError, ValueError):
    """Kernel evaluated at r = 0; the origin cavity is the caller's job."""


class SingularContrastError(NCEError, ZeroDivisionError):
    """Contrast parameter undefined: prop1 + (d-1)*prop0 = 0."""


class DegenerateContrastError(NCEError, ValueError):
    """Operation undefined at zero contrast (effective tensor equals prop0*I)."""


class NumericalError(NCEError, ArithmeticError):
    """Non-finite or otherwise unusable numerical result."""


class NearPercolationError(NumericalError):
    """Series inversion (R - beta^2 phi^2 I) is singular or near-singular."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class SolverError(NumericalError):
    """Iterative PDE solve failed to reach the requested residual."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class ResonanceError(NumericalError):
    """Frequency-domain system is singular (driving frequency at a resonance)."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class TrainingError(NumericalError):
    """Optimization diverged or produced a non-finite loss."""
