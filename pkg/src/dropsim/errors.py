"""Typed exceptions shared across the package."""
from __future__ import annotations


class DropsimError(Exception):
    """Base class for all package errors."""


class InvalidOrderError(DropsimError, ValueError):
    """Spectral order p outside the supported range."""


class DimensionMismatchError(DropsimError, ValueError):
    """Array shape does not match the grid or coefficient layout."""


class PoleSingularityError(DropsimError, ValueError):
    """Derivative recursion requested at theta = 0 or pi."""


class UnsupportedDerivativeError(DropsimError, ValueError):
    """Derivative order above 2 requested."""


class DegenerateSurfaceError(DropsimError, ValueError):
    """Surface with vanishing area element or inverted orientation."""


class SingularKernelError(DropsimError, ValueError):
    """Kernel evaluated at coincident points."""


class InvalidFlowError(DropsimError, ValueError):
    """Background flow violates the traceless (incompressible) requirement."""


class EosDomainError(DropsimError, ValueError):
    """Surfactant concentration outside the equation-of-state domain."""

    def __init__(self, msg: str, node: tuple[int, int] | None = None):
        super().__init__(msg)
        self.node = node


class NonConvergenceError(DropsimError, RuntimeError):
    """Iterative solver hit its iteration cap.

    Carries the best iterate found so far plus the residual history so
    callers can decide whether to accept it anyway.
    """

    def __init__(self, msg: str, best=None, residuals=None):
        super().__init__(msg)
        self.best = best
        self.residuals = residuals


class StallError(DropsimError, RuntimeError):
    """Adaptive time stepper cannot make progress."""


class ConfigError(DropsimError, ValueError):
    """Malformed configuration file or inconsistent keys."""
