# Copyright 2025 Raza Ahmad. Licensed under Apache 2.0.

"""
Regenerative MFG Solver Exceptions

Custom exception classes raised by the solver, the reference integrators and the CLI.
"""

from typing import Optional


class MfgError(Exception):
    """Base exception for the regen_mfg package"""
    pass


class ShapeError(MfgError):
    """Exception raised when tensor or parameter shapes do not compose"""
    pass


class ConfigError(MfgError):
    """Exception raised for invalid or incomplete configuration"""

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        super().__init__(message)
        self.field = field
        self.line = line

    def __str__(self) -> str:
        message = super().__str__()
        if self.line is not None:
            return f"line {self.line}: {message}"
        return message


class MeasureError(MfgError):
    """Exception raised when the empirical measure cannot supply a statistic"""
    pass


class ConsistencyError(MfgError):
    """Exception raised when an ensemble update violates its contract"""
    pass


class DivergenceError(MfgError):
    """Exception raised when training produces non-finite values"""

    def __init__(self, message: str, iteration: Optional[int] = None, checkpoint: Optional[str] = None):
        super().__init__(message)
        self.iteration = iteration
        self.checkpoint = checkpoint


class IntegrationError(MfgError):
    """Exception raised when the adaptive ODE integrator fails"""
    pass


class ReferenceSolveError(MfgError):
    """Exception raised when a reference ODE system cannot be closed"""
    pass


class MetricError(MfgError):
    """Exception raised for undefined metric values (zero denominators)"""
    pass


class CompatibilityError(MfgError):
    """Exception raised when a checkpoint does not fit the configured networks"""
    pass


class UsageError(MfgError):
    """Exception raised for unsupported CLI requests"""
    pass
