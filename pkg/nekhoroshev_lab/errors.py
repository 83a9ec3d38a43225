"""
Error Types - Normal-Form Laboratory
Exceptions raised by the lattice, normal-form, simulator and planning engines
"""

from typing import Any, Dict, Optional


class LabError(Exception):
    """Root of every error the laboratory raises on purpose"""

    exit_code: int = 1

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def to_dict(self) -> Dict[str, Any]:
        return {
            'error': type(self).__name__,
            'message': self.message,
            'details': self.details,
            'exit_code': self.exit_code,
        }


class ConfigError(LabError):
    """Run configuration failed validation"""
    exit_code = 2


class DomainError(LabError):
    """Argument outside the mathematical domain of an operation"""
    exit_code = 3


class BranchDomainError(DomainError):
    """Lambert W argument outside the lower real branch"""


class ModeOutOfRange(LabError):
    """A multi-index entry exceeds the mode cutoff"""
    exit_code = 3


class EnumerationOverflow(LabError):
    """Exhaustive enumeration would exceed its configured budget"""
    exit_code = 3


class NoConvergence(LabError):
    """An iterative solve or tail bound did not close"""
    exit_code = 4


class ScaleError(LabError):
    """Weight scale s does not exceed the base scale s0"""
    exit_code = 3


class PreconditionError(LabError):
    """Operation called outside its stated precondition"""
    exit_code = 3


class SmallnessViolated(LabError):
    """A certified bound of a normal-form step failed"""
    exit_code = 3

    def __init__(self, message: str, step: Optional[int] = None, details: Optional[Dict[str, Any]] = None):
        details = dict(details or {})
        details['step'] = step
        super().__init__(message, details)
        self.step = step


class HBudgetExceeded(LabError):
    """A rational term would need a denominator longer than the budget"""
    exit_code = 3


class NonResonantDomainViolation(LabError):
    """A frequency denominator fell below the non-resonance threshold"""
    exit_code = 3


class DomainExit(LabError):
    """A flow left the admissible non-resonant domain"""
    exit_code = 3

    def __init__(self, message: str, exit_time: float, details: Optional[Dict[str, Any]] = None):
        details = dict(details or {})
        details['exit_time'] = exit_time
        super().__init__(message, details)
        self.exit_time = exit_time


class StepUnstable(LabError):
    """Integrator produced non-finite amplitudes"""
    exit_code = 4


class AdmissibilityWarning(UserWarning):
    """Regime constant has a sign the stability-time formulas do not expect"""
