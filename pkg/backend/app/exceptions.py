"""
Exception hierarchy for the latent accompaniment lab
Every error raised on purpose by the package derives from LatentLabError
"""
from typing import List, Optional


class LatentLabError(Exception):
    """Base class for all package errors"""
    pass


class ContractViolation(LatentLabError, ValueError):
    """An operation was called outside its precondition (shape, range, arity)"""
    pass


class NumericalInstabilityError(LatentLabError):
    """A value became NaN/Inf where a finite value is required"""

    def __init__(self, message: str, coordinate: Optional[int] = None, layer: Optional[int] = None):
        super().__init__(message)
        self.coordinate = coordinate
        self.layer = layer


class TrainingDivergenceError(NumericalInstabilityError):
    """Non-finite loss or gradient during training"""

    def __init__(self, message: str, step: Optional[int] = None, last_checkpoint: Optional[str] = None):
        super().__init__(message)
        self.step = step
        self.last_checkpoint = last_checkpoint


class CorruptionError(LatentLabError):
    """A binary artifact or token sequence is inconsistent with its header"""
    pass


class DegenerateInputError(LatentLabError):
    """Metric input cannot support the requested statistic"""

    def __init__(self, message: str, set_name: str = ""):
        super().__init__(message)
        self.set_name = set_name


class RegistrationError(LatentLabError):
    """Plugin registry misuse (duplicate or unknown name)"""
    pass


class PartialReportError(LatentLabError):
    """Candidate generator ran dry before all evaluation batches completed"""

    def __init__(self, message: str, completed_batches: List[int]):
        super().__init__(message)
        self.completed_batches = completed_batches


class ConfigMismatchError(LatentLabError):
    """Artifacts produced under different data-generator configs were mixed"""
    pass


class ReportParseError(LatentLabError):
    """Malformed metric report CSV"""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class UsageError(LatentLabError):
    """Command-line request that the selected variant cannot serve"""
    pass
