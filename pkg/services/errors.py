"""
Exception hierarchy for the MoSARe services
User-facing input problems map to CLI exit code 1, everything else to exit code 2
"""

from typing import Any, Dict, Optional


class MoSAReError(Exception):
    """Base class for every error raised by the services package"""

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.details: Dict[str, Any] = {k: v for k, v in details.items() if v is not None}

    def to_dict(self) -> Dict[str, Any]:
        return {
            'type': type(self).__name__,
            'message': str(self),
            'details': self.details,
        }


class UserInputError(MoSAReError):
    """Bad configuration, bad dataset or bad arguments"""


class RuntimeFailure(MoSAReError):
    """Numerical or state failure during a run"""


class ConfigurationError(UserInputError):
    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message, field=field)
        self.field = field


class ParseError(UserInputError):
    def __init__(self, message: str, file: Optional[str] = None, field: Optional[str] = None):
        super().__init__(message, file=file, field=field)
        self.file = file
        self.field = field


class DimensionError(UserInputError):
    def __init__(self, message: str, sample_id: Optional[str] = None):
        super().__init__(message, sample_id=sample_id)
        self.sample_id = sample_id


class StratificationError(UserInputError):
    pass


class MaskingError(UserInputError):
    pass


class LabelError(UserInputError):
    pass


class EmptyBagError(RuntimeFailure):
    pass


class DegenerateClusteringError(RuntimeFailure):
    pass


class NumericalError(RuntimeFailure):
    def __init__(self, message: str, iteration: Optional[int] = None):
        super().__init__(message, iteration=iteration)
        self.iteration = iteration


class GMMStateError(RuntimeFailure):
    pass


class UndefinedMetricError(RuntimeFailure):
    pass


class EmptyBatchError(RuntimeFailure):
    pass


class TrainingDivergedError(RuntimeFailure):
    """Raised when a loss turns NaN/Inf; carries where and what diverged"""

    def __init__(self, message: str, epoch: int, batch: int, breakdown: Dict[str, float]):
        super().__init__(message, epoch=epoch, batch=batch, breakdown=breakdown)
        self.epoch = epoch
        self.batch = batch
        self.breakdown = breakdown
