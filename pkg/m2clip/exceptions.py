class M2ClipError(Exception):
    """Base exception for m2clip errors"""
    pass

class ConfigurationError(M2ClipError):
    """Raised when a configuration, placement or hyperparameter is invalid"""
    pass

class DimensionError(M2ClipError):
    """Raised when tensor shapes do not agree"""
    pass

class ContractError(M2ClipError):
    """Raised when an operation precondition is violated"""
    pass

class FormatError(M2ClipError):
    """Raised when a checkpoint or data file cannot be decoded"""
    pass

class NonFiniteError(M2ClipError):
    """Raised when a loss or gradient turns NaN/Inf during training"""

    def __init__(self, message: str, tensor_name: str = ""):
        super().__init__(message)
        self.tensor_name = tensor_name
