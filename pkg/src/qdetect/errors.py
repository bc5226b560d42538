"""Exception types shared across the package."""


class QDetectError(Exception):
    pass


class DimensionError(QDetectError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(QDetectError, ValueError):
    """A documented precondition was violated."""


class GradientError(QDetectError, ArithmeticError):
    """Non-finite value or gradient encountered."""


class ConfigurationError(QDetectError, ValueError):
    pass


class InputError(QDetectError, ValueError):
    """A batch is missing a modality the model needs."""


class VocabularyError(QDetectError, IndexError):
    pass


class ModelLoadError(QDetectError, IOError):
    pass


class WavFormatError(QDetectError, ValueError):
    pass


class DatasetError(QDetectError, ValueError):
    """Malformed record file; carries the offending line number when known."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class SchemaError(DatasetError):
    pass


class TrainingError(QDetectError, RuntimeError):
    pass
