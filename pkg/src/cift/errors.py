"""Exception types shared across the package.

CLI exit codes are attached to the exception classes so that ``cift.cli`` can
map a failure to the right status without a lookup table.
"""


class CiftError(Exception):
    exit_code = 1


class ConfigError(CiftError, ValueError):
    exit_code = 2


class DataError(CiftError, ValueError):
    exit_code = 3


class NumericalError(CiftError, ArithmeticError):
    exit_code = 4


class DimensionError(CiftError, ValueError):
    """Operand shapes are incompatible."""


class GraphError(CiftError, RuntimeError):
    """Backward called on a non-scalar or already consumed graph."""


class AlignmentError(DimensionError):
    """Acoustic and label streams disagree in length (an upstream CIF bug)."""


class VocabularyError(CiftError, IndexError):
    pass


class DegenerateInputError(CiftError, ValueError):
    """An utterance that cannot be processed and should be skipped."""


class InfeasibleError(DegenerateInputError):
    """Alignment is impossible, e.g. a CTC target longer than the input allows."""


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class SchemaError(DataError):
    pass


class OracleRefusal(CiftError, ValueError):
    """Exhaustive enumeration was asked to handle too large an instance."""
