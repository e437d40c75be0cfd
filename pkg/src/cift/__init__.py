"""CIF-Transducer on a numpy autograd engine.

Continuous integrate-and-fire alignment feeding a gated bilinear joint
network, a broadcast RNN-T baseline, their losses, a synthetic alignment
corpus and a command-line harness.
"""

from .errors import (
    AlignmentError,
    CiftError,
    ConfigError,
    DataError,
    DegenerateInputError,
    DimensionError,
    GraphError,
    InfeasibleError,
    NumericalError,
    OracleRefusal,
    ParseError,
    SchemaError,
    VocabularyError,
)

__version__ = "0.1.0"

__all__ = [
    "AlignmentError",
    "CiftError",
    "ConfigError",
    "DataError",
    "DegenerateInputError",
    "DimensionError",
    "GraphError",
    "InfeasibleError",
    "NumericalError",
    "OracleRefusal",
    "ParseError",
    "SchemaError",
    "VocabularyError",
]
