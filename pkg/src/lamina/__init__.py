"""Layer-wise thickness of the cerebellar cortex from 3D MR volumes.

Stages: intensity standardization, EM tissue classification, fissure
extraction, Laplace/streamline thickness, mid-layer (Purkinje) detection
and completion, sublayer thickness and region-wise group statistics.
"""
__version__ = "0.1.0"

from .errors import (ConvergenceError, DataError, FormatError, GeometryError, LaminaError,
                     ParameterError, StageError)
from .grid import Volume

__all__ = ["Volume", "LaminaError", "ParameterError", "DataError", "FormatError",
           "GeometryError", "StageError", "ConvergenceError", "__version__"]
