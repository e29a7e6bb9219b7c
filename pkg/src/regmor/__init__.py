"""Registration-based model order reduction for 2D steady conservation laws."""

from .geometry import PARAM_BOUNDS, PARAM_CENTROID, ParameterVector
from .mesh import FEField, Mesh, ReferenceElement

__all__ = [
    "PARAM_BOUNDS",
    "PARAM_CENTROID",
    "ParameterVector",
    "FEField",
    "Mesh",
    "ReferenceElement",
]

__version__ = "0.1.0"
