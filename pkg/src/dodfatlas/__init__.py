"""Longitudinal dODF atlas construction from HARDI data.

Real even spherical harmonics, analytical Q-ball reconstruction, voxel-wise
random-intercept mixed models over age, reorientation of warped diffusion
profiles and deterministic tractography.
"""

from .errors import AtlasError, DegenerateDesignError, FormatError, NumericalError, ValidationError

__version__ = "0.1.0"

__all__ = [
    "AtlasError",
    "DegenerateDesignError",
    "FormatError",
    "NumericalError",
    "ValidationError",
    "__version__",
]
